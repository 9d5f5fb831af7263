"""Module entry point: ``python -m mfbsde``."""

from .cli import main

raise SystemExit(main())
