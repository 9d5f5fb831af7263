"""Figure rendering for manifest plot series (file output only).

Every figure is derived from the same tabular series the delimited output
uses, so a PNG and its CSV always agree.  The Agg backend is forced before
pyplot is imported; PNG metadata is stripped so repeated renders of one
manifest are stable.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .harness import _series_rows, available_series  # noqa: E402

_SAVE_OPTS = {"dpi": 120, "bbox_inches": "tight", "metadata": {"Software": None}}


def _columns(manifest, which):
    header, rows = _series_rows(manifest, which)
    return header, [list(col) for col in zip(*rows)]


def _plot_picard_history(manifest, ax):
    _, (iterations, distances) = _columns(manifest, "picard-history")
    ax.semilogy(iterations, distances, marker="o")
    ax.set_xlabel("coupling iteration")
    ax.set_ylabel("path distance")
    ax.set_title("fixed-point contraction")


def _plot_rho_table(manifest, ax):
    _, (rhos, ex, ey, ez) = _columns(manifest, "rho-table")
    floor = 1e-300
    for err, label, marker in ((ex, "X", "o"), (ey, "Y", "s"), (ez, "Z", "^")):
        ax.loglog(rhos, [max(e, floor) for e in err], marker=marker, label=label)
    ax.set_xlabel("step size rho")
    ax.set_ylabel("quotient error")
    ax.set_title("difference-quotient convergence")
    ax.legend()


def _plot_gradient_profile(manifest, ax):
    header, cols = _columns(manifest, "gradient-profile")
    t, grad, stderr = cols[1], cols[2], cols[3]
    ax.errorbar(t, grad, yerr=[3 * s for s in stderr], marker="o",
                capsize=2, label="adjoint gradient")
    if "fd" in header:
        ax.plot(t, cols[4], linestyle="none", marker="x", label="central FD")
    ax.set_xlabel("time")
    ax.set_ylabel("gradient")
    ax.set_title("control gradient profile")
    ax.legend()


def _plot_cost_history(manifest, ax):
    _, (iterations, costs, stderr, _, _) = _columns(manifest, "cost-history")
    ax.errorbar(iterations, costs, yerr=[3 * s for s in stderr], marker="o",
                capsize=2)
    ax.set_xlabel("descent iteration")
    ax.set_ylabel("cost")
    ax.set_title("projected-descent cost history")


def _plot_control_profile(manifest, ax):
    _, (_, t, control) = _columns(manifest, "control-profile")
    ax.step(t, control, where="post", marker=".")
    ax.set_xlabel("time")
    ax.set_ylabel("control")
    ax.set_title("final control")


_RENDERERS = {
    "picard-history": _plot_picard_history,
    "rho-table": _plot_rho_table,
    "gradient-profile": _plot_gradient_profile,
    "cost-history": _plot_cost_history,
    "control-profile": _plot_control_profile,
}


def render_plots(manifest, out_dir):
    """Render every series the manifest provides to `<out_dir>/<series>.png`."""
    written = []
    for which in available_series(manifest):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        try:
            _RENDERERS[which](manifest, ax)
            path = os.path.join(out_dir, f"{which}.png")
            fig.savefig(path, **_SAVE_OPTS)
        finally:
            plt.close(fig)
        written.append(path)
    return tuple(written)
