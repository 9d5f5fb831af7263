"""Time grids, Brownian noise ensembles, particle ensembles and path-law views.

Conventions used throughout the package:

* A grid with N steps has N+1 nodes t_i = i*dt, i = 0..N.  State paths (X, Y)
  carry one value per node, shape (M, N+1).  Increment-like quantities --
  Brownian increments dB, the Z process, control paths -- live on the N *left*
  nodes t_0..t_{N-1}, shape (M, N) or (N,).
* Time integrals are left-endpoint Riemann sums over those left nodes.
* Noise is generated counter-based: one Philox stream per particle, keyed by
  (seed, particle index), so particle j's increments never depend on how many
  particles are simulated alongside it.

Ensembles are immutable: arrays are flagged read-only at construction and
every transformation builds a new ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

#: Identifier of the noise stream layout, recorded in result manifests.
NOISE_LAYOUT = "philox2x64/key=(seed,particle)/v1"

_TINY = 1e-300


def _readonly(a):
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with N steps (N+1 nodes)."""

    T: float
    N: int
    dt: float
    nodes: np.ndarray  # shape (N+1,)

    def left_nodes(self):
        """The N quadrature nodes t_0..t_{N-1} used by left-endpoint sums."""
        return self.nodes[:-1]


def make_time_grid(T, N):
    """Build a uniform TimeGrid.

    Args:
        T: horizon, must be > 0 and finite.
        N: number of steps, must be an integer >= 1.

    Raises:
        InvalidArgumentError: on a non-positive/non-finite horizon or N < 1.
    """
    if not np.isfinite(T) or T <= 0.0:
        raise InvalidArgumentError(f"horizon must be finite and > 0, got T={T!r}")
    if int(N) != N or N < 1:
        raise InvalidArgumentError(f"step count must be an integer >= 1, got N={N!r}")
    N = int(N)
    dt = T / N
    nodes = _readonly(np.linspace(0.0, T, N + 1))
    return TimeGrid(T=float(T), N=N, dt=dt, nodes=nodes)


@dataclass(frozen=True)
class NoiseEnsemble:
    """M independent Brownian increment rows on a common grid.

    dB[j, i] is the increment of particle j over [t_i, t_{i+1}], distributed
    N(0, dt).  `layout` names the counter-based stream scheme; the same
    (seed, j) always reproduces the same row regardless of M.
    """

    grid: TimeGrid
    M: int
    seed: int
    layout: str
    dB: np.ndarray  # shape (M, N)

    def cumulative(self):
        """Brownian path values B at all N+1 nodes (B_0 = 0), shape (M, N+1)."""
        B = np.zeros((self.M, self.grid.N + 1))
        np.cumsum(self.dB, axis=1, out=B[:, 1:])
        return B


def simulate_noise(grid, M, seed):
    """Draw a NoiseEnsemble of M particles on `grid` from integer `seed`.

    Each particle j uses its own Philox generator keyed by the two words
    (seed, j); rows are therefore reproducible bit-for-bit and independent of
    M and of any worker partitioning.
    """
    if not isinstance(grid, TimeGrid):
        raise InvalidArgumentError("grid must be a TimeGrid")
    if int(M) != M or M < 1:
        raise InvalidArgumentError(f"particle count must be an integer >= 1, got M={M!r}")
    if int(seed) != seed or seed < 0 or seed >= 2**64:
        raise InvalidArgumentError(f"seed must be an integer in [0, 2^64), got {seed!r}")
    M = int(M)
    seed = int(seed)
    root = np.sqrt(grid.dt)
    dB = np.empty((M, grid.N))
    for j in range(M):
        key = np.array([seed, j], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        dB[j, :] = gen.standard_normal(grid.N)
    dB *= root
    return NoiseEnsemble(grid=grid, M=M, seed=seed, layout=NOISE_LAYOUT, dB=_readonly(dB))


@dataclass(frozen=True)
class ParticleEnsemble:
    """A coupled particle system: forward paths X, backward pair (Y, Z).

    X and Y have shape (M, N+1); Z lives on left nodes, shape (M, N).
    `control` is the deterministic control path attached to the system (an
    object exposing `values`, one float per left node) or None, and `noise`
    is the driving NoiseEnsemble.
    """

    grid: TimeGrid
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    noise: NoiseEnsemble
    control: object = None

    def __post_init__(self):
        M = self.X.shape[0]
        n_nodes = self.grid.N + 1
        if self.X.shape != (M, n_nodes):
            raise InvalidArgumentError(
                f"X must have shape (M, N+1)=({M}, {n_nodes}), got {self.X.shape}")
        if self.Y.shape != (M, n_nodes):
            raise InvalidArgumentError(
                f"Y must have shape ({M}, {n_nodes}), got {self.Y.shape}")
        if self.Z.shape != (M, n_nodes - 1):
            raise InvalidArgumentError(
                f"Z must have shape (M, N)=({M}, {n_nodes - 1}), got {self.Z.shape}")
        if self.noise.dB.shape != (M, n_nodes - 1):
            raise InvalidArgumentError(
                f"noise has {self.noise.dB.shape[0]} particles / "
                f"{self.noise.dB.shape[1]} steps, ensemble needs ({M}, {n_nodes - 1})")
        for name in ("X", "Y", "Z"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                j, i = np.argwhere(~np.isfinite(arr))[0]
                raise InvalidArgumentError(
                    f"{name} contains a non-finite value at particle {j}, node {i}")
        object.__setattr__(self, "X", _readonly(self.X))
        object.__setattr__(self, "Y", _readonly(self.Y))
        object.__setattr__(self, "Z", _readonly(self.Z))

    @property
    def M(self):
        return self.X.shape[0]

    def law(self, components="xyu", x_freeze=None, y_floor=None):
        """An EmpiricalPathLaw view of this ensemble (no data is copied)."""
        return EmpiricalPathLaw(self, components=components,
                                x_freeze=x_freeze, y_floor=y_floor)


def constant_ensemble(grid, noise, x0, y0=0.0, control=None):
    """Degenerate ensemble with X ≡ x0, Y ≡ y0, Z ≡ 0 (Picard initialization)."""
    M = noise.M
    X = np.full((M, grid.N + 1), float(x0))
    Y = np.full((M, grid.N + 1), float(y0))
    Z = np.zeros((M, grid.N))
    return ParticleEnsemble(grid=grid, X=X, Y=Y, Z=Z, noise=noise, control=control)


class EmpiricalPathLaw:
    """Read-only view of an ensemble's paths as an empirical path measure.

    The view can restrict which components are visible ("x", "xu", "xyu") and
    carries the two truncation markers used by non-anticipative coefficients:

    * ``x_freeze = i``: the X component is the stopped path X_{. ∧ t_i}; reads
      of node l return column min(l, i).
    * ``y_floor = i``: the Y component is the anticipated path Y_{. ∨ t_i};
      reads of node l return column max(l, i).

    Accessors return column views of the underlying arrays -- path data is
    never copied.
    """

    __slots__ = ("ensemble", "components", "x_freeze", "y_floor")

    def __init__(self, ensemble, components="xyu", x_freeze=None, y_floor=None):
        if components not in ("x", "xu", "xyu"):
            raise InvalidArgumentError(
                f"components must be 'x', 'xu' or 'xyu', got {components!r}")
        N = ensemble.grid.N
        for name, marker in (("x_freeze", x_freeze), ("y_floor", y_floor)):
            if marker is not None and not (0 <= int(marker) <= N):
                raise InvalidArgumentError(f"{name} must be a node index in [0, {N}]")
        self.ensemble = ensemble
        self.components = components
        self.x_freeze = None if x_freeze is None else int(x_freeze)
        self.y_floor = None if y_floor is None else int(y_floor)

    @property
    def M(self):
        return self.ensemble.M

    @property
    def grid(self):
        return self.ensemble.grid

    def x_at(self, node):
        """X values of all particles at grid node `node` (freeze applied)."""
        if self.x_freeze is not None:
            node = min(node, self.x_freeze)
        return self.ensemble.X[:, node]

    def y_at(self, node):
        """Y values at `node` (floor applied).  Requires the 'xyu' view."""
        if "y" not in self.components:
            raise InvalidArgumentError(
                "this law view does not expose the Y component")
        if self.y_floor is not None:
            node = max(node, self.y_floor)
        return self.ensemble.Y[:, node]

    def u_at(self, node):
        """Control value at left node `node` (deterministic, one float)."""
        if "u" not in self.components:
            raise InvalidArgumentError(
                "this law view does not expose the control component")
        ctrl = self.ensemble.control
        if ctrl is None:
            return 0.0
        return float(ctrl.values[node])

    def u_values(self):
        """The full control vector on left nodes, shape (N,)."""
        if "u" not in self.components:
            raise InvalidArgumentError(
                "this law view does not expose the control component")
        ctrl = self.ensemble.control
        if ctrl is None:
            return np.zeros(self.grid.N)
        return np.asarray(ctrl.values, dtype=float)

    def mean_x(self, node):
        return float(np.mean(self.x_at(node)))

    def mean_y(self, node):
        return float(np.mean(self.y_at(node)))


def coupled_path_distance(a, b):
    """Monte-Carlo sup-norm distance between two ensembles on the same grid.

    distance = sqrt( (1/M) sum_j [ sup_i |aX - bX|^2 + sup_i |aY - bY|^2 ] )

    Z is deliberately excluded: the Picard iteration controls (X, Y) and Z is
    a derived regression quantity.
    """
    if a.grid.N != b.grid.N or a.grid.T != b.grid.T:
        raise InvalidArgumentError("ensembles live on different grids")
    if a.M != b.M:
        raise InvalidArgumentError(f"particle counts differ: {a.M} vs {b.M}")
    dx = np.max(np.abs(a.X - b.X), axis=1)
    dy = np.max(np.abs(a.Y - b.Y), axis=1)
    return float(np.sqrt(np.mean(dx * dx + dy * dy)))


def compactness_diagnostics(ensemble):
    """Raw tightness diagnostics of the joint (X, Y) path ensemble.

    Returns a dict with

    * ``fourth_moment_sup``: sup over nodes of mean_j |(X,Y)_j(t_i)|^4,
    * ``increment_ratio_max``: max over node pairs s < t of
      mean_j |(X,Y)_j(t) - (X,Y)_j(s)|^4 / (t - s)^2 -- for Brownian paths
      this concentrates near 3,
    * ``increment_ratio_argmax``: the (s_index, t_index) pair attaining it.

    No threshold is enforced; the numbers are advisory.
    """
    X, Y = ensemble.X, ensemble.Y
    nodes = ensemble.grid.nodes
    sq = X * X + Y * Y
    fourth = float(np.max(np.mean(sq * sq, axis=0)))
    best = 0.0
    best_pair = (0, 1)
    n_nodes = X.shape[1]
    for i in range(n_nodes - 1):
        dX = X[:, i + 1:] - X[:, i:i + 1]
        dY = Y[:, i + 1:] - Y[:, i:i + 1]
        d2 = dX * dX + dY * dY
        num = np.mean(d2 * d2, axis=0)
        span = nodes[i + 1:] - nodes[i]
        ratios = num / (span * span)
        l = int(np.argmax(ratios))
        if ratios[l] > best:
            best = float(ratios[l])
            best_pair = (i, i + 1 + l)
    return {
        "fourth_moment_sup": fourth,
        "increment_ratio_max": best,
        "increment_ratio_argmax": best_pair,
    }
