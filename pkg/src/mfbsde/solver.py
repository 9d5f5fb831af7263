"""Particle solver for the coupled forward-backward system.

The forward half is an Euler scheme driven only by the diffusion coefficient;
the backward half is least-squares Monte Carlo: at each node the conditional
expectation of the next Y value is a polynomial regression on the current
forward state (optionally augmented with running-integral / running-max path
features), and the Z component is read off the regression of the martingale
increment against the Brownian increment,

    Yhat_i = fit(Y_{i+1} | basis(X_i))
    Z_i    = fit((Y_{i+1} - Yhat_i) * dB_i / dt | basis(X_i))
    Y_i    = Yhat_i + f(t_i, X_i, Yhat_i, Z_i, law) * dt

(subtracting the fitted mean from the Z target leaves the population value
unchanged and removes the O(sqrt(N/M)) noise a plain Y_{i+1}*dB regression
would carry).  The law argument of every coefficient is a view of a *frozen*
ensemble: the mean-field coupling is resolved by Picard iteration over whole
solved ensembles, with optional damping, and the distance between successive
iterates is the Monte-Carlo sup-distance of `coupled_path_distance`.

Each step's design matrix and factorization are cached on the result so that
the sensitivity layers can differentiate *through* the regressions instead of
merely around them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import as_particles
from .errors import InvalidArgumentError, NumericalFailureError
from .grids import ParticleEnsemble, constant_ensemble, coupled_path_distance

_SCALE_FLOOR = 1e-13
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis: monomials in X_i plus optional path features."""

    degree: int = 1
    running_integral: bool = False
    running_max: bool = False

    def __post_init__(self):
        if int(self.degree) != self.degree or not (0 <= self.degree <= 8):
            raise InvalidArgumentError(f"basis degree must be an integer in [0, 8], got {self.degree!r}")
        object.__setattr__(self, "degree", int(self.degree))


@dataclass(frozen=True)
class FitResult:
    """One regression: coefficients, fitted values and residuals."""

    beta: np.ndarray
    fitted: np.ndarray
    resid: np.ndarray


class StepDesign:
    """Standardized design matrix for one grid node, with a reusable
    factorization and the directional derivative of the fit map.

    Columns are an intercept plus standardized raw features; raw features
    with (near-)zero spread are dropped.  If the Gram matrix is singular or
    ill-conditioned a ridge term is added and recorded -- callers surface
    these events as diagnostics.
    """

    def __init__(self, raw_columns, names, M):
        kept_cols, kept_names, scales = [], [], []
        dropped = []
        for col, name in zip(raw_columns, names):
            mu = float(np.mean(col))
            sd = float(np.std(col))
            if sd < _SCALE_FLOOR * max(1.0, abs(mu)):
                dropped.append(name)
                continue
            kept_cols.append((col - mu) / sd)
            kept_names.append(name)
            scales.append(sd)
        self.M = M
        self.names = tuple(kept_names)
        self.dropped = tuple(dropped)
        self.scales = np.asarray(scales)
        A = np.column_stack([np.ones(M)] + kept_cols)
        self.A = A
        gram = A.T @ A
        self.ridge = 0.0
        evals = np.linalg.eigvalsh(gram)
        top = float(evals[-1]) if evals.size else 1.0
        if evals.size and (evals[0] <= 0.0 or top / max(float(evals[0]), 1e-300) > _COND_LIMIT):
            alpha = 1e-10 * max(top, 1.0)
            while True:
                try:
                    np.linalg.cholesky(gram + alpha * np.eye(gram.shape[0]))
                    break
                except np.linalg.LinAlgError:
                    alpha *= 100.0
            self.ridge = alpha
            gram = gram + alpha * np.eye(gram.shape[0])
        self._gram = gram

    @property
    def width(self):
        return self.A.shape[1]

    def fit(self, y):
        beta = np.linalg.solve(self._gram, self.A.T @ y)
        fitted = self.A @ beta
        return FitResult(beta=beta, fitted=fitted, resid=y - fitted)

    def derivative_design(self, dcolumns_by_name):
        """Directional derivative of A given raw-column derivatives.

        dcolumns_by_name maps raw feature names to their (M,) directional
        derivatives; the intercept derivative is zero and standardization
        uses the base mean/scale (constants of the base ensemble).
        """
        dA = np.zeros_like(self.A)
        for k, name in enumerate(self.names):
            dcol = dcolumns_by_name.get(name)
            if dcol is not None:
                dA[:, k + 1] = dcol / self.scales[k]
        return dA

    def dfit(self, fit, dA, dy):
        """Directional derivative of the fitted values of `fit`.

        For F(A, y) = A (A^T A)^{-1} A^T y the derivative in (dA, dy) is
        dF = dA beta + A dbeta with (A^T A) dbeta = dA^T r + A^T (dy - dA beta),
        r the base residual.  The base (possibly ridged) Gram is reused.
        """
        rhs = dA.T @ fit.resid + self.A.T @ (dy - dA @ fit.beta)
        dbeta = np.linalg.solve(self._gram, rhs)
        return dA @ fit.beta + self.A @ dbeta


@dataclass(frozen=True)
class PathFeatures:
    """Per-ensemble path features the basis may use, with their argmax data."""

    running_integral: np.ndarray | None  # (M, N+1)
    running_max: np.ndarray | None       # (M, N+1)
    running_argmax: np.ndarray | None    # (M, N+1) int


def build_path_features(X, dt, basis):
    run_int = run_max = run_arg = None
    M, n_nodes = X.shape
    if basis.running_integral:
        run_int = np.zeros((M, n_nodes))
        np.cumsum(X[:, :-1] * dt, axis=1, out=run_int[:, 1:])
    if basis.running_max:
        run_max = np.empty((M, n_nodes))
        run_arg = np.zeros((M, n_nodes), dtype=int)
        run_max[:, 0] = X[:, 0]
        for i in range(1, n_nodes):
            better = X[:, i] > run_max[:, i - 1]
            run_max[:, i] = np.where(better, X[:, i], run_max[:, i - 1])
            run_arg[:, i] = np.where(better, i, run_arg[:, i - 1])
    return PathFeatures(run_int, run_max, run_arg)


def design_at_node(X, features, basis, node):
    """Raw columns and names of the regression design at a grid node."""
    x = X[:, node]
    cols, names = [], []
    acc = x
    for k in range(1, basis.degree + 1):
        cols.append(acc)
        names.append(f"x^{k}")
        if k < basis.degree:
            acc = acc * x
    if basis.running_integral:
        cols.append(features.running_integral[:, node])
        names.append("run_int")
    if basis.running_max:
        cols.append(features.running_max[:, node])
        names.append("run_max")
    return StepDesign(cols, names, X.shape[0])


def derivative_columns(X, dX, features, dfeatures_int, basis, node, run_arg=None):
    """Directional derivatives of the raw design columns at `node`.

    dX is the forward sensitivity (M, N+1); the running-integral derivative
    is its running integral; the running-max derivative picks dX at the
    (first) argmax node, valid off ties.
    """
    x = X[:, node]
    dx = dX[:, node]
    out = {}
    acc = np.ones_like(x)
    for k in range(1, basis.degree + 1):
        out[f"x^{k}"] = k * acc * dx
        acc = acc * x
    if basis.running_integral:
        out["run_int"] = dfeatures_int[:, node]
    if basis.running_max:
        rows = np.arange(X.shape[0])
        out["run_max"] = dX[rows, run_arg[:, node]]
    return out


# ---------------------------------------------------------------------------
# forward / backward passes


def _with_control(ensemble, control):
    """The law ensemble with `control` attached, if it lacks one."""
    if control is None or ensemble.control is control:
        return ensemble
    return ParticleEnsemble(grid=ensemble.grid, X=ensemble.X, Y=ensemble.Y,
                            Z=ensemble.Z, noise=ensemble.noise, control=control)


def solve_forward(coeffs, law_ensemble, noise, control, x0):
    """Euler scheme for the forward component against a frozen law ensemble.

    The law views handed to the diffusion carry `control` as their control
    component.  Returns the (M, N+1) path array.  Raises
    NumericalFailureError naming the first offending (particle, node) if
    values leave the finite range.
    """
    law_ensemble = _with_control(law_ensemble, control)
    grid = noise.grid
    M = noise.M
    X = np.empty((M, grid.N + 1))
    X[:, 0] = float(x0)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(grid.N):
            law = coeffs.sigma_law(law_ensemble, i)
            sig = as_particles(coeffs.sigma(i, X[:, i], law), M)
            X[:, i + 1] = X[:, i] + sig * noise.dB[:, i]
            if not np.all(np.isfinite(X[:, i + 1])):
                j = int(np.flatnonzero(~np.isfinite(X[:, i + 1]))[0])
                raise NumericalFailureError(
                    f"forward path became non-finite at particle {j}, node {i + 1}")
    return X


@dataclass(frozen=True)
class StepCache:
    """Everything the sensitivity layers need about one backward step."""

    design: StepDesign
    fit_y: FitResult
    fit_z: FitResult
    yhat: np.ndarray
    z: np.ndarray
    f_values: np.ndarray


@dataclass(frozen=True)
class BackwardCache:
    """Per-node regressions of one backward pass (index 0..N-1)."""

    steps: tuple
    basis: BasisSpec
    features: PathFeatures

    def design(self, node):
        return self.steps[node].design


def solve_backward_lsmc(coeffs, X, law_ensemble, noise, control, basis):
    """Backward least-squares Monte-Carlo pass against a frozen law ensemble.

    Returns (Y, Z, cache, events) where events is a list of human-readable
    strings describing dropped columns and ridge fallbacks (empty in the
    well-conditioned case).
    """
    law_ensemble = _with_control(law_ensemble, control)
    grid = noise.grid
    M, N = noise.M, grid.N
    dt = grid.dt
    Y = np.empty((M, N + 1))
    Z = np.empty((M, N))
    features = build_path_features(X, dt, basis)
    events = []

    terminal_law = coeffs.terminal_law(law_ensemble)
    Y[:, N] = as_particles(coeffs.Phi(X[:, N], terminal_law), M)
    if not np.all(np.isfinite(Y[:, N])):
        raise NumericalFailureError("terminal condition produced non-finite values")

    steps = [None] * N
    for i in range(N - 1, -1, -1):
        design = design_at_node(X, features, basis, i)
        if design.dropped:
            events.append(f"node {i}: dropped constant column(s) {', '.join(design.dropped)}")
        if design.ridge:
            events.append(f"node {i}: ridge fallback alpha={design.ridge:.3e}")
        fit_y = design.fit(Y[:, i + 1])
        yhat = fit_y.fitted
        fit_z = design.fit(fit_y.resid * noise.dB[:, i] / dt)
        z = fit_z.fitted
        law = coeffs.f_law(law_ensemble, i)
        f_vals = as_particles(coeffs.f(i, X[:, i], yhat, z, law), M)
        Y[:, i] = yhat + f_vals * dt
        Z[:, i] = z
        if not np.all(np.isfinite(Y[:, i])):
            raise NumericalFailureError(f"backward pass produced non-finite Y at node {i}")
        steps[i] = StepCache(design=design, fit_y=fit_y, fit_z=fit_z,
                             yhat=yhat, z=z, f_values=f_vals)
    cache = BackwardCache(steps=tuple(steps), basis=basis, features=features)
    return Y, Z, cache, events


# ---------------------------------------------------------------------------
# Picard iteration over whole ensembles


@dataclass(frozen=True)
class PicardParams:
    damping: float = 1.0          # 1 = undamped; new = damping*raw + (1-damping)*old
    tolerance: float = 1e-10
    max_iterations: int = 40
    init: str = "flat"            # or "bootstrap"
    basis: BasisSpec = field(default_factory=BasisSpec)

    def __post_init__(self):
        if not (0.0 < self.damping <= 1.0):
            raise InvalidArgumentError(f"damping must be in (0, 1], got {self.damping!r}")
        if self.tolerance <= 0.0:
            raise InvalidArgumentError("tolerance must be positive")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        if self.init not in ("flat", "bootstrap"):
            raise InvalidArgumentError(f"init must be 'flat' or 'bootstrap', got {self.init!r}")


@dataclass(frozen=True)
class PicardResult:
    """A solved (or best-effort) coupled system.

    `ensemble` satisfies the terminal condition against its own (X, control)
    law bitwise: the final backward pass is re-run against the returned
    forward paths.  `history` holds the coupled path distance between each
    frozen law iterate and the raw solve against it; `converged` is a flag,
    never an exception -- callers decide how hard to fail.
    """

    ensemble: ParticleEnsemble
    history: tuple
    converged: bool
    iterations: int
    decoupled: bool
    cache: BackwardCache
    events: tuple
    z_sup: float

    @property
    def grid(self):
        return self.ensemble.grid


def _one_pass(coeffs, law_ensemble, noise, control, x0, basis):
    X = solve_forward(coeffs, law_ensemble, noise, control, x0)
    Y, Z, cache, events = solve_backward_lsmc(coeffs, X, law_ensemble, noise, control, basis)
    ens = ParticleEnsemble(grid=noise.grid, X=X, Y=Y, Z=Z, noise=noise, control=control)
    return ens, cache, events


def picard_solve(coeffs, noise, control, x0, params=None):
    """Resolve the mean-field coupling by iterating solves against frozen laws.

    Each iteration solves the full forward/backward system with every law
    argument read from the previous iterate, records the coupled path
    distance between that iterate and the raw solve, then relaxes with the
    damping factor.  Stops when the distance drops below the tolerance or
    the iteration budget runs out (converged=False -- a flag, not an error).

    A final backward refresh against the last forward paths' own law makes
    the returned ensemble exactly self-consistent at the terminal node.
    """
    params = params or PicardParams()
    grid = noise.grid
    events = []

    current = constant_ensemble(grid, noise, x0=x0, y0=0.0, control=control)
    if params.init == "bootstrap":
        current, _, ev = _one_pass(coeffs, current, noise, control, x0, params.basis)
        events.extend(f"bootstrap: {e}" for e in ev)

    history = []
    converged = False
    raw = current
    for n in range(1, params.max_iterations + 1):
        raw, _, ev = _one_pass(coeffs, current, noise, control, x0, params.basis)
        events.extend(f"iter {n}: {e}" for e in ev)
        d = coupled_path_distance(current, raw)
        history.append(d)
        if d < params.tolerance:
            converged = True
            break
        if params.damping == 1.0:
            current = raw
        else:
            lam = params.damping
            current = ParticleEnsemble(
                grid=grid,
                X=lam * raw.X + (1.0 - lam) * current.X,
                Y=lam * raw.Y + (1.0 - lam) * current.Y,
                Z=lam * raw.Z + (1.0 - lam) * current.Z,
                noise=noise, control=control)

    # backward refresh: re-run the backward pass against the final forward
    # paths' own law so Y_N == Phi(X_N, law(own ensemble)) bitwise
    Y, Z, cache, ev = solve_backward_lsmc(coeffs, raw.X, raw, noise, control, params.basis)
    events.extend(f"refresh: {e}" for e in ev)
    final = ParticleEnsemble(grid=grid, X=raw.X, Y=Y, Z=Z, noise=noise, control=control)

    decoupled = len(history) >= 2 and history[1] == 0.0
    return PicardResult(
        ensemble=final,
        history=tuple(history),
        converged=converged,
        iterations=len(history),
        decoupled=decoupled,
        cache=cache,
        events=tuple(events),
        z_sup=float(np.max(np.abs(Z))) if Z.size else 0.0,
    )


# ---------------------------------------------------------------------------
# cost


@dataclass(frozen=True)
class CostValue:
    value: float
    stderr: float
    per_particle: np.ndarray


def cost_functional(coeffs, ensemble):
    """Monte-Carlo cost: left-endpoint quadrature of the running cost along
    each particle plus the terminal cost, averaged over particles."""
    grid = ensemble.grid
    M, N = ensemble.M, grid.N
    law = coeffs.cost_law(ensemble)
    acc = np.zeros(M)
    for i in range(N):
        acc += as_particles(
            coeffs.L(i, ensemble.X[:, i], ensemble.Y[:, i], ensemble.Z[:, i], law), M)
    acc *= grid.dt
    acc += as_particles(coeffs.phi(ensemble.X[:, N], law), M)
    stderr = float(np.std(acc) / np.sqrt(M)) if M > 1 else 0.0
    return CostValue(value=float(np.mean(acc)), stderr=stderr, per_particle=acc)
