"""Control gradient and projected-descent optimizer over open-loop controls.

The Hamiltonian here is a 5-vector of coefficient evaluations, not a scalar:
every "derivative of H" used below is one of the contracted law-kernel
pairings assembled by the adjoint layer.  The usable gradient is the
deterministic per-node reduction g(t) = E[D_vH(t)], valid for deterministic
directions; descent runs under common random numbers (one noise ensemble for
the whole loop), projecting each step onto the admissible box.

Stationarity verdicts are Monte-Carlo aware: a violation smaller than three
gradient standard errors is reported as "inconclusive" rather than a hard
failure, and the convexity assumption behind the sufficiency probe is the
caller's assertion -- the probe only samples admissible controls and compares
costs against the noise band.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adjoint import (
    SensitivityParams,
    _Base,
    _pair_direction,
    _slot_states,
    solve_adjoint,
    solve_variational,
)
from .coefficients import BoxBounds, ControlPath
from .errors import (
    ConvergenceFailureError,
    InvalidArgumentError,
    NumericalFailureError,
)
from .solver import PicardParams, cost_functional, picard_solve

VERDICT_STATIONARY = "stationary"
VERDICT_NOT_STATIONARY = "not-stationary"
VERDICT_INCONCLUSIVE = "inconclusive"


# ---------------------------------------------------------------------------
# Hamiltonian vector and gradient path


@dataclass(frozen=True)
class HamiltonianSample:
    """The coefficient 5-vector at a state point with its co-state weights.

    components holds (-f, sigma, L, -Phi, phi) in that fixed order; weights
    holds the pairing co-states (p, k, 1, 0, 0).  No contraction is applied.
    """

    components: np.ndarray
    weights: tuple


def hamiltonian_vector(coeffs, node, x, y, z, ensemble, p=0.0, k=0.0):
    """Evaluate the Hamiltonian 5-vector at (t_node, x, y, z) under the
    ensemble's law views, paired with co-state weights (p, k, 1, 0, 0)."""
    f_val = coeffs.f(node, x, y, z, coeffs.f_law(ensemble, node))
    sigma_val = coeffs.sigma(node, x, coeffs.sigma_law(ensemble, node))
    L_val = coeffs.L(node, x, y, z, coeffs.cost_law(ensemble))
    Phi_val = coeffs.Phi(x, coeffs.terminal_law(ensemble))
    phi_val = coeffs.phi(x, coeffs.cost_law(ensemble))
    parts = np.broadcast_arrays(
        np.asarray(-1.0 * np.asarray(f_val, dtype=float)),
        np.asarray(sigma_val, dtype=float),
        np.asarray(L_val, dtype=float),
        np.asarray(-1.0 * np.asarray(Phi_val, dtype=float)),
        np.asarray(phi_val, dtype=float))
    components = np.stack([np.array(part, dtype=float) for part in parts])
    if not np.all(np.isfinite(components)):
        raise NumericalFailureError("Hamiltonian components must be finite")
    return HamiltonianSample(components=components, weights=(p, k, 1.0, 0.0, 0.0))


@dataclass(frozen=True)
class GradientPath:
    """Per-node control gradient estimate with its Monte-Carlo spread."""

    values: np.ndarray  # (N,)
    stderr: np.ndarray  # (N,)

    def sup_norm(self):
        return float(np.max(np.abs(self.values)))


def gradient_DvH(coeffs, solved, adjoint):
    """Per-node gradient g(t): the particle mean of the control-slot
    starred paths, signed as the control derivative of the running and
    terminal Hamiltonian pairings."""
    st = adjoint.starred
    if st.skipped:
        raise InvalidArgumentError(
            f"adjoint starred paths incomplete (missing weights for {st.skipped})")
    samples = (-st.f_3_p + st.sigma_2_k + st.L_3 - st.Phi_2_pT + st.phi_3)
    M = samples.shape[0]
    values = samples.mean(axis=0)
    if M > 1:
        stderr = samples.std(axis=0, ddof=1) / np.sqrt(M)
    else:
        stderr = np.zeros_like(values)
    return GradientPath(values=values, stderr=stderr)


def _gradient_path(gradient, n):
    if isinstance(gradient, GradientPath):
        return gradient
    values = np.asarray(gradient, dtype=float)
    if values.shape != (n,):
        raise InvalidArgumentError(f"gradient must have shape ({n},), got {values.shape}")
    return GradientPath(values=values, stderr=np.zeros(n))


# ---------------------------------------------------------------------------
# projection and stationarity


def project_control(control, bounds):
    """Componentwise clamp of a control path onto the admissible box."""
    values = control.values if isinstance(control, ControlPath) else np.asarray(control, dtype=float)
    return ControlPath(bounds.clamp(values))


@dataclass(frozen=True)
class StationarityReport:
    """Box-KKT verdict for a control/gradient pair.

    Per node the violation is |g| in the interior, max(-g, 0) at the lower
    bound and max(g, 0) at the upper bound.  The verdict downgrades to
    "inconclusive" when violations exceed the requested tolerance but stay
    within three gradient standard errors.
    """

    verdict: str
    worst_node: int
    worst_violation: float
    tolerance: float
    effective_tolerance: float


def smp_stationarity_check(control, gradient, bounds, tolerance=1e-6):
    if tolerance <= 0.0:
        raise InvalidArgumentError("tolerance must be positive")
    u = control.values if isinstance(control, ControlPath) else np.asarray(control, dtype=float)
    grad = _gradient_path(gradient, u.shape[0])
    g = grad.values
    at_lower = u <= bounds.lower + 1e-12
    at_upper = u >= bounds.upper - 1e-12
    violation = np.where(at_lower, np.maximum(-g, 0.0),
                         np.where(at_upper, np.maximum(g, 0.0), np.abs(g)))
    worst = int(np.argmax(violation))
    limits = np.maximum(tolerance, 3.0 * grad.stderr)
    if np.all(violation <= tolerance):
        verdict = VERDICT_STATIONARY
    elif np.all(violation <= limits):
        verdict = VERDICT_INCONCLUSIVE
    else:
        verdict = VERDICT_NOT_STATIONARY
    return StationarityReport(verdict=verdict, worst_node=worst,
                              worst_violation=float(violation[worst]),
                              tolerance=float(tolerance),
                              effective_tolerance=float(limits[worst]))


# ---------------------------------------------------------------------------
# projected gradient descent


@dataclass(frozen=True)
class OptimizeParams:
    """Projected-descent settings.

    eta is the fixed step size (zero is allowed and performs evaluation-only
    iterations); halve_on_increase turns on step halving when the cost rises
    beyond the Monte-Carlo band, otherwise a warning event is recorded and
    the step size is kept.
    """

    eta: float = 0.25
    iterations: int = 100
    tolerance: float = 1e-6
    halve_on_increase: bool = False
    picard: PicardParams = field(default_factory=PicardParams)
    sensitivity: SensitivityParams = field(default_factory=SensitivityParams)

    def __post_init__(self):
        if self.eta < 0.0:
            raise InvalidArgumentError("eta must be nonnegative")
        if self.iterations < 1:
            raise InvalidArgumentError("iterations must be >= 1")
        if self.tolerance <= 0.0:
            raise InvalidArgumentError("tolerance must be positive")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    cost: float
    cost_stderr: float
    gradient_sup: float
    step_size: float
    projection_residual: float


@dataclass(frozen=True)
class OptimizerReport:
    """History of a projected-descent run and the final stationarity verdict."""

    history: tuple
    final_control: ControlPath
    verdict: StationarityReport
    converged: bool
    wall_time: float
    events: tuple

    @property
    def iterations(self):
        return len(self.history)


def optimize(coeffs, noise, initial_control, bounds, x0, params=None):
    """Projected gradient descent under common random numbers.

    Each iteration re-solves the coupled system at the current control on
    the shared noise ensemble, assembles the adjoint gradient, records
    (J, |g|, residual), and steps u <- project(u - eta * g).  The loop stops
    when the unit-step projection residual |u - project(u - g)| drops below
    the tolerance, or at the iteration cap (with the last evaluation left
    unstepped so the reported verdict matches the returned control).
    """
    params = params or OptimizeParams()
    start = time.perf_counter()
    u = initial_control if isinstance(initial_control, ControlPath) \
        else ControlPath(np.asarray(initial_control, dtype=float))
    if not bounds.contains(u.values):
        raise InvalidArgumentError("initial control must lie in the admissible box")

    eta = params.eta
    records = []
    events = []
    converged = False
    grad = None
    prev_cost = None
    for it in range(params.iterations):
        try:
            sol = picard_solve(coeffs, noise, u, x0, params=params.picard)
        except Exception as exc:
            raise ConvergenceFailureError(
                f"inner solve failed at optimizer iteration {it}: {exc}") from exc
        if not sol.converged:
            raise ConvergenceFailureError(
                f"coupling iteration did not converge at optimizer iteration {it}")
        cost = cost_functional(coeffs, sol.ensemble)
        ast = solve_adjoint(coeffs, sol, params=params.sensitivity)
        grad = gradient_DvH(coeffs, sol, ast)
        residual = float(np.max(np.abs(
            u.values - bounds.clamp(u.values - grad.values))))
        records.append(IterationRecord(
            iteration=it, cost=cost.value, cost_stderr=cost.stderr,
            gradient_sup=grad.sup_norm(), step_size=eta,
            projection_residual=residual))
        if prev_cost is not None:
            band = 3.0 * (cost.stderr + prev_cost.stderr)
            if cost.value > prev_cost.value + band:
                events.append(
                    f"cost increased beyond the noise band at iteration {it}"
                    f" ({prev_cost.value:.6g} -> {cost.value:.6g})")
                if params.halve_on_increase:
                    eta = eta / 2.0
                    events.append(f"step size halved to {eta:.3g}")
        prev_cost = cost
        if residual <= params.tolerance:
            converged = True
            break
        if it == params.iterations - 1:
            break  # cap reached: leave the evaluated control unstepped
        u = project_control(ControlPath(u.values - eta * grad.values), bounds)
    verdict = smp_stationarity_check(u, grad, bounds, params.tolerance)
    return OptimizerReport(history=tuple(records), final_control=u,
                           verdict=verdict, converged=converged,
                           wall_time=time.perf_counter() - start,
                           events=tuple(events))


# ---------------------------------------------------------------------------
# directional derivative of the cost and the sufficiency probe


def variational_inequality_eval(coeffs, solved, direction, variational=None,
                                params=None):
    """Directional derivative of the cost along `direction`, as an MC average.

    Pairs the variational paths with the running and terminal cost partials
    and law kernels.  At an optimal control this value must be nonnegative
    for every admissible direction v = w - u*.
    """
    params = params or SensitivityParams()
    base = _Base(coeffs, solved)
    ens, grid = base.ensemble, base.grid
    M, N, dt = ens.M, grid.N, grid.dt
    v = np.asarray(getattr(direction, "values", direction), dtype=float)
    if v.shape != (N,):
        raise InvalidArgumentError(f"direction must have shape ({N},), got {v.shape}")
    if variational is None:
        variational = solve_variational(coeffs, solved, v, params=params)
    pd = base.partials
    dX, dY, dZ = variational.dX, variational.dY, variational.dZ
    tilde_idx = np.arange(M)

    running = (pd.L_x * dX[:, :N] + pd.L_y * dY[:, :N] + pd.L_z * dZ).sum(axis=1)
    c_law = coeffs.cost_law(ens)
    mean_dX = dX[:, :N].mean(axis=0)
    mean_dY = dY[:, :N].mean(axis=0)
    slot_weights = (("L_1", dX[:, :N], mean_dX), ("L_2", dY[:, :N], mean_dY),
                    ("L_3", None, v))
    for slot, W, mean_w in slot_weights:
        spec = coeffs.kernel(slot)
        if spec is None:
            continue
        for i in range(N):
            states = _slot_states("L", i, base)
            running += _pair_direction(spec, i, states, c_law, W, mean_w,
                                       dt, tilde_idx)
    terminal = pd.phi_x * dX[:, N]
    for slot, W, mean_w in (("phi_1", dX[:, :N], mean_dX),
                            ("phi_2", dY[:, :N], mean_dY),
                            ("phi_3", None, v)):
        spec = coeffs.kernel(slot)
        if spec is None:
            continue
        states = _slot_states("phi", None, base)
        terminal += _pair_direction(spec, None, states, c_law, W, mean_w,
                                    dt, tilde_idx)
    return float(np.mean(running * dt + terminal))


@dataclass(frozen=True)
class ProbeRow:
    sample: int
    cost: float
    cost_stderr: float
    delta: float
    band: float
    status: str


@dataclass(frozen=True)
class SufficiencyReport:
    """Cost comparisons of random admissible controls against a candidate.

    A sample is a violation only when its cost undercuts the candidate's by
    more than the combined 3-stderr band; differences inside the band are
    inconclusive by convention.  Convexity of the underlying problem is the
    caller's assertion, not something this probe verifies.
    """

    candidate_cost: float
    candidate_stderr: float
    rows: tuple
    violations: int
    inconclusive: int

    @property
    def samples(self):
        return len(self.rows)


def sufficiency_probe(coeffs, noise, candidate, bounds, x0, n_samples=20,
                      seed=0, picard_params=None):
    """Compare the candidate control's cost against random admissible ones.

    Controls are sampled uniformly per node inside the box (which must be
    bounded) from a dedicated counter-based stream, and every cost is
    evaluated on the shared noise ensemble.
    """
    if n_samples < 1:
        raise InvalidArgumentError("n_samples must be >= 1")
    if not (np.isfinite(bounds.lower) and np.isfinite(bounds.upper)):
        raise InvalidArgumentError("sampling requires a bounded admissible box")
    picard_params = picard_params or PicardParams()
    N = noise.grid.N
    u_star = candidate if isinstance(candidate, ControlPath) \
        else ControlPath(np.asarray(candidate, dtype=float))
    base_sol = picard_solve(coeffs, noise, u_star, x0, params=picard_params)
    base_cost = cost_functional(coeffs, base_sol.ensemble)

    rng = np.random.Generator(np.random.Philox(key=[seed, 2 ** 63]))
    rows = []
    violations = 0
    inconclusive = 0
    for s in range(n_samples):
        w = ControlPath(rng.uniform(bounds.lower, bounds.upper, size=N))
        sol = picard_solve(coeffs, noise, w, x0, params=picard_params)
        cost = cost_functional(coeffs, sol.ensemble)
        delta = cost.value - base_cost.value
        band = 3.0 * (cost.stderr + base_cost.stderr)
        if delta < -band:
            status = "violation"
            violations += 1
        elif abs(delta) <= band:
            status = VERDICT_INCONCLUSIVE
            inconclusive += 1
        else:
            status = "supportive"
        rows.append(ProbeRow(sample=s, cost=cost.value, cost_stderr=cost.stderr,
                             delta=delta, band=band, status=status))
    return SufficiencyReport(candidate_cost=base_cost.value,
                             candidate_stderr=base_cost.stderr,
                             rows=tuple(rows), violations=violations,
                             inconclusive=inconclusive)
