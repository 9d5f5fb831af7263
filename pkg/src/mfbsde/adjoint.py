"""Pathwise sensitivities and adjoint processes for the coupled solver.

Three layers live here, all operating on a solved ensemble (a Picard fixed
point with its regression cache):

1. the *variational* system: the directional derivative of the discrete
   solver map along a control direction v.  This is built as the exact
   Jacobian-vector product of the implemented scheme -- the backward pass
   differentiates through the regression operator itself (design-matrix
   derivative included), and every law functional is differentiated with the
   same left-endpoint quadrature the families use, so difference quotients of
   the primal solver converge to it at first order with no floor;

2. the *starred* operators: time-t conditional expectations of double
   (particle x particle) averages pairing each coefficient's law kernel with
   adjoint weight paths.  Six shapes appear: integrals over [t, T] with an
   exchange term (diffusion/X slot), integrals over [0, T] (driver X and
   control slots, running-cost slots), integrals over [0, t] with an exchange
   term (driver Y slot), and plain terminal-sample averages (terminal-cost
   and terminal-condition slots, the latter weighted by p(T));

3. the adjoint pair: a forward equation for p (explicit Euler; its own delay
   term is assembled on the fly since it only reads p on [0, t]) and a
   backward equation for (q, k) solved by the same regression scheme as the
   primal backward pass, with an outer relaxation over k when the diffusion
   carries an X-law kernel (the k-dependence is then anticipated).

`duality_check` evaluates both sides of the bilinear identity that connects
the variational and adjoint systems; its residual is the package's main
internal consistency probe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import PathSample, as_particles, materialize_paths
from .errors import InvalidArgumentError
from .solver import PicardResult, derivative_columns

_TINY = 1e-300


@dataclass(frozen=True)
class SensitivityParams:
    """Settings for the iterative sensitivity solves.

    tolerance/max_iterations control the anticipation loops (variational
    backward pass, outer k relaxation); damping relaxes the k updates;
    m_tilde caps the number of tilde-particles in the starred double
    averages (None = all particles, subsampled by fixed stride otherwise).
    """

    tolerance: float = 1e-12
    max_iterations: int = 80
    damping: float = 1.0
    m_tilde: int | None = None

    def __post_init__(self):
        if self.tolerance <= 0.0:
            raise InvalidArgumentError("tolerance must be positive")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        if not (0.0 < self.damping <= 1.0):
            raise InvalidArgumentError("damping must be in (0, 1]")
        if self.m_tilde is not None and self.m_tilde < 1:
            raise InvalidArgumentError("m_tilde must be >= 1 when given")


def _direction_vector(direction, N):
    values = getattr(direction, "values", direction)
    v = np.asarray(values, dtype=float)
    if v.shape != (N,):
        raise InvalidArgumentError(f"direction must have one value per left node ({N},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError("direction must be finite")
    return v


def _tilde_indices(M, m_tilde):
    if m_tilde is None or m_tilde >= M:
        return np.arange(M)
    stride = max(1, M // int(m_tilde))
    return np.arange(0, M, stride)[:int(m_tilde)]


# ---------------------------------------------------------------------------
# slot geometry: which coefficient, which law component, which law view

_SLOT_KIND = {
    "sigma_1": ("sigma", "x"), "sigma_2": ("sigma", "u"),
    "f_1": ("f", "x"), "f_2": ("f", "y"), "f_3": ("f", "u"),
    "L_1": ("L", "x"), "L_2": ("L", "y"), "L_3": ("L", "u"),
    "Phi_1": ("Phi", "x"), "Phi_2": ("Phi", "u"),
    "phi_1": ("phi", "x"), "phi_2": ("phi", "y"), "phi_3": ("phi", "u"),
}


def _slot_law(coeffs, ensemble, kind, node):
    if kind == "sigma":
        return coeffs.sigma_law(ensemble, node)
    if kind == "f":
        return coeffs.f_law(ensemble, node)
    if kind == "Phi":
        return coeffs.terminal_law(ensemble)
    return coeffs.cost_law(ensemble)


def _slot_states(kind, node, base):
    """(tuple of (M,) arrays) classical arguments of a coefficient at `node`."""
    ens, cache = base.ensemble, base.cache
    N = ens.grid.N
    if kind == "sigma":
        return (ens.X[:, node],)
    if kind == "f":
        step = cache.steps[node]
        return (ens.X[:, node], step.yhat, step.z)
    if kind == "L":
        return (ens.X[:, node], ens.Y[:, node], ens.Z[:, node])
    return (ens.X[:, N],)


def _state_of(states, j):
    return tuple(float(s[j]) for s in states)


# ---------------------------------------------------------------------------
# base-point partial derivatives along the solved ensemble


@dataclass(frozen=True)
class BaseDerivatives:
    """Classical partials of the coefficients along the base ensemble.

    f-partials are evaluated at the solver's discrete point (X_i, Yhat_i,
    Z_i); L-partials at the cost quadrature's point (X_i, Y_i, Z_i).
    Arrays are (M, N) on left nodes; terminal partials are (M,).
    """

    sigma_x: np.ndarray
    f_x: np.ndarray
    f_y: np.ndarray
    f_z: np.ndarray
    L_x: np.ndarray
    L_y: np.ndarray
    L_z: np.ndarray
    Phi_x: np.ndarray
    phi_x: np.ndarray


def base_derivatives(coeffs, solved):
    ens, cache = solved.ensemble, solved.cache
    grid = ens.grid
    M, N = ens.M, grid.N
    out = {name: np.empty((M, N)) for name in
           ("sigma_x", "f_x", "f_y", "f_z", "L_x", "L_y", "L_z")}
    c_law = coeffs.cost_law(ens)
    for i in range(N):
        s_law = coeffs.sigma_law(ens, i)
        f_law = coeffs.f_law(ens, i)
        step = cache.steps[i]
        x = ens.X[:, i]
        out["sigma_x"][:, i] = as_particles(coeffs.sigma_x(i, x, s_law), M)
        for name, fn in (("f_x", coeffs.f_x), ("f_y", coeffs.f_y), ("f_z", coeffs.f_z)):
            out[name][:, i] = as_particles(fn(i, x, step.yhat, step.z, f_law), M)
        for name, fn in (("L_x", coeffs.L_x), ("L_y", coeffs.L_y), ("L_z", coeffs.L_z)):
            out[name][:, i] = as_particles(fn(i, x, ens.Y[:, i], ens.Z[:, i], c_law), M)
    Phi_x = as_particles(coeffs.Phi_x(ens.X[:, N], coeffs.terminal_law(ens)), M)
    phi_x = as_particles(coeffs.phi_x(ens.X[:, N], c_law), M)
    return BaseDerivatives(Phi_x=Phi_x, phi_x=phi_x, **out)


# ---------------------------------------------------------------------------
# variational system


@dataclass(frozen=True)
class VariationalResult:
    """Directional derivative of the solved ensemble along a control direction."""

    direction: np.ndarray  # (N,)
    dX: np.ndarray         # (M, N+1)
    dY: np.ndarray         # (M, N+1)
    dZ: np.ndarray         # (M, N)
    converged: bool
    iterations: int


class _Base:
    """Bundles the solved state pieces the sensitivity passes share."""

    def __init__(self, coeffs, solved):
        if not isinstance(solved, PicardResult):
            raise InvalidArgumentError("expected a PicardResult from picard_solve")
        coeffs.require_canonical("sensitivity analysis")
        self.coeffs = coeffs
        self.solved = solved
        self.ensemble = solved.ensemble
        self.cache = solved.cache
        self.grid = solved.ensemble.grid
        self.partials = base_derivatives(coeffs, solved)


def _pair_direction(spec, node, states, law, W, mean_w, dt, tilde_idx):
    """(M,) values of (1/Mt) sum_m <kernel(node, state_j; sample_m), w_m>.

    W is the (M, N) matrix of weight paths per tilde particle (already
    component-truncated), or None when every tilde particle carries the same
    weight path mean_w (the deterministic control direction).  Exploits the
    kernel's structure flags: structure-free kernels collapse to a single
    evaluation against the mean weight path.
    """
    M = states[0].shape[0]
    if spec.state_free and spec.sample_free:
        kv = np.asarray(spec(node, _state_of(states, 0), law, None), dtype=float)
        return np.full(M, float(kv @ mean_w) * dt)
    if spec.state_free:
        total = 0.0
        state0 = _state_of(states, 0)
        Xm, Ym, Um = materialize_paths(law)
        for m in tilde_idx:
            smp = PathSample(x=Xm[m], y=None if Ym is None else Ym[m], u=Um)
            kv = np.asarray(spec(node, state0, law, smp), dtype=float)
            total += float(kv @ (mean_w if W is None else W[m]))
        return np.full(M, total / len(tilde_idx) * dt)
    if spec.sample_free:
        out = np.empty(M)
        for j in range(M):
            kv = np.asarray(spec(node, _state_of(states, j), law, None), dtype=float)
            out[j] = float(kv @ mean_w) * dt
        return out
    Xm, Ym, Um = materialize_paths(law)
    out = np.empty(M)
    for j in range(M):
        state = _state_of(states, j)
        total = 0.0
        for m in tilde_idx:
            smp = PathSample(x=Xm[m], y=None if Ym is None else Ym[m], u=Um)
            kv = np.asarray(spec(node, state, law, smp), dtype=float)
            total += float(kv @ (mean_w if W is None else W[m]))
        out[j] = total / len(tilde_idx) * dt
    return out


def _weight_matrix(paths, comp, node, N, v):
    """Component weight paths for the variational law pairing at `node`.

    X-components read the path stopped at the coefficient node (diffusion
    slot) or plain (driver/terminal slots use node=None); Y-components read
    the path floored at the node; the control component is the direction.
    Returns (W or None, mean_w).
    """
    r = np.arange(N)
    if comp == "u":
        return None, v
    dpaths, truncate = paths
    if node is None:
        idx = r
    elif truncate == "stop":
        idx = np.minimum(r, node)
    else:
        idx = np.maximum(r, node)
    W = dpaths[:, idx]
    return W, W.mean(axis=0)


def solve_variational(coeffs, solved, direction, params=None):
    """Directional derivative of the solved system along `direction`.

    The forward sensitivity is explicit; the backward sensitivity
    differentiates the cached regressions (design-matrix derivative plus
    target derivative) and resolves the anticipated Y-law pairing by
    iterating full backward sweeps against the previous sweep's values
    until the relative sup change drops below the tolerance.

    The map direction -> result is exactly linear: scaling the direction
    scales (dX, dY, dZ) bitwise.
    """
    params = params or SensitivityParams()
    base = _Base(coeffs, solved)
    ens, cache, grid = base.ensemble, base.cache, base.grid
    M, N, dt = ens.M, grid.N, grid.dt
    v = _direction_vector(direction, N)
    tilde_idx = np.arange(M)  # law pairings always use the full ensemble

    k_sigma_1 = coeffs.kernel("sigma_1")
    k_sigma_2 = coeffs.kernel("sigma_2")
    k_f_1 = coeffs.kernel("f_1")
    k_f_2 = coeffs.kernel("f_2")
    k_f_3 = coeffs.kernel("f_3")
    k_Phi_1 = coeffs.kernel("Phi_1")
    k_Phi_2 = coeffs.kernel("Phi_2")

    # forward sweep -----------------------------------------------------------
    dX = np.zeros((M, N + 1))
    for i in range(N):
        law_term = np.zeros(M)
        if k_sigma_1 is not None or k_sigma_2 is not None:
            law = coeffs.sigma_law(ens, i)
            states = _slot_states("sigma", i, base)
            if k_sigma_1 is not None:
                W, mean_w = _weight_matrix((dX, "stop"), "x", i, N, v)
                law_term += _pair_direction(k_sigma_1, i, states, law,
                                            W, mean_w, dt, tilde_idx)
            if k_sigma_2 is not None:
                W, mean_w = _weight_matrix(None, "u", i, N, v)
                law_term += _pair_direction(k_sigma_2, i, states, law,
                                            W, mean_w, dt, tilde_idx)
        diff = base.partials.sigma_x[:, i] * dX[:, i] + law_term
        dX[:, i + 1] = dX[:, i] + diff * ens.noise.dB[:, i]

    # running-integral feature derivative (for the design derivative)
    dRI = np.zeros((M, N + 1))
    if cache.basis.running_integral:
        np.cumsum(dX[:, :-1] * dt, axis=1, out=dRI[:, 1:])

    # terminal sensitivity ----------------------------------------------------
    dY_T = base.partials.Phi_x * dX[:, N]
    if k_Phi_1 is not None or k_Phi_2 is not None:
        t_law = coeffs.terminal_law(ens)
        states = _slot_states("Phi", None, base)
        if k_Phi_1 is not None:
            W, mean_w = _weight_matrix((dX, "stop"), "x", None, N, v)
            dY_T = dY_T + _pair_direction(k_Phi_1, None, states, t_law,
                                          W, mean_w, dt, tilde_idx)
        if k_Phi_2 is not None:
            W, mean_w = _weight_matrix(None, "u", None, N, v)
            dY_T = dY_T + _pair_direction(k_Phi_2, None, states, t_law,
                                          W, mean_w, dt, tilde_idx)

    # backward sweeps with anticipation --------------------------------------
    # Everything that does not read the unknown dY is hoisted out of the
    # anticipation loop: the design derivatives (functions of dX only) and
    # the X/control law pairings of the driver.
    dAs = []
    driver_static = (base.partials.f_x * dX[:, :N]).copy()
    for i in range(N):
        step = cache.steps[i]
        dcols = derivative_columns(ens.X, dX, cache.features, dRI,
                                   cache.basis, i,
                                   run_arg=cache.features.running_argmax)
        dAs.append(step.design.derivative_design(dcols))
        if k_f_1 is not None or k_f_3 is not None:
            law = coeffs.f_law(ens, i)
            states = _slot_states("f", i, base)
            if k_f_1 is not None:
                W, mean_w = _weight_matrix((dX, "stop"), "x", None, N, v)
                driver_static[:, i] += _pair_direction(k_f_1, i, states, law,
                                                       W, mean_w, dt, tilde_idx)
            if k_f_3 is not None:
                W, mean_w = _weight_matrix(None, "u", i, N, v)
                driver_static[:, i] += _pair_direction(k_f_3, i, states, law,
                                                       W, mean_w, dt, tilde_idx)

    needs_iteration = k_f_2 is not None
    dY_guess = np.zeros((M, N + 1))
    dY = np.zeros((M, N + 1))
    dZ = np.zeros((M, N))
    converged = not needs_iteration
    iterations = 0
    max_outer = params.max_iterations if needs_iteration else 1
    for outer in range(max_outer):
        iterations = outer + 1
        dY = np.empty((M, N + 1))
        dZ = np.empty((M, N))
        dY[:, N] = dY_T
        for i in range(N - 1, -1, -1):
            step = cache.steps[i]
            dYhat = step.design.dfit(step.fit_y, dAs[i], dY[:, i + 1])
            dZ[:, i] = step.design.dfit(
                step.fit_z, dAs[i], (dY[:, i + 1] - dYhat) * ens.noise.dB[:, i] / dt)
            driver = (driver_static[:, i]
                      + base.partials.f_y[:, i] * dYhat
                      + base.partials.f_z[:, i] * dZ[:, i])
            if k_f_2 is not None:
                law = coeffs.f_law(ens, i)
                states = _slot_states("f", i, base)
                W, mean_w = _weight_matrix((dY_guess, "floor"), "y", i, N, v)
                driver = driver + _pair_direction(k_f_2, i, states, law,
                                                  W, mean_w, dt, tilde_idx)
            dY[:, i] = dYhat + driver * dt
        if not needs_iteration:
            converged = True
            break
        change = float(np.max(np.abs(dY - dY_guess)))
        scale = max(float(np.max(np.abs(dY))), _TINY)
        dY_guess = dY
        if change <= params.tolerance * scale:
            converged = True
            break

    return VariationalResult(direction=v, dX=dX, dY=dY, dZ=dZ,
                             converged=converged, iterations=iterations)


# ---------------------------------------------------------------------------
# difference-quotient comparison


@dataclass(frozen=True)
class QuotientRow:
    """Per-rho quotient errors: sup-norm for X and Y, RMS for Z."""

    rho: float
    err_x: float
    err_y: float
    err_z: float


@dataclass(frozen=True)
class QuotientTable:
    rows: tuple
    slopes: dict
    variational: VariationalResult

    def as_columns(self):
        rhos = [r.rho for r in self.rows]
        return {"rho": rhos,
                "err_x": [r.err_x for r in self.rows],
                "err_y": [r.err_y for r in self.rows],
                "err_z": [r.err_z for r in self.rows]}


def _loglog_slope(rhos, errs):
    """Fitted log-log slope, or None when the errors sit at machine floor.

    A component whose quotient matches the derivative to ~1e-10 across all
    step sizes has no first-order error term to rate-fit (the decay bound
    holds trivially); reporting a slope there would be fitting roundoff.
    """
    errs = np.asarray(errs)
    if np.any(errs <= 0.0) or np.max(errs) < 1e-10:
        return None
    coeff = np.polyfit(np.log(rhos), np.log(errs), 1)
    return float(coeff[0])


def difference_quotient_check(coeffs, noise, control, x0, direction,
                              rhos=(1e-1, 1e-2, 1e-3),
                              picard_params=None, params=None):
    """Compare primal difference quotients against the variational solve.

    For each rho the full coupled system is re-solved with the control
    shifted by rho * direction under the same noise, the quotient
    (solution(u + rho v) - solution(u)) / rho is formed, and the sup-norm
    distance to the variational derivative is tabulated per component.
    First-order convergence (log-log slope near 1) is the expected signature
    since the variational system is the exact derivative of the discrete map.
    """
    from .coefficients import ControlPath
    from .solver import PicardParams, picard_solve

    picard_params = picard_params or PicardParams(tolerance=1e-13, max_iterations=60)
    base = picard_solve(coeffs, noise, control, x0, params=picard_params)
    N = noise.grid.N
    v = _direction_vector(direction, N)
    var = solve_variational(coeffs, base, v, params=params)

    base_u = control.values if control is not None else np.zeros(N)
    rows = []
    for rho in rhos:
        if rho <= 0.0:
            raise InvalidArgumentError("quotient step sizes must be positive")
        shifted = ControlPath(base_u + rho * v)
        pert = picard_solve(coeffs, noise, shifted, x0, params=picard_params)
        qx = (pert.ensemble.X - base.ensemble.X) / rho
        qy = (pert.ensemble.Y - base.ensemble.Y) / rho
        qz = (pert.ensemble.Z - base.ensemble.Z) / rho
        rows.append(QuotientRow(
            rho=float(rho),
            err_x=float(np.max(np.abs(qx - var.dX))),
            err_y=float(np.max(np.abs(qy - var.dY))),
            err_z=float(np.sqrt(np.mean((qz - var.dZ) ** 2)))))
    rhos_arr = [r.rho for r in rows]
    slopes = {
        "x": _loglog_slope(rhos_arr, [r.err_x for r in rows]),
        "y": _loglog_slope(rhos_arr, [r.err_y for r in rows]),
        "z": _loglog_slope(rhos_arr, [r.err_z for r in rows]),
    }
    return QuotientTable(rows=tuple(rows), slopes=slopes, variational=var)


# ---------------------------------------------------------------------------
# starred operators


@dataclass(frozen=True)
class StarredPaths:
    """Conditional-expectation paths of the kernel pairings, on left nodes.

    Weight-dependent entries are present only when the corresponding weight
    was supplied to compute_starred; `skipped` names the slots whose kernels
    exist but whose weights were missing (their arrays are zero).
    """

    sigma_1_k: np.ndarray
    sigma_2_k: np.ndarray
    f_1_p: np.ndarray
    f_3_p: np.ndarray
    L_1: np.ndarray
    L_2: np.ndarray
    L_3: np.ndarray
    phi_1: np.ndarray
    phi_2: np.ndarray
    phi_3: np.ndarray
    Phi_1_pT: np.ndarray
    Phi_2_pT: np.ndarray
    skipped: tuple = ()


def _kernel_row(spec, kind, coeffs, ens, base, r, law_cache):
    """Representative kernel vector at coefficient node r (fast path)."""
    law = law_cache.get((kind, r))
    if law is None:
        law = _slot_law(coeffs, ens, kind, r)
        law_cache[(kind, r)] = law
    states = _slot_states(kind, r, base)
    node = None if kind in ("Phi", "phi") else r
    return np.asarray(spec(node, _state_of(states, 0), law, None), dtype=float), law


def _fast_kernel_matrix(spec, kind, coeffs, base, law_cache):
    """K[r, t] = kernel with coefficient node r, read at left node t."""
    ens = base.ensemble
    N = ens.grid.N
    K = np.empty((N, N))
    for r in range(N):
        K[r], _ = _kernel_row(spec, kind, coeffs, ens, base, r, law_cache)
    return K


def _project_on_designs(values, base):
    """Regress each left-node column on that node's cached design."""
    out = np.empty_like(values)
    for i in range(values.shape[1]):
        out[:, i] = base.cache.steps[i].design.fit(values[:, i]).fitted
    return out


def _slow_starred(spec, kind, coeffs, base, tilde_idx, weight, mode):
    """Triple-loop starred assembly for structure-dependent kernels.

    mode: 'tail_exchange' ([t,T] with exchange term, diffusion X slot),
    'full' ([0,T] integrals), 'head_exchange' ([0,t] with exchange, driver Y
    slot), 'terminal' (terminal-sample average).  weight is (M, N) for time
    slots, (M,) for terminal ones, or None (unit weight).  The kernel's
    classical arguments come from the tilde particle m at the anchoring node;
    its sample slot reads the real particle j through that node's law view.
    """
    ens = base.ensemble
    M, N, dt = ens.M, ens.grid.N, ens.grid.dt
    out = np.zeros((M, N))
    cache = {}

    def law_and_samples(r):
        if r not in cache:
            law = _slot_law(coeffs, ens, kind, 0 if r is None else r)
            cache[r] = (law, materialize_paths(law))
        return cache[r]

    def sample_of(paths, j):
        Xs, Ys, Us = paths
        return PathSample(x=Xs[j], y=None if Ys is None else Ys[j], u=Us)

    if mode == "terminal":
        law = _slot_law(coeffs, ens, kind, None)
        paths = materialize_paths(law)
        states = _slot_states(kind, None, base)
        for j in range(M):
            smp = sample_of(paths, j)
            acc = np.zeros(N)
            for m in tilde_idx:
                kv = np.asarray(spec(None, _state_of(states, m), law, smp), dtype=float)
                w = 1.0 if weight is None else float(weight[m])
                acc += kv * w
            out[j] = acc / len(tilde_idx)
        return out

    for r in range(N):
        law, paths = law_and_samples(r)
        states = _slot_states(kind, r, base)
        for j in range(M):
            smp = sample_of(paths, j)
            for m in tilde_idx:
                kv = np.asarray(spec(r, _state_of(states, m), law, smp), dtype=float)
                w = 1.0 if weight is None else float(weight[m, r])
                if mode == "tail_exchange":
                    out[j, :r + 1] += kv[:r + 1] * w
                elif mode == "full":
                    out[j, :] += kv * w
                elif mode == "head_exchange":
                    out[j, r + 1:] += kv[r + 1:] * w
                else:
                    raise InvalidArgumentError(f"unknown starred mode {mode!r}")
    if mode in ("tail_exchange", "head_exchange"):
        # exchange term: kernel anchored at the evaluation node t, read at the
        # integration nodes r, weighted by the tilde particle's value at t
        for t in range(N):
            law, paths = law_and_samples(t)
            states = _slot_states(kind, t, base)
            lo, hi = (t, N) if mode == "tail_exchange" else (0, t)
            for j in range(M):
                smp = sample_of(paths, j)
                for m in tilde_idx:
                    kv = np.asarray(spec(t, _state_of(states, m), law, smp), dtype=float)
                    wt = 1.0 if weight is None else float(weight[m, t])
                    out[j, t] += float(np.sum(kv[lo:hi])) * wt
    return out * (dt / len(tilde_idx))


def _starred_slot(spec, kind, coeffs, base, tilde_idx, weight, mode):
    """One starred path (M, N): fast path for structured kernels, then the
    conditional-expectation projection on the cached designs."""
    ens = base.ensemble
    M, N, dt = ens.M, ens.grid.N, ens.grid.dt
    if spec.state_free and spec.sample_free:
        law_cache = {}
        K = _fast_kernel_matrix(spec, kind, coeffs, base, law_cache) \
            if kind not in ("Phi", "phi") else None
        if mode == "terminal":
            law = _slot_law(coeffs, ens, kind, None)
            states = _slot_states(kind, None, base)
            kv = np.asarray(spec(None, _state_of(states, 0), law, None), dtype=float)
            wbar = 1.0 if weight is None else float(np.mean(weight[tilde_idx]))
            return np.broadcast_to(kv * wbar, (M, N)).copy()
        wbar = np.ones(N) if weight is None else weight[tilde_idx].mean(axis=0)
        vals = np.zeros(N)
        if mode == "tail_exchange":
            for t in range(N):
                vals[t] = float(K[t:, t] @ wbar[t:]) + float(np.sum(K[t, t:])) * wbar[t]
        elif mode == "full":
            vals = K.T @ wbar
        elif mode == "head_exchange":
            for t in range(N):
                vals[t] = float(K[:t, t] @ wbar[:t]) + float(np.sum(K[t, :t])) * wbar[t]
        else:
            raise InvalidArgumentError(f"unknown starred mode {mode!r}")
        vals = vals * dt
        # constant across particles: the conditional expectation is itself
        return np.broadcast_to(vals, (M, N)).copy()
    values = _slow_starred(spec, kind, coeffs, base, tilde_idx, weight, mode)
    return _project_on_designs(values, base)


def compute_starred(coeffs, solved, p=None, k=None, params=None):
    """Assemble the starred conditional-expectation paths on left nodes.

    p is the (M, N+1) first adjoint (weights its left-node values and p(T));
    k the (M, N) second adjoint's martingale density.  Slots whose kernel
    exists but whose weight argument is missing are returned as zeros and
    listed in `skipped`.
    """
    base = solved if isinstance(solved, _Base) else _Base(coeffs, solved)
    ens = base.ensemble
    M, N = ens.M, ens.grid.N
    params = params or SensitivityParams()
    tilde_idx = _tilde_indices(M, params.m_tilde)

    out = {name: np.zeros((M, N)) for name in
           ("sigma_1_k", "sigma_2_k", "f_1_p", "f_3_p", "L_1", "L_2", "L_3",
            "phi_1", "phi_2", "phi_3", "Phi_1_pT", "Phi_2_pT")}
    skipped = []

    plan = (
        ("sigma_1", "sigma_1_k", "tail_exchange", "k"),
        ("sigma_2", "sigma_2_k", "full", "k"),
        ("f_1", "f_1_p", "full", "p"),
        ("f_3", "f_3_p", "full", "p"),
        ("L_1", "L_1", "full", None),
        ("L_2", "L_2", "full", None),
        ("L_3", "L_3", "full", None),
        ("phi_1", "phi_1", "terminal", None),
        ("phi_2", "phi_2", "terminal", None),
        ("phi_3", "phi_3", "terminal", None),
        ("Phi_1", "Phi_1_pT", "terminal", "pT"),
        ("Phi_2", "Phi_2_pT", "terminal", "pT"),
    )
    for slot, name, mode, weight_kind in plan:
        spec = coeffs.kernel(slot)
        if spec is None:
            continue
        if weight_kind == "k":
            if k is None:
                skipped.append(name)
                continue
            weight = np.asarray(k, dtype=float)
        elif weight_kind == "p":
            if p is None:
                skipped.append(name)
                continue
            weight = np.asarray(p, dtype=float)[:, :N]
        elif weight_kind == "pT":
            if p is None:
                skipped.append(name)
                continue
            weight = np.asarray(p, dtype=float)[:, N]
        else:
            weight = None
        kind = _SLOT_KIND[slot][0]
        out[name] = _starred_slot(spec, kind, coeffs, base, tilde_idx, weight, mode)
    return StarredPaths(skipped=tuple(skipped), **out)


# ---------------------------------------------------------------------------
# first adjoint: forward equation for p


@dataclass(frozen=True)
class PAdjointResult:
    """First adjoint path p (zero at time 0) and its assembled delay term."""

    p: np.ndarray          # (M, N+1)
    f_star_2: np.ndarray   # (M, N): the Y-slot pairing entering p's own drift
    starred: StarredPaths  # the weight-free slots used in the drift


def _fstar2_node_slow(spec, coeffs, base, tilde_idx, p, i):
    """Y-slot delay pairing at node i for a structure-dependent kernel.

    Pairs kernels anchored at nodes r < i against the tilde p at r, plus the
    exchange term anchored at i read at r < i against the tilde p at i.
    """
    ens = base.ensemble
    M, dt = ens.M, ens.grid.dt
    out = np.zeros(M)
    if i == 0:
        return out
    for r in range(i):
        law = _slot_law(coeffs, ens, "f", r)
        paths = materialize_paths(law)
        states = _slot_states("f", r, base)
        for j in range(M):
            Xs, Ys, Us = paths
            smp = PathSample(x=Xs[j], y=None if Ys is None else Ys[j], u=Us)
            for m in tilde_idx:
                kv = np.asarray(spec(r, _state_of(states, m), law, smp), dtype=float)
                out[j] += kv[i] * float(p[m, r])
    law = _slot_law(coeffs, ens, "f", i)
    paths = materialize_paths(law)
    states = _slot_states("f", i, base)
    for j in range(M):
        Xs, Ys, Us = paths
        smp = PathSample(x=Xs[j], y=None if Ys is None else Ys[j], u=Us)
        for m in tilde_idx:
            kv = np.asarray(spec(i, _state_of(states, m), law, smp), dtype=float)
            out[j] += float(np.sum(kv[:i])) * float(p[m, i])
    return out * (dt / len(tilde_idx))


def solve_adjoint_p(coeffs, solved, params=None, starred_static=None):
    """Integrate the first adjoint forward with explicit Euler steps.

    The drift couples p to the driver's value partial and to three law
    pairings: its own delay term (anchored on [0, t], so it is assembled
    incrementally inside the sweep) and the weight-free running/terminal
    cost Y-slot pairings.  The diffusion couples p to the driver's
    martingale partial and the running cost's martingale partial.
    """
    params = params or SensitivityParams()
    base = solved if isinstance(solved, _Base) else _Base(coeffs, solved)
    ens, grid = base.ensemble, base.grid
    M, N, dt = ens.M, grid.N, grid.dt
    tilde_idx = _tilde_indices(M, params.m_tilde)
    if starred_static is None:
        starred_static = compute_starred(coeffs, base, params=params)
    pd = base.partials

    spec2 = coeffs.kernel("f_2")
    fast2 = spec2 is not None and spec2.state_free and spec2.sample_free
    K2 = _fast_kernel_matrix(spec2, "f", coeffs, base, {}) if fast2 else None

    p = np.zeros((M, N + 1))
    f_star_2 = np.zeros((M, N))
    pbar = np.zeros(N + 1)
    for i in range(N):
        pbar[i] = float(p[tilde_idx, i].mean())
        if spec2 is not None:
            if fast2:
                val = (float(K2[:i, i] @ pbar[:i])
                       + float(np.sum(K2[i, :i])) * pbar[i]) * dt
                f_star_2[:, i] = val
            else:
                values = _fstar2_node_slow(spec2, coeffs, base, tilde_idx, p, i)
                f_star_2[:, i] = base.cache.steps[i].design.fit(values).fitted
        drift = (pd.f_y[:, i] * p[:, i] + f_star_2[:, i]
                 - pd.L_y[:, i] - starred_static.L_2[:, i] - starred_static.phi_2[:, i])
        diffu = pd.f_z[:, i] * p[:, i] - pd.L_z[:, i]
        p[:, i + 1] = p[:, i] + drift * dt + diffu * ens.noise.dB[:, i]
    return PAdjointResult(p=p, f_star_2=f_star_2, starred=starred_static)


# ---------------------------------------------------------------------------
# second adjoint: backward equation for (q, k)


@dataclass(frozen=True)
class QKAdjointResult:
    """Second adjoint pair from the regression backward solve."""

    q: np.ndarray   # (M, N+1)
    k: np.ndarray   # (M, N)
    iterations: int
    converged: bool
    terminal_consistent: bool


def solve_adjoint_qk(coeffs, solved, p, params=None, starred_p=None):
    """Solve the second adjoint backward equation by regression.

    Per sweep this is the same scheme as the primal backward pass: project
    q(i+1) on the node design for the conditional mean, regress the scaled
    martingale increment for k, then step with the state-derivative drift.
    When the diffusion carries an X-law kernel, its pairing with k is
    anticipated: sweeps repeat against the previous k (relaxed by the
    damping factor) until the relative sup change is below tolerance.
    Without such a kernel one sweep is exact and no iteration happens.
    """
    params = params or SensitivityParams()
    base = solved if isinstance(solved, _Base) else _Base(coeffs, solved)
    ens, grid = base.ensemble, base.grid
    M, N, dt = ens.M, grid.N, grid.dt
    p = np.asarray(p, dtype=float)
    if p.shape != (M, N + 1):
        raise InvalidArgumentError(f"p must have shape ({M}, {N + 1}), got {p.shape}")
    tilde_idx = _tilde_indices(M, params.m_tilde)
    if starred_p is None:
        starred_p = compute_starred(coeffs, base, p=p, params=params)
    pd = base.partials

    q_T = pd.phi_x - pd.Phi_x * p[:, N]
    # state-derivative pieces that do not involve k
    Dx_static = (-pd.f_x * p[:, :N] + pd.L_x
                 - starred_p.f_1_p + starred_p.L_1 + starred_p.phi_1
                 - starred_p.Phi_1_pT)

    spec1 = coeffs.kernel("sigma_1")
    has_sigma1 = spec1 is not None
    k_cur = np.zeros((M, N))
    q = np.zeros((M, N + 1))
    k_new = np.zeros((M, N))
    converged = not has_sigma1
    iterations = 0
    max_outer = params.max_iterations if has_sigma1 else 1
    for outer in range(max_outer):
        iterations = outer + 1
        sstar1 = (_starred_slot(spec1, "sigma", coeffs, base, tilde_idx,
                                k_cur, "tail_exchange")
                  if has_sigma1 else None)
        q = np.empty((M, N + 1))
        k_new = np.empty((M, N))
        q[:, N] = q_T
        for i in range(N - 1, -1, -1):
            design = base.cache.steps[i].design
            fit_q = design.fit(q[:, i + 1])
            k_new[:, i] = design.fit(fit_q.resid * ens.noise.dB[:, i] / dt).fitted
            Dx = Dx_static[:, i] + pd.sigma_x[:, i] * k_new[:, i]
            if sstar1 is not None:
                Dx = Dx + sstar1[:, i]
            q[:, i] = fit_q.fitted + Dx * dt
        if not has_sigma1:
            converged = True
            break
        change = float(np.max(np.abs(k_new - k_cur)))
        scale = max(float(np.max(np.abs(k_new))), _TINY)
        if change <= params.tolerance * scale:
            k_cur = k_new
            converged = True
            break
        k_cur = params.damping * k_new + (1.0 - params.damping) * k_cur
    terminal_consistent = bool(np.array_equal(q[:, N], q_T))
    return QKAdjointResult(q=q, k=k_new, iterations=iterations,
                           converged=converged,
                           terminal_consistent=terminal_consistent)


# ---------------------------------------------------------------------------
# orchestration and the duality identity


@dataclass(frozen=True)
class AdjointState:
    """Both adjoints plus the starred paths weighted by them."""

    p: np.ndarray
    q: np.ndarray
    k: np.ndarray
    f_star_2: np.ndarray
    starred: StarredPaths
    iterations: int
    converged: bool
    terminal_consistent: bool


def solve_adjoint(coeffs, solved, params=None):
    """Solve both adjoint equations and collect fully-weighted starred paths."""
    params = params or SensitivityParams()
    base = _Base(coeffs, solved)
    pres = solve_adjoint_p(coeffs, base, params=params)
    starred_p = compute_starred(coeffs, base, p=pres.p, params=params)
    qk = solve_adjoint_qk(coeffs, base, pres.p, params=params, starred_p=starred_p)
    starred_full = compute_starred(coeffs, base, p=pres.p, k=qk.k, params=params)
    return AdjointState(p=pres.p, q=qk.q, k=qk.k, f_star_2=pres.f_star_2,
                        starred=starred_full, iterations=qk.iterations,
                        converged=qk.converged,
                        terminal_consistent=qk.terminal_consistent)


@dataclass(frozen=True)
class DualityReport:
    """Both sides of the variational/adjoint bilinear identity."""

    lhs: float
    rhs: float
    residual: float
    terms: dict


def duality_check(coeffs, solved, direction, variational=None, adjoint=None,
                  params=None):
    """Evaluate the bilinear identity tying the sensitivities to the adjoints.

    lhs pairs the terminal sensitivities with the adjoints; rhs accumulates
    the running pairings of (dX, dY, dZ) with cost derivatives and the
    direction with the control-slot starred paths.  The reported residual is
    |lhs - rhs| / (1 + |lhs|); for problems whose coefficients carry no law
    kernels and no state-dependence in the diffusion both sides vanish and
    the residual is exactly zero.
    """
    params = params or SensitivityParams()
    base = _Base(coeffs, solved)
    ens, grid = base.ensemble, base.grid
    N, dt = grid.N, grid.dt
    v = _direction_vector(direction, N)
    if variational is None:
        variational = solve_variational(coeffs, solved, v, params=params)
    if adjoint is None:
        adjoint = solve_adjoint(coeffs, solved, params=params)
    st = adjoint.starred
    if st.skipped:
        raise InvalidArgumentError(
            f"starred paths incomplete (missing weights for {st.skipped})")
    pd = base.partials
    dX, dY, dZ = variational.dX, variational.dY, variational.dZ

    lhs = float(np.mean(dX[:, N] * adjoint.q[:, N] + dY[:, N] * adjoint.p[:, N]))
    wx = st.Phi_1_pT - pd.L_x - st.L_1 - st.phi_1
    t_state = float(np.mean(np.sum(dX[:, :N] * wx, axis=1))) * dt
    wy = pd.L_y + st.L_2 + st.phi_2
    t_value = -float(np.mean(np.sum(dY[:, :N] * wy, axis=1))) * dt
    t_mart = -float(np.mean(np.sum(dZ * pd.L_z, axis=1))) * dt
    wu = (st.sigma_2_k - st.f_3_p).mean(axis=0)
    t_dir = float(np.sum(v * wu)) * dt
    rhs = t_state + t_value + t_mart + t_dir
    residual = abs(lhs - rhs) / (1.0 + abs(lhs))
    return DualityReport(lhs=lhs, rhs=rhs, residual=residual,
                         terms={"state": t_state, "value": t_value,
                                "martingale": t_mart, "direction": t_dir})
