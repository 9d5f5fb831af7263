"""Tests for the variational system, starred operators, adjoints and duality.

The starred operators are checked against a brute-force triple-loop oracle
(particle x tilde-particle x quadrature node, then an exact least-squares
projection) on a small ensemble with kernels that depend on both the
anchoring state and the sample path, so every branch of the double average
is exercised.  The variational solve is checked through its defining
property: it is the exact directional derivative of the discrete solver, so
difference quotients converge to it at first order with no error floor.
"""

import dataclasses

import numpy as np
import pytest

from mfbsde.adjoint import (
    SensitivityParams,
    compute_starred,
    difference_quotient_check,
    duality_check,
    solve_adjoint,
    solve_adjoint_p,
    solve_adjoint_qk,
    solve_variational,
)
from mfbsde.coefficients import (
    CoefficientSet,
    ControlPath,
    KernelSpec,
    builtin_problem,
)
from mfbsde.errors import InvalidArgumentError
from mfbsde.grids import make_time_grid, simulate_noise
from mfbsde.solver import BasisSpec, PicardParams, picard_solve

SEED = 20260818
M = 256
N = 8
T = 1.0
X0 = 0.5
TOL = PicardParams(tolerance=1e-13, max_iterations=60)


def small_setup(m=M, n=N, t=T, seed=SEED):
    grid = make_time_grid(t, n)
    noise = simulate_noise(grid, M=m, seed=seed)
    control = ControlPath(0.3 * np.ones(n))
    return grid, noise, control


def solved(name, noise, control, **params):
    coeffs = builtin_problem(name, **params)
    return coeffs, picard_solve(coeffs, noise, control, x0=X0, params=TOL)


# ---------------------------------------------------------------------------
# variational solve


def test_variational_zero_direction_is_exactly_zero():
    _, noise, control = small_setup()
    coeffs, sol = solved("coupled_sigma", noise, control)
    var = solve_variational(coeffs, sol, np.zeros(N))
    assert var.converged
    assert np.all(var.dX == 0.0), "zero direction must give bitwise-zero dX"
    assert np.all(var.dY == 0.0), "zero direction must give bitwise-zero dY"
    assert np.all(var.dZ == 0.0), "zero direction must give bitwise-zero dZ"


def test_variational_doubling_is_bitwise():
    _, noise, control = small_setup()
    coeffs, sol = solved("coupled_sigma", noise, control)
    v = np.linspace(0.5, 1.0, N)
    a = solve_variational(coeffs, sol, v)
    b = solve_variational(coeffs, sol, 2.0 * v)
    assert np.array_equal(b.dX, 2.0 * a.dX), "dX must double exactly"
    assert np.array_equal(b.dY, 2.0 * a.dY), "dY must double exactly"
    assert np.array_equal(b.dZ, 2.0 * a.dZ), "dZ must double exactly"


def test_variational_additivity():
    _, noise, control = small_setup()
    coeffs, sol = solved("coupled_sigma", noise, control)
    v1 = np.linspace(0.5, 1.0, N)
    v2 = np.cos(np.arange(N, dtype=float))
    a = solve_variational(coeffs, sol, v1)
    b = solve_variational(coeffs, sol, v2)
    c = solve_variational(coeffs, sol, v1 + v2)
    for name in ("dX", "dY", "dZ"):
        lhs = getattr(c, name)
        rhs = getattr(a, name) + getattr(b, name)
        scale = max(np.max(np.abs(lhs)), 1e-30)
        err = np.max(np.abs(lhs - rhs)) / scale
        assert err <= 1e-10, f"additivity violated for {name}: rel err {err:.2e}"


def test_variational_quadratic_family_states_vanish():
    # no diffusion/driver kernels and sigma_x = 0: the state sensitivities
    # are identically zero, and the primal states do not react to u at all
    _, noise, control = small_setup()
    coeffs, sol = solved("quadratic_control", noise, control)
    v = np.linspace(0.5, 1.0, N)
    var = solve_variational(coeffs, sol, v)
    assert var.iterations == 1, "no anticipation expected without a driver Y-kernel"
    assert np.all(var.dX == 0.0) and np.all(var.dY == 0.0) and np.all(var.dZ == 0.0)
    rho = 1e-4
    pert = picard_solve(coeffs, noise, ControlPath(control.values + rho * v),
                        x0=X0, params=TOL)
    assert np.array_equal(pert.ensemble.X, sol.ensemble.X), \
        "control must not move X in the quadratic family"
    assert np.array_equal(pert.ensemble.Y, sol.ensemble.Y), \
        "control must not move Y in the quadratic family"


def test_variational_anticipation_iterates_on_driver_kernel():
    _, noise, control = small_setup()
    coeffs, sol = solved("coupled_sigma", noise, control)
    var = solve_variational(coeffs, sol, np.ones(N))
    assert var.converged, "anticipation loop should converge"
    assert var.iterations > 1, "driver Y-kernel must force anticipation sweeps"


def test_variational_tiny_direction_at_unit_rho():
    # a direction of norm 1e-6 and rho = 1: the quotient itself is close to
    # the derivative because the remainder is quadratic in the step
    _, noise, control = small_setup()
    coeffs, sol = solved("coupled_sigma", noise, control)
    w = 1e-6 * np.linspace(0.5, 1.0, N)
    var = solve_variational(coeffs, sol, w)
    pert = picard_solve(coeffs, noise, ControlPath(control.values + w),
                        x0=X0, params=TOL)
    for name, base_arr, pert_arr, darr in (
            ("Y", sol.ensemble.Y, pert.ensemble.Y, var.dY),
            ("Z", sol.ensemble.Z, pert.ensemble.Z, var.dZ)):
        quot = pert_arr - base_arr
        scale = np.max(np.abs(darr))
        assert scale > 0.0, f"expected a nonzero {name}-response"
        rel = np.max(np.abs(quot - darr)) / scale
        assert rel <= 1e-4, f"{name} quotient at unit rho off by {rel:.2e} relative"


# ---------------------------------------------------------------------------
# difference quotients


def test_quotient_table_slopes_on_coupled_family():
    _, noise, control = small_setup()
    coeffs = builtin_problem("coupled_sigma")
    v = np.linspace(0.5, 1.0, N)
    table = difference_quotient_check(coeffs, noise, control, X0, v)
    errs_y = [row.err_y for row in table.rows]
    errs_z = [row.err_z for row in table.rows]
    assert errs_y[0] > errs_y[1] > errs_y[2], f"Y errors must decrease: {errs_y}"
    assert errs_z[0] > errs_z[1] > errs_z[2], f"Z errors must decrease: {errs_z}"
    for comp in ("y", "z"):
        slope = table.slopes[comp]
        assert slope is not None and 0.8 <= slope <= 1.2, \
            f"{comp} slope {slope} outside [0.8, 1.2]"
    # the default coupled family has an affine control-to-X map, so the X
    # quotient is exact and its error sits at machine floor
    assert max(row.err_x for row in table.rows) <= 1e-10
    assert table.slopes["x"] is None


def test_quotient_zero_direction_all_errors_zero():
    _, noise, control = small_setup()
    coeffs = builtin_problem("coupled_sigma")
    table = difference_quotient_check(coeffs, noise, control, X0, np.zeros(N))
    for row in table.rows:
        assert row.err_x == 0.0 and row.err_y == 0.0 and row.err_z == 0.0, \
            f"zero direction must give zero errors, got {row}"


def test_quotient_rejects_bad_rho():
    _, noise, control = small_setup(m=32, n=4)
    coeffs = builtin_problem("coupled_sigma")
    with pytest.raises(InvalidArgumentError):
        difference_quotient_check(coeffs, noise, control, X0, np.ones(4),
                                  rhos=(0.1, 0.0))


# ---------------------------------------------------------------------------
# starred operators: brute-force oracle on a state/sample-dependent instance

ORACLE_M = 16
ORACLE_N = 4


def _profile(n):
    return np.linspace(0.3, 0.8, n)


def _oracle_kernels(n):
    """Kernels reading the anchoring state and the sample path, so neither
    structure flag applies and the full double loop runs."""
    base = _profile(n)

    def sigma_1(node, state, law, sample):
        return (0.4 + 0.2 * state[0]) * (1.0 + 0.1 * sample.x[2]) * base

    def sigma_2(node, state, law, sample):
        return (0.3 - 0.1 * state[0]) * (1.0 + 0.05 * sample.x[1]) * base

    def f_1(node, state, law, sample):
        return (0.2 + 0.1 * state[1]) * (1.0 - 0.1 * sample.y[1]) * base

    def f_3(node, state, law, sample):
        return (0.1 + 0.2 * state[0] * state[2]) * (1.0 + 0.1 * sample.x[3]) * base

    def L_1(node, state, law, sample):
        return (0.5 + 0.1 * state[1]) * (1.0 + 0.2 * sample.u[0]) * base

    def phi_1(node, state, law, sample):
        return (0.6 + 0.1 * state[0]) * (1.0 - 0.05 * sample.x[2]) * base

    def Phi_1(node, state, law, sample):
        return (0.2 + 0.3 * state[0]) * (1.0 + 0.1 * sample.x[1]) * base

    dep = dict(state_free=False, sample_free=False)
    return {
        "sigma_1": KernelSpec(sigma_1, **dep),
        "sigma_2": KernelSpec(sigma_2, **dep),
        "f_1": KernelSpec(f_1, **dep),
        "f_3": KernelSpec(f_3, **dep),
        "L_1": KernelSpec(L_1, **dep),
        "phi_1": KernelSpec(phi_1, **dep),
        "Phi_1": KernelSpec(Phi_1, **dep),
    }


def _oracle_problem(n):
    return CoefficientSet(
        name="oracle_instance",
        sigma=lambda i, x, law: 1.0 + 0.1 * x,
        f=lambda i, x, y, z, law: -0.2 * y,
        Phi=lambda x, law: x,
        L=lambda i, x, y, z, law: 0.5 * y,
        phi=lambda x, law: 0.0,
        sigma_x=lambda i, x, law: 0.1 * np.ones_like(x),
        f_y=lambda i, x, y, z, law: -0.2 * np.ones_like(x),
        L_y=lambda i, x, y, z, law: 0.5 * np.ones_like(x),
        Phi_x=lambda x, law: np.ones_like(x),
        kernels=_oracle_kernels(n),
        description="small instance for the triple-loop starred oracle",
    )


def _oracle_solved():
    grid = make_time_grid(0.5, ORACLE_N)
    noise = simulate_noise(grid, M=ORACLE_M, seed=7)
    control = ControlPath(0.2 + 0.05 * np.arange(ORACLE_N, dtype=float))
    coeffs = _oracle_problem(ORACLE_N)
    sol = picard_solve(coeffs, noise, control, x0=0.4,
                       params=PicardParams(tolerance=1e-13, max_iterations=50,
                                           basis=BasisSpec(degree=1)))
    assert sol.converged
    return coeffs, sol, control


def _oracle_weights(m, n):
    cols = np.arange(n + 1)
    rows = np.arange(m)[:, None]
    p = 0.1 * np.cos(0.5 * rows + cols)
    k = 0.1 * np.sin(0.3 * rows + 2.0 * cols[:n])
    return p, k


def _stopped(X, j, r):
    idx = np.minimum(np.arange(X.shape[1]), r)
    return X[j, idx]


def _floored(Y, j, r):
    idx = np.maximum(np.arange(Y.shape[1]), r)
    return Y[j, idx]


class _OracleSample:
    """Bare sample container mirroring what kernels receive."""

    def __init__(self, x, y, u):
        self.x, self.y, self.u = x, y, u


def _oracle_sample(sol, control, kind, j, r):
    X, Y = sol.ensemble.X, sol.ensemble.Y
    u = control.values
    if kind == "sigma":
        return _OracleSample(_stopped(X, j, r), None, u)
    if kind == "f":
        return _OracleSample(X[j], _floored(Y, j, r), u)
    return _OracleSample(X[j], Y[j], u)  # terminal and running-cost views


def _oracle_state(sol, kind, m, r):
    X, Y, Z = sol.ensemble.X, sol.ensemble.Y, sol.ensemble.Z
    n = sol.grid.N
    if kind == "sigma":
        return (X[m, r],)
    if kind == "f":
        step = sol.cache.steps[r]
        return (X[m, r], step.yhat[m], step.z[m])
    if kind == "L":
        return (X[m, r], Y[m, r], Z[m, r])
    return (X[m, n],)


def _project_at(sol, values, node):
    """Exact least-squares projection of one value vector on [1, x_node]."""
    A = np.column_stack([np.ones(values.shape[0]), sol.ensemble.X[:, node]])
    beta, *_ = np.linalg.lstsq(A, values, rcond=None)
    return A @ beta


def _project(sol, values):
    """Exact least-squares projection on [1, x_t] per left node."""
    out = np.empty_like(values)
    for t in range(values.shape[1]):
        out[:, t] = _project_at(sol, values[:, t], t)
    return out


def _oracle_starred(sol, control, fn, kind, mode, weight, tilde):
    m_count, n = sol.ensemble.M, sol.grid.N
    dt = sol.grid.dt
    vals = np.zeros((m_count, n))
    for t in range(n):
        for j in range(m_count):
            acc = 0.0
            for m in tilde:
                if mode == "terminal":
                    smp = _oracle_sample(sol, control, kind, j, None)
                    kv = fn(None, _oracle_state(sol, kind, m, None), None, smp)
                    w = 1.0 if weight is None else weight[m]
                    acc += kv[t] * w
                    continue
                for r in range(n):
                    in_range = (r >= t) if mode == "tail_exchange" else True
                    if mode == "tail_exchange" and in_range:
                        smp = _oracle_sample(sol, control, kind, j, r)
                        kv = fn(r, _oracle_state(sol, kind, m, r), None, smp)
                        acc += kv[t] * weight[m, r] * dt
                        smp_t = _oracle_sample(sol, control, kind, j, t)
                        kv_t = fn(t, _oracle_state(sol, kind, m, t), None, smp_t)
                        acc += kv_t[r] * weight[m, t] * dt
                    elif mode == "full":
                        smp = _oracle_sample(sol, control, kind, j, r)
                        kv = fn(r, _oracle_state(sol, kind, m, r), None, smp)
                        w = 1.0 if weight is None else weight[m, r]
                        acc += kv[t] * w * dt
            vals[j, t] = acc / len(tilde)
    return _project(sol, vals)


def test_starred_matches_triple_loop_oracle():
    coeffs, sol, control = _oracle_solved()
    p, k = _oracle_weights(ORACLE_M, ORACLE_N)
    st = compute_starred(coeffs, sol, p=p, k=k)
    assert st.skipped == ()
    kernels = _oracle_kernels(ORACLE_N)
    tilde = np.arange(ORACLE_M)
    cases = [
        ("sigma_1", st.sigma_1_k, "sigma", "tail_exchange", k),
        ("sigma_2", st.sigma_2_k, "sigma", "full", k),
        ("f_1", st.f_1_p, "f", "full", p[:, :ORACLE_N]),
        ("f_3", st.f_3_p, "f", "full", p[:, :ORACLE_N]),
        ("L_1", st.L_1, "L", "full", None),
        ("phi_1", st.phi_1, "phi", "terminal", None),
        ("Phi_1", st.Phi_1_pT, "Phi", "terminal", p[:, ORACLE_N]),
    ]
    for slot, got, kind, mode, weight in cases:
        want = _oracle_starred(sol, control, kernels[slot].fn, kind, mode,
                               weight, tilde)
        err = np.max(np.abs(got - want))
        assert err <= 1e-10, f"starred {slot} differs from oracle by {err:.2e}"


def test_starred_subsample_uses_fixed_stride():
    coeffs, sol, control = _oracle_solved()
    p, k = _oracle_weights(ORACLE_M, ORACLE_N)
    m_tilde = 5
    st = compute_starred(coeffs, sol, p=p, k=k,
                         params=SensitivityParams(m_tilde=m_tilde))
    stride = ORACLE_M // m_tilde
    tilde = np.arange(0, ORACLE_M, stride)[:m_tilde]
    kernels = _oracle_kernels(ORACLE_N)
    want = _oracle_starred(sol, control, kernels["sigma_1"].fn, "sigma",
                           "tail_exchange", k, tilde)
    err = np.max(np.abs(st.sigma_1_k - want))
    assert err <= 1e-10, f"subsampled starred sigma slot off by {err:.2e}"


def test_starred_fast_path_matches_slow_path():
    # the same structureless kernel declared with and without structure
    # flags must produce identical starred paths (the fast path skips the
    # regression because projecting a constant is the identity)
    base = _profile(ORACLE_N)

    def flat_kernel(node, state, law, sample):
        return 0.7 * base

    grid = make_time_grid(0.5, ORACLE_N)
    noise = simulate_noise(grid, M=ORACLE_M, seed=7)
    control = ControlPath(0.2 * np.ones(ORACLE_N))

    def instance(state_free, sample_free):
        spec = KernelSpec(flat_kernel, state_free=state_free,
                          sample_free=sample_free)
        kernels = {"sigma_1": spec, "sigma_2": spec, "f_1": spec,
                   "L_2": spec, "phi_3": spec, "Phi_2": spec}
        return dataclasses.replace(_oracle_problem(ORACLE_N), kernels=kernels)

    p, k = _oracle_weights(ORACLE_M, ORACLE_N)
    results = []
    for flags in ((True, True), (False, False)):
        coeffs = instance(*flags)
        sol = picard_solve(coeffs, noise, control, x0=0.4,
                           params=PicardParams(tolerance=1e-13,
                                               max_iterations=50))
        results.append(compute_starred(coeffs, sol, p=p, k=k))
    fast, slow = results
    for name in ("sigma_1_k", "sigma_2_k", "f_1_p", "L_2", "phi_3", "Phi_2_pT"):
        err = np.max(np.abs(getattr(fast, name) - getattr(slow, name)))
        assert err <= 1e-10, f"fast/slow mismatch on {name}: {err:.2e}"


def test_starred_quadratic_family_control_slot_is_two_u():
    _, noise, control = small_setup()
    coeffs, sol = solved("quadratic_control", noise, control)
    st = compute_starred(coeffs, sol)
    assert np.allclose(st.phi_3, 2.0 * 0.3, atol=1e-12), \
        "terminal-cost control slot must equal 2u exactly for constant u"
    assert np.all(st.L_1 == 0.0) and np.all(st.sigma_2_k == 0.0), \
        "kernel-free slots must stay zero"


def test_starred_missing_weights_are_skipped():
    _, noise, control = small_setup(m=64, n=4)
    coeffs, sol = solved("coupled_sigma", noise, control)
    st = compute_starred(coeffs, sol)  # no p, no k
    assert "sigma_2_k" in st.skipped, f"expected skipped sigma slot, got {st.skipped}"
    assert np.all(st.sigma_2_k == 0.0)


# ---------------------------------------------------------------------------
# first adjoint


def _plain_problem(**overrides):
    """sigma = 1, f = 0, Phi = x, L = 0, phi = 0, no kernels, then overrides."""
    fields = dict(
        name="plain",
        sigma=lambda i, x, law: np.ones_like(x),
        f=lambda i, x, y, z, law: np.zeros_like(x),
        Phi=lambda x, law: x,
        L=lambda i, x, y, z, law: np.zeros_like(x),
        phi=lambda x, law: np.zeros_like(x),
        Phi_x=lambda x, law: np.ones_like(x),
        description="plain instance for adjoint trivia",
    )
    fields.update(overrides)
    return CoefficientSet(**fields)


def test_adjoint_p_zero_without_sources():
    _, noise, control = small_setup()
    coeffs, sol = solved("quadratic_control", noise, control)
    res = solve_adjoint_p(coeffs, sol)
    assert np.all(res.p == 0.0), "p must stay exactly zero without Y-sources"
    assert np.all(res.f_star_2 == 0.0)


def test_adjoint_p_linear_drift_source():
    c = 0.7
    grid, noise, control = small_setup()
    coeffs = _plain_problem(
        L=lambda i, x, y, z, law: c * y,
        L_y=lambda i, x, y, z, law: c * np.ones_like(x))
    sol = picard_solve(coeffs, noise, control, x0=X0, params=TOL)
    res = solve_adjoint_p(coeffs, sol)
    want = -c * grid.nodes
    err = np.max(np.abs(res.p - want))
    assert err <= 1e-12, f"p should be -c*t on the grid, off by {err:.2e}"


def test_adjoint_p_martingale_source():
    c = 0.4
    _, noise, control = small_setup()
    coeffs = _plain_problem(
        L=lambda i, x, y, z, law: c * z,
        L_z=lambda i, x, y, z, law: c * np.ones_like(x))
    sol = picard_solve(coeffs, noise, control, x0=X0, params=TOL)
    res = solve_adjoint_p(coeffs, sol)
    want = -c * noise.cumulative()
    err = np.max(np.abs(res.p - want))
    assert err <= 1e-12, f"p should be -c*B_t per particle, off by {err:.2e}"


def test_adjoint_p_delay_term_matches_independent_euler():
    # a driver Y-kernel with state/sample dependence plus a constant L_y
    # source; an independent Euler loop assembles the delay pairing from the
    # definition at every node and must reproduce p and the stored pairing
    n = ORACLE_N
    base = _profile(n)

    def f2(node, state, law, sample):
        return (0.5 + 0.2 * state[1]) * (1.0 + 0.1 * sample.x[1]) * base

    c = 0.6
    coeffs = dataclasses.replace(
        _oracle_problem(n),
        L=lambda i, x, y, z, law: c * y,
        L_y=lambda i, x, y, z, law: c * np.ones_like(x),
        kernels={"f_2": KernelSpec(f2, state_free=False, sample_free=False)})
    grid = make_time_grid(0.5, n)
    noise = simulate_noise(grid, M=ORACLE_M, seed=7)
    control = ControlPath(0.2 * np.ones(n))
    sol = picard_solve(coeffs, noise, control, x0=0.4,
                       params=PicardParams(tolerance=1e-13, max_iterations=50))
    res = solve_adjoint_p(coeffs, sol)

    m_count, dt = ORACLE_M, grid.dt
    fy = -0.2
    p_o = np.zeros((m_count, n + 1))
    fstar2_o = np.zeros((m_count, n))
    for i in range(n):
        vals = np.zeros(m_count)
        for j in range(m_count):
            acc = 0.0
            for m in range(m_count):
                for r in range(i):
                    smp = _oracle_sample(sol, control, "f", j, r)
                    kv = f2(r, _oracle_state(sol, "f", m, r), None, smp)
                    acc += kv[i] * p_o[m, r] * dt
                    smp_i = _oracle_sample(sol, control, "f", j, i)
                    kv_i = f2(i, _oracle_state(sol, "f", m, i), None, smp_i)
                    acc += kv_i[r] * p_o[m, i] * dt
            vals[j] = acc / m_count
        fstar2_o[:, i] = _project_at(sol, vals, i)
        drift = fy * p_o[:, i] + fstar2_o[:, i] - c
        p_o[:, i + 1] = p_o[:, i] + drift * dt
    err_p = np.max(np.abs(res.p - p_o))
    err_d = np.max(np.abs(res.f_star_2 - fstar2_o))
    assert err_p <= 1e-10, f"p path differs from independent Euler by {err_p:.2e}"
    assert err_d <= 1e-10, f"delay pairing differs from oracle by {err_d:.2e}"


# ---------------------------------------------------------------------------
# second adjoint


def test_adjoint_q_constant_when_terminal_is_one():
    _, noise, control = small_setup()
    coeffs = _plain_problem(
        phi=lambda x, law: x,
        phi_x=lambda x, law: np.ones_like(x),
        Phi=lambda x, law: np.zeros_like(x),
        Phi_x=lambda x, law: np.zeros_like(x))
    sol = picard_solve(coeffs, noise, control, x0=X0, params=TOL)
    res = solve_adjoint_qk(coeffs, sol, np.zeros((M, N + 1)))
    assert res.iterations == 1, "no diffusion X-kernel: one sweep exactly"
    assert res.terminal_consistent
    err = np.max(np.abs(res.q - 1.0))
    assert err <= 1e-12, f"q should be exactly one, off by {err:.2e}"
    k_rms = float(np.sqrt(np.mean(res.k ** 2)))
    assert k_rms <= 1e-2, f"k RMS {k_rms:.2e} too large for a constant q"


def test_adjoint_q_propagates_linear_p_terminal():
    c = 0.7
    grid, noise, control = small_setup()
    coeffs = _plain_problem(
        L=lambda i, x, y, z, law: c * y,
        L_y=lambda i, x, y, z, law: c * np.ones_like(x))
    sol = picard_solve(coeffs, noise, control, x0=X0, params=TOL)
    p = solve_adjoint_p(coeffs, sol).p
    res = solve_adjoint_qk(coeffs, sol, p)
    want = c * grid.T
    assert np.allclose(res.q[:, N], want, atol=1e-12), \
        "terminal q must equal -Phi_x * p(T) = c*T per particle"
    err = np.max(np.abs(res.q - want))
    assert err <= 1e-10, f"q should stay at the constant c*T, off by {err:.2e}"


def test_adjoint_qk_single_iteration_without_diffusion_kernel():
    _, noise, control = small_setup()
    coeffs, sol = solved("coupled_sigma", noise, control)
    ast = solve_adjoint(coeffs, sol)
    assert ast.iterations == 1, \
        "default coupled family has no diffusion X-kernel: one outer pass"
    assert ast.converged and ast.terminal_consistent


def test_adjoint_qk_outer_iteration_with_diffusion_kernel():
    _, noise, control = small_setup()
    coeffs, sol = solved("coupled_sigma", noise, control, eps_x=0.05)
    ast = solve_adjoint(coeffs, sol)
    assert ast.iterations > 1, "diffusion X-kernel must force outer iterations"
    assert ast.converged, "outer relaxation should converge"
    assert ast.terminal_consistent


def test_adjoint_q_terminal_identity_bitwise():
    _, noise, control = small_setup()
    coeffs, sol = solved("coupled_sigma", noise, control)
    ast = solve_adjoint(coeffs, sol)
    from mfbsde.adjoint import base_derivatives
    pd = base_derivatives(coeffs, sol)
    want = pd.phi_x - pd.Phi_x * ast.p[:, N]
    assert np.array_equal(ast.q[:, N], want), \
        "imposed terminal identity must hold bitwise after the outer loop"


def test_adjoint_qk_rejects_misshaped_p():
    _, noise, control = small_setup(m=32, n=4)
    coeffs, sol = solved("coupled_sigma", noise, control)
    with pytest.raises(InvalidArgumentError):
        solve_adjoint_qk(coeffs, sol, np.zeros((32, 3)))


# ---------------------------------------------------------------------------
# duality


def test_duality_zero_direction_exact():
    _, noise, control = small_setup()
    coeffs, sol = solved("coupled_sigma", noise, control)
    rep = duality_check(coeffs, sol, np.zeros(N))
    assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.residual == 0.0, \
        f"zero direction must give exact zeros, got {rep}"


def test_duality_quadratic_family_exact():
    _, noise, control = small_setup()
    coeffs, sol = solved("quadratic_control", noise, control)
    rep = duality_check(coeffs, sol, np.linspace(0.5, 1.0, N))
    assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.residual == 0.0, \
        f"quadratic family must be exactly dual, got {rep}"


def test_duality_coupled_family_residual_band():
    _, noise, control = small_setup(m=512, n=16)
    coeffs, sol = solved("coupled_sigma", noise, control)
    rep = duality_check(coeffs, sol, np.linspace(0.5, 1.0, 16))
    assert rep.residual <= 0.02, \
        f"duality residual {rep.residual:.2e} above the calibrated band"
    assert abs(rep.lhs) > 1e-6, "expected a nontrivial identity value"


def test_duality_coupled_with_diffusion_kernel_residual_band():
    _, noise, control = small_setup(m=512, n=16)
    coeffs, sol = solved("coupled_sigma", noise, control, eps_x=0.05)
    rep = duality_check(coeffs, sol, np.linspace(0.5, 1.0, 16))
    assert rep.residual <= 0.02, \
        f"duality residual {rep.residual:.2e} above the calibrated band"


def test_duality_rejects_incomplete_starred():
    _, noise, control = small_setup(m=64, n=4)
    coeffs, sol = solved("coupled_sigma", noise, control)
    ast = solve_adjoint(coeffs, sol)
    crippled = dataclasses.replace(ast, starred=compute_starred(coeffs, sol))
    with pytest.raises(InvalidArgumentError):
        duality_check(coeffs, sol, np.ones(4), adjoint=crippled)
