"""Coefficient sets: dynamics, costs, their partial derivatives and the
kernels of their derivatives with respect to the path law.

A coefficient set bundles the five scalar maps of a controlled system

    sigma(t, x, law)      diffusion
    f(t, x, y, z, law)    backward driver
    Phi(x, law)           terminal condition of the backward component
    L(t, x, y, z, law)    running cost
    phi(x, law)           terminal cost

together with their classical partials and, for each component of the path
law they read (X-paths, Y-paths, control), a *kernel*: the density on the N
left grid nodes representing the functional derivative of the coefficient
with respect to that component.  Pairings are always the left-endpoint sum

    <kernel, h> = sum_{r<N} kernel[r] * h[r] * dt

with h read through the same stopped/anticipated view the coefficient itself
uses (X frozen after the coefficient's node, Y floored before it).  Kernels
are densities only: a coefficient that reads the law of the terminal value
pointwise has no representable kernel and cannot be used with the sensitivity
machinery (the built-in families all couple through time integrals).

Two law conventions exist.  "canonical" coefficient sets are non-anticipative:
sigma sees the (X stopped at t, control) law and f sees the (X, Y floored at
t, control) law.  "general" sets let sigma and f read the untruncated joint
law; they can be simulated and Picard-iterated but are rejected by the
variational/adjoint layers.
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass, field
from itertools import islice

import numpy as np

from .errors import InvalidArgumentError, ValidationFailureError

PathSample = namedtuple("PathSample", ["x", "y", "u"])
PathSample.__doc__ = """One particle's paths: x, y on all N+1 nodes, u on the N left nodes.

Components a law view does not expose are None.  Truncation markers of the
law the sample was drawn from are already applied to the stored values."""


def _readonly(a):
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ControlPath:
    """Deterministic open-loop control: one value per left grid node."""

    values: np.ndarray  # shape (N,)

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if v.ndim != 1 or v.size < 1:
            raise InvalidArgumentError(f"control values must be a 1-d vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("control values must be finite")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def N(self):
        return self.values.shape[0]

    @staticmethod
    def constant(N, value):
        return ControlPath(np.full(int(N), float(value)))

    def with_values(self, values):
        return ControlPath(values)


@dataclass(frozen=True)
class BoxBounds:
    """Admissible control box [lower, upper]; either side may be infinite."""

    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        lo, up = float(self.lower), float(self.upper)
        if math.isnan(lo) or math.isnan(up) or lo > up:
            raise InvalidArgumentError(f"invalid box: lower={lo!r} upper={up!r}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    def clamp(self, values):
        return np.clip(np.asarray(values, dtype=float), self.lower, self.upper)

    def contains(self, values, tol=0.0):
        v = np.asarray(values, dtype=float)
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))


# ---------------------------------------------------------------------------
# law materialization and generic functional evaluation


def materialize_paths(law):
    """Apply a law view's markers and return dense (X, Y, U) arrays.

    This is the one place where law data is copied; accessors on the view
    itself never copy.  Components not exposed come back as None.
    """
    ens = law.ensemble
    n_nodes = ens.grid.N + 1
    idx = np.arange(n_nodes)
    if law.x_freeze is not None:
        Xm = ens.X[:, np.minimum(idx, law.x_freeze)]
    else:
        Xm = ens.X.copy()
    Ym = None
    if "y" in law.components:
        if law.y_floor is not None:
            Ym = ens.Y[:, np.maximum(idx, law.y_floor)]
        else:
            Ym = ens.Y.copy()
    Um = law.u_values() if "u" in law.components else None
    return Xm, Ym, Um


def path_samples(law):
    """Iterate the particles of a law view as PathSample rows."""
    Xm, Ym, Um = materialize_paths(law)
    for j in range(law.M):
        yield PathSample(x=Xm[j], y=None if Ym is None else Ym[j], u=Um)


def eval_law_functional(law, functional):
    """Mean over particles of a scalar path functional.

    `functional` is called once per particle with a PathSample and must
    return a float.  Intended for tests, oracles and one-off statistics;
    the built-in families evaluate their law integrals in closed vector
    form instead.
    """
    total = 0.0
    count = 0
    for sample in path_samples(law):
        total += float(functional(sample))
        count += 1
    return total / count


# ---------------------------------------------------------------------------
# coefficient sets


@dataclass(frozen=True)
class KernelSpec:
    """A law-derivative kernel plus the structure flags the fast paths need.

    fn(node, state, law, sample) -> (N,) density on left nodes, where `node`
    is the coefficient's grid node (None for terminal coefficients), `state`
    the coefficient's classical arguments as a tuple of floats, `law` the
    view the coefficient was evaluated under and `sample` the PathSample the
    derivative is taken at.  state_free / sample_free declare that the value
    does not depend on the respective argument, which lets the machinery
    evaluate the kernel once instead of per particle pair.
    """

    fn: object
    state_free: bool = False
    sample_free: bool = False

    def __call__(self, node, state, law, sample):
        return self.fn(node, state, law, sample)


#: kernel slots a coefficient set may fill: coefficient name x law component
KERNEL_SLOTS = (
    "sigma_1", "sigma_2",
    "f_1", "f_2", "f_3",
    "L_1", "L_2", "L_3",
    "Phi_1", "Phi_2",
    "phi_1", "phi_2", "phi_3",
)

_SLOT_COMPONENT = {slot: {"1": "x", "2": "u" if slot[0] in "sP" else "y", "3": "u"}[slot[-1]]
                   for slot in KERNEL_SLOTS}
# sigma/Phi read (X, u) laws: slot 2 is the control; f/L/phi read (X, Y, u):
# slot 2 is Y and slot 3 the control.


def _zero2(node, x, law):
    return np.zeros_like(np.asarray(x, dtype=float))


def _zero4(node, x, y, z, law):
    return np.zeros_like(np.asarray(x, dtype=float))


def _zero_terminal(x, law):
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class CoefficientSet:
    """Dynamics, costs, classical partials and law-derivative kernels.

    Vector convention: the state arguments x, y, z arrive as (M,) arrays and
    every callable returns an (M,) array (or a scalar, which the callers
    broadcast).  Kernel slots not filled mean "identically zero derivative".
    """

    name: str
    sigma: object
    f: object
    Phi: object
    L: object
    phi: object
    sigma_x: object = _zero2
    f_x: object = _zero4
    f_y: object = _zero4
    f_z: object = _zero4
    Phi_x: object = _zero_terminal
    L_x: object = _zero4
    L_y: object = _zero4
    L_z: object = _zero4
    phi_x: object = _zero_terminal
    kernels: dict = field(default_factory=dict)
    law_form: str = "canonical"
    params: dict = field(default_factory=dict)
    description: str = ""

    def __post_init__(self):
        if self.law_form not in ("canonical", "general"):
            raise InvalidArgumentError(f"unknown law form {self.law_form!r}")
        for slot in self.kernels:
            if slot not in KERNEL_SLOTS:
                raise InvalidArgumentError(
                    f"unknown kernel slot {slot!r}; valid slots: {', '.join(KERNEL_SLOTS)}")
        for slot, spec in self.kernels.items():
            if spec is not None and not isinstance(spec, KernelSpec):
                raise InvalidArgumentError(f"kernel slot {slot!r} must hold a KernelSpec")

    def kernel(self, slot):
        return self.kernels.get(slot)

    # law views each coefficient is evaluated under ---------------------------

    def sigma_law(self, ensemble, node):
        if self.law_form == "general":
            return ensemble.law(components="xyu")
        return ensemble.law(components="xu", x_freeze=node)

    def f_law(self, ensemble, node):
        if self.law_form == "general":
            return ensemble.law(components="xyu")
        return ensemble.law(components="xyu", y_floor=node)

    def terminal_law(self, ensemble):
        """Law view for Phi: (X, control), untruncated."""
        return ensemble.law(components="xu")

    def cost_law(self, ensemble):
        """Law view for L and phi: joint (X, Y, control), untruncated."""
        return ensemble.law(components="xyu")

    def require_canonical(self, operation):
        if self.law_form != "canonical":
            raise InvalidArgumentError(
                f"{operation} requires a non-anticipative coefficient set; "
                f"{self.name!r} reads the untruncated joint law")


def as_particles(value, M):
    """Broadcast a coefficient's return value to an (M,) vector."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(M, float(arr))
    return arr


# ---------------------------------------------------------------------------
# built-in families


def _left_quadrature(values, dt, upto=None):
    """Left-endpoint sum of `values` over left nodes [0, upto)."""
    if upto is None:
        return float(np.sum(values) * dt)
    return float(np.sum(values[:upto]) * dt)


def _mean_x_integral(law, upto):
    """law-mean of the running integral of X over [0, t_upto)."""
    if upto == 0:
        return 0.0
    dt = law.grid.dt
    return float(sum(law.mean_x(s) for s in range(upto)) * dt)


def _pointmaps():
    return {"x": lambda x, y: x, "y": lambda x, y: y, "sum": lambda x, y: x + y}


def _nodemap(name, N):
    if name == "identity":
        return lambda i: i
    if name == "zero":
        return lambda i: 0
    if name == "half":
        return lambda i: i // 2
    raise InvalidArgumentError(f"unknown node map {name!r} (identity|zero|half)")


def _quadratic_like(name, params, target_fn, kernel_fn):
    """Shared frame of the two pure-control-cost families."""

    c_u = params["c_u"]

    def sigma(i, x, law):
        return np.ones_like(x)

    def f(i, x, y, z, law):
        return np.zeros_like(x)

    def Phi(x, law):
        return x

    def phi(x, law):
        u = law.u_values()
        dt = law.grid.dt
        return np.full_like(x, c_u * _left_quadrature(target_fn(u, law.grid), dt))

    kernels = {
        "phi_3": KernelSpec(kernel_fn, state_free=True, sample_free=True),
    }
    return CoefficientSet(
        name=name,
        sigma=sigma, f=f, Phi=Phi, L=_zero4, phi=phi,
        sigma_x=_zero2,
        Phi_x=lambda x, law: np.ones_like(x),
        kernels=kernels,
        params=dict(params),
        description="unit diffusion, zero driver, terminal identity, "
                    "control cost through the law's control component",
    )


def _family_quadratic(params):
    c_u = params["c_u"]

    def target(u, grid):
        return u * u

    def kernel(node, state, law, sample):
        return 2.0 * c_u * law.u_values()

    return _quadratic_like("quadratic_control", params, target, kernel)


def _family_tracking(params):
    c_u, c = params["c_u"], params["c"]

    def target(u, grid):
        ref = c * grid.left_nodes()
        return (u - ref) ** 2

    def kernel(node, state, law, sample):
        ref = c * law.grid.left_nodes()
        return 2.0 * c_u * (law.u_values() - ref)

    return _quadratic_like("tracking_control", params, target, kernel)


def _family_coupled_sigma(params):
    eps = params["eps"]
    eps_x = params["eps_x"]
    kappa = params["kappa"]
    eta = params["eta"]
    s0, s1 = params["s0"], params["s1"]
    c_u = params["c_u"]

    def sigma(i, x, law):
        dt = law.grid.dt
        drift = s0 + eps * _left_quadrature(law.u_values(), dt, upto=i)
        if eps_x != 0.0:
            drift += eps_x * _mean_x_integral(law, i)
        return drift + s1 * x

    def sigma_x(i, x, law):
        return np.full_like(x, s1)

    def f(i, x, y, z, law):
        # driver reads the law-mean of the Y-path anticipated at the current
        # node: kappa * mean_m sum_{r<N} Y_m(max(r, i)) dt
        dt = law.grid.dt
        N = law.grid.N
        val = kappa * sum(law.mean_y(max(r, i)) for r in range(N)) * dt
        return np.full_like(x, val)

    def Phi(x, law):
        return x

    def L(i, x, y, z, law):
        return eta * (y + z)

    def phi(x, law):
        u = law.u_values()
        dt = law.grid.dt
        return x * x + c_u * _left_quadrature(u * u, dt)

    def k_sigma_2(node, state, law, sample):
        out = np.zeros(law.grid.N)
        out[:node] = eps
        return out

    def k_sigma_1(node, state, law, sample):
        out = np.zeros(law.grid.N)
        out[:node] = eps_x
        return out

    def k_f_2(node, state, law, sample):
        return np.full(law.grid.N, kappa)

    def k_phi_3(node, state, law, sample):
        return 2.0 * c_u * law.u_values()

    kernels = {
        "sigma_2": KernelSpec(k_sigma_2, state_free=True, sample_free=True),
        "f_2": KernelSpec(k_f_2, state_free=True, sample_free=True),
        "phi_3": KernelSpec(k_phi_3, state_free=True, sample_free=True),
    }
    if eps_x != 0.0:
        kernels["sigma_1"] = KernelSpec(k_sigma_1, state_free=True, sample_free=True)

    return CoefficientSet(
        name="coupled_sigma",
        sigma=sigma, f=f, Phi=Phi, L=L, phi=phi,
        sigma_x=sigma_x,
        L_y=lambda i, x, y, z, law: np.full_like(x, eta),
        L_z=lambda i, x, y, z, law: np.full_like(x, eta),
        Phi_x=lambda x, law: np.ones_like(x),
        phi_x=lambda x, law: 2.0 * x,
        kernels=kernels,
        params=dict(params),
        description="diffusion fed by the running control integral of the law, "
                    "driver fed by the anticipated law mean of Y, linear running "
                    "cost in (y, z), quadratic terminal state and control cost",
    )


def _family_example_i(params):
    s0, s1, s2 = params["s0"], params["s1"], params["s2"]
    fy = params["fy"]
    h = _pointmaps()[params["h"]]

    def sigma(i, x, law):
        dt = law.grid.dt
        N = law.grid.N
        a = sum(float(np.mean(h(law.x_at(s), law.y_at(s)))) for s in range(N)) * dt
        return s0 + s1 * x + s2 * a

    def f(i, x, y, z, law):
        return fy * y

    def Phi(x, law):
        return x

    def phi(x, law):
        return x * x

    return CoefficientSet(
        name="example_i",
        sigma=sigma, f=f, Phi=Phi, L=_zero4, phi=phi,
        sigma_x=lambda i, x, law: np.full_like(x, s1),
        f_y=lambda i, x, y, z, law: np.full_like(x, fy),
        Phi_x=lambda x, law: np.ones_like(x),
        phi_x=lambda x, law: 2.0 * x,
        law_form="general",
        params=dict(params),
        description="diffusion shifted by the time-integrated law mean of a "
                    "pointwise statistic of (X, Y)",
    )


def _family_example_ii(params):
    s0, s1, s2 = params["s0"], params["s1"], params["s2"]
    fy = params["fy"]
    g = _pointmaps()[params["g"]]
    phi_name, psi_name = params["phi_map"], params["psi_map"]

    def sigma(i, x, law):
        pmap = _nodemap(phi_name, law.grid.N)
        qmap = _nodemap(psi_name, law.grid.N)
        a = float(np.mean(g(law.x_at(pmap(i)), law.y_at(qmap(i)))))
        return s0 + s1 * x + s2 * a

    def f(i, x, y, z, law):
        return fy * y

    def Phi(x, law):
        return x

    def phi(x, law):
        return x * x

    return CoefficientSet(
        name="example_ii",
        sigma=sigma, f=f, Phi=Phi, L=_zero4, phi=phi,
        sigma_x=lambda i, x, law: np.full_like(x, s1),
        f_y=lambda i, x, y, z, law: np.full_like(x, fy),
        Phi_x=lambda x, law: np.ones_like(x),
        phi_x=lambda x, law: 2.0 * x,
        law_form="general",
        params=dict(params),
        description="diffusion shifted by the law mean of a pointwise statistic "
                    "of (X, Y) read at remapped grid nodes",
    )


_FAMILIES = {
    "quadratic_control": (_family_quadratic, {"c_u": 1.0}),
    "tracking_control": (_family_tracking, {"c_u": 1.0, "c": 1.0}),
    "coupled_sigma": (_family_coupled_sigma, {
        "eps": 0.1, "eps_x": 0.0, "kappa": 0.1, "eta": 0.1,
        "s0": 1.0, "s1": 0.0, "c_u": 1.0}),
    "example_i": (_family_example_i, {
        "s0": 1.0, "s1": 0.0, "s2": 0.5, "h": "x", "fy": 0.0}),
    "example_ii": (_family_example_ii, {
        "s0": 1.0, "s1": 0.0, "s2": 0.5, "g": "x", "fy": 0.0,
        "phi_map": "identity", "psi_map": "identity"}),
}


def builtin_problem(name, **params):
    """Construct one of the built-in coefficient families by name.

    Unknown family names and unknown/misspelled parameters are rejected.
    """
    if name not in _FAMILIES:
        raise InvalidArgumentError(
            f"unknown problem family {name!r}; available: {', '.join(sorted(_FAMILIES))}")
    build, defaults = _FAMILIES[name]
    merged = dict(defaults)
    for key, value in params.items():
        if key not in defaults:
            raise InvalidArgumentError(
                f"family {name!r} has no parameter {key!r}; "
                f"accepted: {', '.join(sorted(defaults))}")
        merged[key] = float(value) if isinstance(defaults[key], float) else value
    return build(merged)


# ---------------------------------------------------------------------------
# derivative validation


def _truncated_direction(direction_nodes, slot, node, N):
    """Pair a kernel with a node-path direction through the coefficient's view.

    Returns the length-N vector d[r] the kernel density multiplies:
    X components read the path stopped at the coefficient node, Y components
    the path floored at it; control directions already live on left nodes.
    """
    comp = _SLOT_COMPONENT[slot]
    r = np.arange(N)
    if comp == "u":
        return np.asarray(direction_nodes, dtype=float)[:N]
    if comp == "x":
        idx = r if node is None else np.minimum(r, node)
    else:
        idx = r if node is None else np.maximum(r, node)
    return np.asarray(direction_nodes, dtype=float)[idx]


@dataclass(frozen=True)
class PartialCheck:
    coefficient: str
    argument: str
    node: object
    reference: float
    computed: float
    rel_error: float
    passed: bool


@dataclass(frozen=True)
class PartialsReport:
    checks: tuple
    threshold: float

    @property
    def failures(self):
        return tuple(c for c in self.checks if not c.passed)

    @property
    def max_rel_error(self):
        return max((c.rel_error for c in self.checks), default=0.0)

    def raise_on_failure(self):
        if self.failures:
            worst = max(self.failures, key=lambda c: c.rel_error)
            raise ValidationFailureError(
                f"{len(self.failures)} derivative check(s) failed; worst: "
                f"{worst.coefficient}.{worst.argument} at node {worst.node} "
                f"(rel error {worst.rel_error:.3e} > {self.threshold:g})")


def _perturbed_ensemble(ensemble, component, particle, direction, delta):
    """Copy of `ensemble` with one component path nudged by delta*direction.

    component 'x'/'y' perturbs one particle's path on all nodes; 'u' perturbs
    the shared control on the left nodes.
    """
    from .grids import ParticleEnsemble  # local import to avoid cycle at module load

    X, Y = np.array(ensemble.X), np.array(ensemble.Y)
    control = ensemble.control
    if component == "x":
        X[particle] += delta * direction
    elif component == "y":
        Y[particle] += delta * direction
    else:
        base = control.values if control is not None else np.zeros(ensemble.grid.N)
        control = ControlPath(base + delta * direction[:ensemble.grid.N])
    return ParticleEnsemble(grid=ensemble.grid, X=X, Y=Y, Z=ensemble.Z,
                            noise=ensemble.noise, control=control)


def validate_partials(coeffs, ensemble, delta=1e-6, threshold=1e-4,
                      nodes=None, probe_particle=0):
    """Cross-check every declared derivative of a coefficient set.

    Classical partials are compared against central finite differences in the
    corresponding scalar argument.  Law kernels are compared against the
    one-particle Gateaux quotient: nudge a single particle's component path
    (or the shared control) by delta times a probe direction, difference the
    coefficient value at a fixed state, and divide by delta/M (delta for the
    control, which moves every atom of the law at once).  Slots without a
    kernel are checked to be genuinely insensitive.

    Returns a PartialsReport; callers that want an exception use
    report.raise_on_failure().
    """
    grid = ensemble.grid
    N = grid.N
    M = ensemble.M
    if nodes is None:
        nodes = sorted({0, N // 2, N - 1})
    checks = []

    def rel(reference, computed):
        return abs(reference - computed) / (1.0 + abs(reference))

    def add(coefficient, argument, node, reference, computed):
        err = rel(reference, computed)
        checks.append(PartialCheck(coefficient, argument, node,
                                   float(reference), float(computed),
                                   float(err), bool(err <= threshold)))

    j = probe_particle
    # classical partials: central differences in each scalar argument --------
    for i in _probe_nodes(nodes, N):
        s_law = coeffs.sigma_law(ensemble, i)
        f_lawv = coeffs.f_law(ensemble, i)
        c_law = coeffs.cost_law(ensemble)
        x = ensemble.X[:, i].copy()
        y = ensemble.Y[:, i].copy()
        z = ensemble.Z[:, i].copy()

        def bump(vec, h):
            out = vec.copy()
            out[j] += h
            return out

        fd = (as_particles(coeffs.sigma(i, bump(x, delta), s_law), M)[j]
              - as_particles(coeffs.sigma(i, bump(x, -delta), s_law), M)[j]) / (2 * delta)
        add("sigma", "x", i, fd, as_particles(coeffs.sigma_x(i, x, s_law), M)[j])

        for arg, part in (("x", coeffs.f_x), ("y", coeffs.f_y), ("z", coeffs.f_z)):
            args = {"x": x, "y": y, "z": z}
            hi = dict(args); hi[arg] = bump(args[arg], delta)
            lo = dict(args); lo[arg] = bump(args[arg], -delta)
            fd = (as_particles(coeffs.f(i, hi["x"], hi["y"], hi["z"], f_lawv), M)[j]
                  - as_particles(coeffs.f(i, lo["x"], lo["y"], lo["z"], f_lawv), M)[j]) / (2 * delta)
            add("f", arg, i, fd, as_particles(part(i, x, y, z, f_lawv), M)[j])

        for arg, part in (("x", coeffs.L_x), ("y", coeffs.L_y), ("z", coeffs.L_z)):
            args = {"x": x, "y": y, "z": z}
            hi = dict(args); hi[arg] = bump(args[arg], delta)
            lo = dict(args); lo[arg] = bump(args[arg], -delta)
            fd = (as_particles(coeffs.L(i, hi["x"], hi["y"], hi["z"], c_law), M)[j]
                  - as_particles(coeffs.L(i, lo["x"], lo["y"], lo["z"], c_law), M)[j]) / (2 * delta)
            add("L", arg, i, fd, as_particles(part(i, x, y, z, c_law), M)[j])

    xT = ensemble.X[:, N].copy()
    t_law = coeffs.terminal_law(ensemble)
    c_law = coeffs.cost_law(ensemble)

    def bump_T(h):
        out = xT.copy()
        out[j] += h
        return out

    fd = (as_particles(coeffs.Phi(bump_T(delta), t_law), M)[j]
          - as_particles(coeffs.Phi(bump_T(-delta), t_law), M)[j]) / (2 * delta)
    add("Phi", "x", N, fd, as_particles(coeffs.Phi_x(xT, t_law), M)[j])
    fd = (as_particles(coeffs.phi(bump_T(delta), c_law), M)[j]
          - as_particles(coeffs.phi(bump_T(-delta), c_law), M)[j]) / (2 * delta)
    add("phi", "x", N, fd, as_particles(coeffs.phi_x(xT, c_law), M)[j])

    if coeffs.law_form == "general":
        # kernel slots describe canonical-form law components; general sets
        # are simulation-only, so only their classical partials are checked
        return PartialsReport(checks=tuple(checks), threshold=float(threshold))

    # law kernels: one-particle Gateaux quotients -----------------------------
    direction_nodes = np.cos(np.linspace(0.0, 3.0, N + 1)) + 0.5
    m = min(1, M - 1)  # perturbed particle: not the probe particle if possible

    def coefficient_eval(slot, node, ens):
        if slot.startswith("sigma"):
            law = coeffs.sigma_law(ens, node)
            return as_particles(coeffs.sigma(node, ensemble.X[:, node], law), M)[j]
        if slot.startswith("f"):
            law = coeffs.f_law(ens, node)
            return as_particles(coeffs.f(node, ensemble.X[:, node], ensemble.Y[:, node],
                                         ensemble.Z[:, node], law), M)[j]
        if slot.startswith("L"):
            law = coeffs.cost_law(ens)
            return as_particles(coeffs.L(node, ensemble.X[:, node], ensemble.Y[:, node],
                                         ensemble.Z[:, node], law), M)[j]
        if slot.startswith("Phi"):
            law = coeffs.terminal_law(ens)
            return as_particles(coeffs.Phi(ensemble.X[:, N], law), M)[j]
        law = coeffs.cost_law(ens)
        return as_particles(coeffs.phi(ensemble.X[:, N], law), M)[j]

    for slot in KERNEL_SLOTS:
        comp = _SLOT_COMPONENT[slot]
        coeff_name = slot.rsplit("_", 1)[0]
        slot_nodes = [None] if coeff_name in ("Phi", "phi") else list(_probe_nodes(nodes, N))
        for node in slot_nodes:
            hi = _perturbed_ensemble(ensemble, comp, m, direction_nodes, delta)
            lo = _perturbed_ensemble(ensemble, comp, m, direction_nodes, -delta)
            quotient = (coefficient_eval(slot, node, hi)
                        - coefficient_eval(slot, node, lo)) / (2 * delta)
            if comp != "u":
                quotient *= M  # a single atom carries weight 1/M
            spec = coeffs.kernel(slot)
            if spec is None:
                pairing = 0.0
            else:
                if coeff_name == "sigma":
                    law = coeffs.sigma_law(ensemble, node)
                elif coeff_name == "Phi":
                    law = coeffs.terminal_law(ensemble)
                elif coeff_name == "f":
                    law = coeffs.f_law(ensemble, node)
                else:
                    law = coeffs.cost_law(ensemble)
                state_node = N if node is None else node
                if coeff_name in ("sigma", "Phi"):
                    state = (float(ensemble.X[j, state_node]),)
                else:
                    state = (float(ensemble.X[j, state_node]),
                             float(ensemble.Y[j, state_node]),
                             float(ensemble.Z[j, min(state_node, N - 1)]))
                sample = next(islice(path_samples(law), m, m + 1))
                kvec = np.asarray(spec(node, state, law, sample), dtype=float)
                if comp == "u":
                    # control moves every atom: average kernel over samples
                    acc = np.zeros(N)
                    for smp in path_samples(law):
                        acc += np.asarray(spec(node, state, law, smp), dtype=float)
                    kvec = acc / M
                dvec = _truncated_direction(direction_nodes, slot, node, N)
                pairing = float(np.sum(kvec * dvec) * grid.dt)
            label = "nokernel" if spec is None else "kernel"
            add(coeff_name, f"{label}:{slot}", node, quotient, pairing)

    return PartialsReport(checks=tuple(checks), threshold=float(threshold))


def _probe_nodes(nodes, N):
    """Clip probe nodes into the valid left-node range, preserving order."""
    seen = []
    for i in nodes:
        i = int(min(max(i, 0), N - 1))
        if i not in seen:
            seen.append(i)
    return seen
