"""Experiment orchestration: config files, command pipelines, manifests.

One config file describes one experiment; a command name picks the pipeline.
Config parsing is strict (unknown keys anywhere are rejected before any
compute starts) and every numeric field is pushed through the owning
module's own validation, so a config that parses is a config that runs.

Manifests are deterministic by construction: keys are sorted, floats are
serialized by repr, and no timestamps are recorded.  In reference mode wall
times are zeroed and the worker count is forced to one, making two runs of
the same (config, seed) byte-identical.  Convergence failures never suppress
the manifest -- they set the status flag and the caller maps it to a nonzero
exit code.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .adjoint import (
    SensitivityParams,
    difference_quotient_check,
    duality_check,
    solve_adjoint,
    solve_variational,
)
from .coefficients import (
    BoxBounds,
    ControlPath,
    as_particles,
    builtin_problem,
    validate_partials,
)
from .errors import (
    ConvergenceFailureError,
    InvalidArgumentError,
    SeriesNotFoundError,
)
from .grids import make_time_grid, simulate_noise
from .optimizer import (
    OptimizeParams,
    gradient_DvH,
    optimize,
    sufficiency_probe,
)
from .solver import BasisSpec, PicardParams, cost_functional, picard_solve

COMMANDS = ("solve", "gradient-check", "duality-check", "picard-diagnose",
            "optimize", "validate-coeffs", "diff-quotient")

_TOP_KEYS = ("problem", "x0", "T", "N", "M", "M_tilde", "seed", "workers",
             "basis", "picard", "optimizer", "control", "command_options")


def _check_keys(raw, section, allowed):
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise InvalidArgumentError(
            f"unknown key(s) in {section}: {', '.join(unknown)}; "
            f"accepted: {', '.join(allowed)}")


def _require_int(value, name):
    if isinstance(value, bool) or int(value) != value:
        raise InvalidArgumentError(f"{name} must be an integer, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: problem selection, discretization, solver and
    optimizer settings, admissible box and initial control."""

    problem_name: str
    problem_params: dict = field(default_factory=dict)
    x0: float = 0.0
    T: float = 1.0
    N: int = 16
    M: int = 256
    m_tilde: object = None
    seed: int = 0
    workers: int = 1
    picard: PicardParams = field(default_factory=PicardParams)
    optimizer: OptimizeParams = field(default_factory=OptimizeParams)
    bounds: BoxBounds = field(default_factory=BoxBounds)
    initial_control: tuple = (0.0,)
    command_options: dict = field(default_factory=dict)

    def __post_init__(self):
        make_time_grid(self.T, self.N)  # rejects bad T/N with the grid module's message
        if not np.isfinite(self.x0):
            raise InvalidArgumentError("x0 must be finite")
        if self.M < 1:
            raise InvalidArgumentError(f"particle count must be >= 1, got M={self.M}")
        if not (0 <= self.seed < 2 ** 64):
            raise InvalidArgumentError(f"seed must lie in [0, 2^64), got {self.seed}")
        if self.workers < 1:
            raise InvalidArgumentError("workers must be >= 1")
        if len(self.initial_control) not in (1, self.N):
            raise InvalidArgumentError(
                f"control initial must be a scalar or a list of length N={self.N}")
        if not self.bounds.contains(np.asarray(self.initial_control)):
            raise InvalidArgumentError("initial control must lie in the admissible box")

    # construction -----------------------------------------------------------

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise InvalidArgumentError("config root must be an object")
        _check_keys(raw, "config", _TOP_KEYS)
        problem = raw.get("problem")
        if not isinstance(problem, dict) or "name" not in problem:
            raise InvalidArgumentError("config requires problem: {name, params}")
        _check_keys(problem, "problem", ("name", "params"))
        params = problem.get("params", {})
        if not isinstance(params, dict):
            raise InvalidArgumentError("problem params must be an object")

        basis_raw = raw.get("basis", {})
        _check_keys(basis_raw, "basis", ("degree", "running_integral", "running_max"))
        basis = BasisSpec(**basis_raw)

        picard_raw = raw.get("picard", {})
        _check_keys(picard_raw, "picard",
                    ("damping", "tolerance", "max_iterations", "init"))
        picard = PicardParams(basis=basis, **picard_raw)

        m_tilde = raw.get("M_tilde")
        sensitivity = SensitivityParams(
            m_tilde=None if m_tilde is None else _require_int(m_tilde, "M_tilde"))

        opt_raw = raw.get("optimizer", {})
        _check_keys(opt_raw, "optimizer",
                    ("eta", "iterations", "tolerance", "halve_on_increase"))
        optimizer = OptimizeParams(picard=picard, sensitivity=sensitivity, **opt_raw)

        control_raw = raw.get("control", {})
        _check_keys(control_raw, "control", ("lower", "upper", "initial"))
        lower = control_raw.get("lower")
        upper = control_raw.get("upper")
        bounds = BoxBounds(lower=-np.inf if lower is None else float(lower),
                           upper=np.inf if upper is None else float(upper))
        initial = control_raw.get("initial", 0.0)
        if isinstance(initial, (list, tuple)):
            initial = tuple(float(v) for v in initial)
        else:
            initial = (float(initial),)

        options = raw.get("command_options", {})
        if not isinstance(options, dict):
            raise InvalidArgumentError("command_options must be an object")

        return cls(problem_name=str(problem["name"]),
                   problem_params=dict(params),
                   x0=float(raw.get("x0", 0.0)),
                   T=float(raw.get("T", 1.0)),
                   N=_require_int(raw.get("N", 16), "N"),
                   M=_require_int(raw.get("M", 256), "M"),
                   m_tilde=sensitivity.m_tilde,
                   seed=_require_int(raw.get("seed", 0), "seed"),
                   workers=_require_int(raw.get("workers", 1), "workers"),
                   picard=picard,
                   optimizer=optimizer,
                   bounds=bounds,
                   initial_control=initial,
                   command_options=dict(options))

    def to_dict(self):
        """Canonical echo; from_dict applied to it reproduces this config."""
        basis = self.picard.basis
        return {
            "problem": {"name": self.problem_name,
                        "params": dict(self.problem_params)},
            "x0": self.x0, "T": self.T, "N": self.N, "M": self.M,
            "M_tilde": self.m_tilde, "seed": self.seed, "workers": self.workers,
            "basis": {"degree": basis.degree,
                      "running_integral": basis.running_integral,
                      "running_max": basis.running_max},
            "picard": {"damping": self.picard.damping,
                       "tolerance": self.picard.tolerance,
                       "max_iterations": self.picard.max_iterations,
                       "init": self.picard.init},
            "optimizer": {"eta": self.optimizer.eta,
                          "iterations": self.optimizer.iterations,
                          "tolerance": self.optimizer.tolerance,
                          "halve_on_increase": self.optimizer.halve_on_increase},
            "control": {
                "lower": None if np.isneginf(self.bounds.lower) else self.bounds.lower,
                "upper": None if np.isposinf(self.bounds.upper) else self.bounds.upper,
                "initial": (self.initial_control[0]
                            if len(self.initial_control) == 1
                            else list(self.initial_control)),
            },
            "command_options": dict(self.command_options),
        }

    # derived objects --------------------------------------------------------

    def build_coefficients(self):
        return builtin_problem(self.problem_name, **self.problem_params)

    def sensitivity_params(self):
        return self.optimizer.sensitivity

    def control_path(self):
        values = np.asarray(self.initial_control, dtype=float)
        if values.shape == (1,):
            values = np.full(self.N, values[0])
        return ControlPath(values)


def load_config(path):
    """Parse a strict config file (structured text, nested tables)."""
    with open(path, "r", encoding="utf-8") as handle:
        try:
            raw = json.load(handle)
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# result manifest


@dataclass(frozen=True)
class ResultManifest:
    """Config echo plus the command's outputs, fully JSON-serializable."""

    command: str
    version: str
    reference_mode: bool
    config: dict
    status: str  # "ok" or "failed"
    failure: object  # str when failed, else None
    outputs: dict
    warnings: tuple
    wall_time: float

    def to_dict(self):
        return {
            "command": self.command, "version": self.version,
            "reference_mode": self.reference_mode, "config": self.config,
            "status": self.status, "failure": self.failure,
            "outputs": self.outputs, "warnings": list(self.warnings),
            "wall_time": self.wall_time,
        }


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, float) and not np.isfinite(value):
        return repr(value)  # JSON has no inf/nan; keep a readable token
    return value


def manifest_json(manifest):
    return json.dumps(_jsonable(manifest.to_dict()), sort_keys=True, indent=2) + "\n"


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(manifest_json(manifest))
    return path


# ---------------------------------------------------------------------------
# command pipelines


def _options(config, allowed):
    _check_keys(config.command_options, "command_options", allowed)
    return config.command_options


def _picard_block(sol):
    return {"iterations": sol.iterations, "converged": bool(sol.converged),
            "distances": [float(d) for d in sol.history],
            "decoupled": bool(sol.decoupled), "events": list(sol.events)}


def _solve_once(config, coeffs, noise):
    sol = picard_solve(coeffs, noise, config.control_path(), config.x0,
                       params=config.picard)
    return sol


def _run_solve(config, coeffs, noise, warnings):
    _options(config, ())
    sol = _solve_once(config, coeffs, noise)
    ens = sol.ensemble
    cost = cost_functional(coeffs, ens)
    phi_term = as_particles(coeffs.Phi(ens.X[:, config.N],
                                       coeffs.terminal_law(ens)), config.M)
    outputs = {
        "cost": {"value": cost.value, "stderr": cost.stderr},
        "terminal_exact": bool(np.array_equal(ens.Y[:, config.N], phi_term)),
        "x_terminal": {"mean": float(ens.X[:, config.N].mean()),
                       "var": float(ens.X[:, config.N].var())},
        "z_sup": float(sol.z_sup),
        "picard": _picard_block(sol),
    }
    warnings.extend(sol.events)
    failure = None if sol.converged else "coupling iteration did not converge"
    return outputs, failure


def _run_gradient_check(config, coeffs, noise, warnings):
    options = _options(config, ("fd_rho", "fd_nodes"))
    sol = _solve_once(config, coeffs, noise)
    adjoint = solve_adjoint(coeffs, sol, params=config.sensitivity_params())
    grad = gradient_DvH(coeffs, sol, adjoint)
    grid = noise.grid
    nodes = options.get("fd_nodes", "all")
    if nodes == "all":
        nodes = list(range(config.N))
    elif nodes == "none":
        nodes = []
    else:
        nodes = [_require_int(n, "fd_nodes entry") for n in nodes]
        if any(n < 0 or n >= config.N for n in nodes):
            raise InvalidArgumentError("fd_nodes entries must lie in [0, N)")
    rho = float(options.get("fd_rho", 1e-3))
    if rho <= 0.0:
        raise InvalidArgumentError("fd_rho must be positive")

    fd_by_node = {}
    base_control = config.control_path()
    for node in nodes:
        bump = np.zeros(config.N)
        bump[node] = rho
        costs = []
        for shifted in (base_control.values + bump, base_control.values - bump):
            s = picard_solve(coeffs, noise, ControlPath(shifted), config.x0,
                             params=config.picard)
            costs.append(cost_functional(coeffs, s.ensemble).value)
        fd_by_node[node] = (costs[0] - costs[1]) / (2.0 * rho * grid.dt)

    table = []
    for i in range(config.N):
        row = {"node": i, "t": float(grid.left_nodes()[i]),
               "gradient": float(grad.values[i]), "stderr": float(grad.stderr[i]),
               "fd": fd_by_node.get(i)}
        row["abs_gap"] = (None if row["fd"] is None
                          else abs(row["fd"] - row["gradient"]))
        table.append(row)
    gaps = [row["abs_gap"] for row in table if row["abs_gap"] is not None]
    outputs = {"table": table, "fd_rho": rho,
               "max_abs_gap": max(gaps) if gaps else None,
               "gradient_sup": grad.sup_norm()}
    failure = None if sol.converged else "coupling iteration did not converge"
    return outputs, failure


def _direction_from_options(options, n):
    direction = options.get("direction", 1.0)
    if isinstance(direction, (list, tuple)):
        values = np.asarray([float(v) for v in direction])
        if values.shape != (n,):
            raise InvalidArgumentError(f"direction must have length N={n}")
        return values
    return np.full(n, float(direction))


def _run_duality_check(config, coeffs, noise, warnings):
    options = _options(config, ("direction",))
    direction = _direction_from_options(options, config.N)
    sol = _solve_once(config, coeffs, noise)
    params = config.sensitivity_params()
    variational = solve_variational(coeffs, sol, direction, params=params)
    adjoint = solve_adjoint(coeffs, sol, params=params)
    report = duality_check(coeffs, sol, direction, variational=variational,
                           adjoint=adjoint, params=params)
    outputs = {"lhs": report.lhs, "rhs": report.rhs,
               "residual": report.residual,
               "terms": dict(report.terms),
               "direction": [float(v) for v in direction],
               "variational_converged": bool(variational.converged),
               "adjoint_converged": bool(adjoint.converged)}
    failure = None
    if not sol.converged:
        failure = "coupling iteration did not converge"
    elif not (variational.converged and adjoint.converged):
        failure = "sensitivity iteration did not converge"
    return outputs, failure


def _run_picard_diagnose(config, coeffs, noise, warnings):
    _options(config, ())
    sol = _solve_once(config, coeffs, noise)
    distances = [float(d) for d in sol.history]
    ratios = [distances[i + 1] / distances[i] if distances[i] > 0.0 else None
              for i in range(len(distances) - 1)]
    outputs = {"picard": _picard_block(sol), "ratios": ratios,
               "z_sup": float(sol.z_sup)}
    warnings.extend(sol.events)
    failure = None if sol.converged else "coupling iteration did not converge"
    return outputs, failure


def _run_optimize(config, coeffs, noise, warnings):
    options = _options(config, ("probe_samples", "probe_seed"))
    report = optimize(coeffs, noise, config.control_path(), config.bounds,
                      config.x0, params=config.optimizer)
    grid = noise.grid
    history = [{"iteration": r.iteration, "cost": r.cost,
                "cost_stderr": r.cost_stderr, "gradient_sup": r.gradient_sup,
                "step_size": r.step_size,
                "projection_residual": r.projection_residual}
               for r in report.history]
    verdict = report.verdict
    outputs = {
        "history": history,
        "final_control": [float(v) for v in report.final_control.values],
        "times": [float(t) for t in grid.left_nodes()],
        "verdict": {"verdict": verdict.verdict, "worst_node": verdict.worst_node,
                    "worst_violation": verdict.worst_violation,
                    "tolerance": verdict.tolerance,
                    "effective_tolerance": verdict.effective_tolerance},
        "converged": bool(report.converged),
        "iterations": report.iterations,
        "events": list(report.events),
    }
    warnings.extend(report.events)
    probe_samples = options.get("probe_samples", 0)
    if probe_samples:
        probe = sufficiency_probe(
            coeffs, noise, report.final_control, config.bounds, config.x0,
            n_samples=_require_int(probe_samples, "probe_samples"),
            seed=_require_int(options.get("probe_seed", config.seed), "probe_seed"),
            picard_params=config.picard)
        outputs["probe"] = {"samples": probe.samples,
                            "violations": probe.violations,
                            "inconclusive": probe.inconclusive,
                            "candidate_cost": probe.candidate_cost}
    failure = None if report.converged else "descent did not reach the tolerance"
    return outputs, failure


def _run_validate_coeffs(config, coeffs, noise, warnings):
    options = _options(config, ("delta", "threshold", "probe_particle"))
    sol = _solve_once(config, coeffs, noise)
    report = validate_partials(
        coeffs, sol.ensemble,
        delta=float(options.get("delta", 1e-6)),
        threshold=float(options.get("threshold", 1e-4)),
        probe_particle=_require_int(options.get("probe_particle", 0),
                                    "probe_particle"))
    checks = [{"coefficient": c.coefficient, "argument": c.argument,
               "node": c.node, "reference": c.reference, "computed": c.computed,
               "rel_error": c.rel_error, "passed": bool(c.passed)}
              for c in report.checks]
    all_passed = all(c.passed for c in report.checks)
    outputs = {"checks": checks, "threshold": report.threshold,
               "all_passed": bool(all_passed)}
    failure = None if all_passed else "declared partial derivatives disagree with finite differences"
    return outputs, failure


def _run_diff_quotient(config, coeffs, noise, warnings):
    options = _options(config, ("direction", "rhos"))
    direction = _direction_from_options(options, config.N)
    rhos = options.get("rhos", (1e-1, 1e-2, 1e-3))
    rhos = tuple(float(r) for r in rhos)
    table = difference_quotient_check(
        coeffs, noise, config.control_path(), config.x0, direction,
        rhos=rhos, picard_params=config.picard,
        params=config.sensitivity_params())
    rows = [{"rho": r.rho, "err_x": r.err_x, "err_y": r.err_y, "err_z": r.err_z}
            for r in table.rows]
    outputs = {"rows": rows, "slopes": dict(table.slopes),
               "variational_converged": bool(table.variational.converged)}
    failure = None if table.variational.converged else \
        "sensitivity iteration did not converge"
    return outputs, failure


_PIPELINES = {
    "solve": _run_solve,
    "gradient-check": _run_gradient_check,
    "duality-check": _run_duality_check,
    "picard-diagnose": _run_picard_diagnose,
    "optimize": _run_optimize,
    "validate-coeffs": _run_validate_coeffs,
    "diff-quotient": _run_diff_quotient,
}


def run(config, command, reference_mode=False):
    """Execute one command pipeline and assemble its manifest.

    Invalid configs and unknown commands raise before compute; convergence
    failures are embedded in the manifest (status "failed") instead of
    raising, so diagnostics always reach the output directory.
    """
    if command not in COMMANDS:
        raise InvalidArgumentError(
            f"unknown command {command!r}; available: {', '.join(COMMANDS)}")
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    effective = config
    if reference_mode and config.workers != 1:
        effective = dataclasses.replace(config, workers=1)

    start = time.perf_counter()
    coeffs = effective.build_coefficients()
    grid = make_time_grid(effective.T, effective.N)
    noise = simulate_noise(grid, effective.M, effective.seed)
    warnings = []
    try:
        outputs, failure = _PIPELINES[command](effective, coeffs, noise, warnings)
    except ConvergenceFailureError as exc:
        outputs, failure = {}, str(exc)
    if failure is not None:
        warnings.append(failure)
    wall = 0.0 if reference_mode else time.perf_counter() - start
    if reference_mode:
        outputs = _zero_timings(outputs)
    return ResultManifest(command=command, version=__version__,
                          reference_mode=bool(reference_mode),
                          config=effective.to_dict(),
                          status="ok" if failure is None else "failed",
                          failure=failure, outputs=_jsonable(outputs),
                          warnings=tuple(warnings), wall_time=wall)


def _zero_timings(value):
    if isinstance(value, dict):
        return {k: (0.0 if k.endswith("wall_time") else _zero_timings(v))
                for k, v in value.items()}
    if isinstance(value, list):
        return [_zero_timings(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# tabular plot data


_SERIES = ("picard-history", "rho-table", "gradient-profile", "cost-history",
           "control-profile")


def _series_rows(manifest, which):
    """(header, rows) for one plot series, or SeriesNotFoundError."""
    out = manifest.outputs if isinstance(manifest, ResultManifest) else manifest["outputs"]
    if which == "picard-history":
        block = out.get("picard", {})
        distances = block.get("distances", [])
        if not distances:
            raise SeriesNotFoundError("manifest holds no coupling history")
        return (("iteration", "distance"),
                [(i + 1, d) for i, d in enumerate(distances)])
    if which == "rho-table":
        rows = out.get("rows", [])
        if not rows:
            raise SeriesNotFoundError("manifest holds no difference-quotient table")
        return (("rho", "err_x", "err_y", "err_z"),
                [(r["rho"], r["err_x"], r["err_y"], r["err_z"]) for r in rows])
    if which == "gradient-profile":
        table = out.get("table", [])
        if not table:
            raise SeriesNotFoundError("manifest holds no gradient table")
        if all(r["fd"] is not None for r in table):
            return (("node", "t", "gradient", "stderr", "fd"),
                    [(r["node"], r["t"], r["gradient"], r["stderr"], r["fd"])
                     for r in table])
        return (("node", "t", "gradient", "stderr"),
                [(r["node"], r["t"], r["gradient"], r["stderr"]) for r in table])
    if which == "cost-history":
        history = out.get("history", [])
        if not history:
            raise SeriesNotFoundError("manifest holds no descent history")
        return (("iteration", "cost", "cost_stderr", "gradient_sup",
                 "projection_residual"),
                [(r["iteration"], r["cost"], r["cost_stderr"], r["gradient_sup"],
                  r["projection_residual"]) for r in history])
    if which == "control-profile":
        control = out.get("final_control", [])
        times = out.get("times", [])
        if not control or not times:
            raise SeriesNotFoundError("manifest holds no control profile")
        return (("node", "t", "control"),
                [(i, t, u) for i, (t, u) in enumerate(zip(times, control))])
    raise SeriesNotFoundError(
        f"unknown series {which!r}; available: {', '.join(_SERIES)}")


def available_series(manifest):
    """Names of the plot series this manifest can provide."""
    found = []
    for which in _SERIES:
        try:
            _series_rows(manifest, which)
        except SeriesNotFoundError:
            continue
        found.append(which)
    return tuple(found)


def _format_cell(value):
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_plot_data(manifest, which, path):
    """Write one series as a comma-separated table (header row, UTF-8)."""
    header, rows = _series_rows(manifest, which)
    lines = [",".join(header)]
    lines.extend(",".join(_format_cell(cell) for cell in row) for row in rows)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")
    return path
