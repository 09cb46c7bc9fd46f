"""Configuration, problem-family construction, and the command line.

Subcommands: ``solve`` runs the optimizer and writes report.json plus CSV
marginal/policy tables; ``validate`` simulates the chain under a previously
extracted policy and cross-checks it against the solver's terminal cost
marginal; ``oracle`` enumerates deterministic policies on tiny instances.

The JSON config schema and the CSV column orders are documented in the
README; unknown keys are rejected with their full key path.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, PolicyEnumerationError, RiskflowError
from .forward import (DiscreteDistribution, assemble_forward_program,
                      write_trajectory_csv)
from .generator import (ControlledGenerator, augment_generator,
                        discretize_circle_diffusion, load_generator_triplets)
from .grids import build_circle_grid, build_uniform_grid
from .risk import RiskSpec
from .solve import (LpFailureError, MarkovPolicy, SolveReport,
                    optimize_linear_risk, optimize_smooth_risk)
from .validate import McConfig, simulate_paths, wasserstein1, enumerate_policies

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_MAX_ITER = 4
EXIT_IO = 5


@dataclass(frozen=True)
class SolverOptions:
    tol_gap: float = 1e-9
    max_iter: int = 200
    max_fw_iter: int = 50
    fw_tol: float = 1e-8
    mass_floor: float = 1e-12


@dataclass(frozen=True)
class ValidationOptions:
    paths: int = 100_000
    seed: int = 0


@dataclass(frozen=True)
class ProblemSpec:
    """Fully resolved problem description.

    The ``circle_follower`` defaults are the reference pursuit instance:
    21 points on every axis, horizon 25, actions in [-0.5, 0.5], sigma 1,
    movement cost weight 2, discount 0.25, entropic parameter 1, and a
    point-mass start at angle 0 with cost ceiling 2.5.
    """

    family: str = "circle_follower"
    sigma: float = 1.0
    gamma: float = 2.0
    alpha: float = 0.25
    a_min: float = -0.5
    a_max: float = 0.5
    y_max: Optional[float] = None
    horizon: float = 25.0
    n_x: int = 21
    n_y: int = 21
    n_a: int = 21
    n_t: int = 21
    risk_kind: str = "entropic"
    theta: float = 1.0
    beta: float = 0.0
    nu_point: Optional[int] = 0
    nu_vector: Optional[tuple] = None
    terminal_cost: Optional[tuple] = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    validation: ValidationOptions = field(default_factory=ValidationOptions)
    # custom family inputs
    generator_file: Optional[str] = None
    n_states: Optional[int] = None
    actions: Optional[tuple] = None
    cost_constant: Optional[float] = None
    cost_table: Optional[tuple] = None

    @property
    def y_max_resolved(self) -> float:
        if self.y_max is not None:
            return self.y_max
        return 2.0 + self.gamma * max(self.a_min ** 2, self.a_max ** 2)


_RISK_KINDS = ("expectation", "entropic", "entropic_linear", "mean_semideviation")


def _expect_keys(obj: dict, allowed: dict, path: str):
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{path}{key}'")


def _build_spec(raw: dict) -> ProblemSpec:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    top = {
        "family": str, "sigma": float, "gamma": float, "alpha": float,
        "a_min": float, "a_max": float, "y_max": float, "horizon": float,
        "n_x": int, "n_y": int, "n_a": int, "n_t": int,
        "risk": dict, "nu": dict, "terminal_cost": list,
        "solver": dict, "validation": dict,
        "generator_file": str, "n_states": int, "actions": list, "cost": dict,
    }
    _expect_keys(raw, top, "")
    kw = {}
    for key in ("family", "sigma", "gamma", "alpha", "a_min", "a_max", "y_max",
                "horizon", "n_x", "n_y", "n_a", "n_t", "generator_file", "n_states"):
        if key in raw and raw[key] is not None:
            kw[key] = top[key](raw[key])
    if "actions" in raw and raw["actions"] is not None:
        kw["actions"] = tuple(float(a) for a in raw["actions"])
    if "terminal_cost" in raw and raw["terminal_cost"] is not None:
        kw["terminal_cost"] = tuple(float(v) for v in raw["terminal_cost"])

    risk = raw.get("risk", {})
    _expect_keys(risk, {"kind": str, "theta": float, "beta": float}, "risk.")
    if "kind" in risk:
        kw["risk_kind"] = str(risk["kind"])
    if "theta" in risk:
        kw["theta"] = float(risk["theta"])
    if "beta" in risk:
        kw["beta"] = float(risk["beta"])

    nu = raw.get("nu", {})
    _expect_keys(nu, {"point": int, "vector": list}, "nu.")
    if "point" in nu and "vector" in nu:
        raise ConfigError("nu.point and nu.vector are mutually exclusive")
    if "point" in nu:
        kw["nu_point"], kw["nu_vector"] = int(nu["point"]), None
    elif "vector" in nu:
        kw["nu_point"], kw["nu_vector"] = None, tuple(float(v) for v in nu["vector"])

    sol = raw.get("solver", {})
    sol_fields = {f.name: f.type for f in dataclasses.fields(SolverOptions)}
    _expect_keys(sol, sol_fields, "solver.")
    kw["solver"] = SolverOptions(**{k: type(getattr(SolverOptions(), k))(v)
                                    for k, v in sol.items()})
    val = raw.get("validation", {})
    _expect_keys(val, {f.name: f.type for f in dataclasses.fields(ValidationOptions)},
                 "validation.")
    kw["validation"] = ValidationOptions(**{k: int(v) for k, v in val.items()})

    cost = raw.get("cost", {})
    _expect_keys(cost, {"constant": float, "table": list}, "cost.")
    if "constant" in cost:
        kw["cost_constant"] = float(cost["constant"])
    if "table" in cost:
        kw["cost_table"] = tuple(tuple(float(v) for v in row) for row in cost["table"])

    spec = ProblemSpec(**kw)
    _check_spec(spec)
    return spec


def _check_spec(spec: ProblemSpec):
    def bad(path, msg):
        raise ConfigError(f"config key {path}: {msg}")

    if spec.family not in ("circle_follower", "custom"):
        bad("family", f"must be circle_follower or custom, got {spec.family!r}")
    if spec.risk_kind not in _RISK_KINDS:
        bad("risk.kind", f"must be one of {_RISK_KINDS}, got {spec.risk_kind!r}")
    if spec.theta < 0:
        bad("risk.theta", f"must be nonnegative, got {spec.theta}")
    if not 0.0 <= spec.beta <= 1.0:
        bad("risk.beta", f"must be in [0, 1], got {spec.beta}")
    if spec.n_t < 2:
        bad("n_t", f"need at least two time points, got {spec.n_t}")
    if spec.n_y < 2:
        bad("n_y", f"need at least two cost levels, got {spec.n_y}")
    if spec.horizon <= 0:
        bad("horizon", f"must be positive, got {spec.horizon}")
    if spec.alpha < 0:
        bad("alpha", f"must be nonnegative, got {spec.alpha}")
    if spec.family == "circle_follower":
        if spec.sigma <= 0:
            bad("sigma", f"must be positive, got {spec.sigma}")
        if spec.gamma < 0:
            bad("gamma", f"must be nonnegative, got {spec.gamma}")
        if spec.n_x < 3:
            bad("n_x", f"circle grid needs at least 3 points, got {spec.n_x}")
        if spec.n_a < 2:
            bad("n_a", f"action grid needs at least 2 points, got {spec.n_a}")
        if not spec.a_min < spec.a_max:
            bad("a_min", f"need a_min < a_max, got [{spec.a_min}, {spec.a_max}]")
    else:
        if spec.generator_file is None:
            bad("generator_file", "required for the custom family")
        if spec.actions is None or len(spec.actions) == 0:
            bad("actions", "custom family needs an explicit action list")
        if spec.cost_constant is None and spec.cost_table is None:
            bad("cost", "custom family needs cost.constant or cost.table")
    if spec.y_max is not None and spec.y_max <= 0:
        bad("y_max", f"must be positive, got {spec.y_max}")
    n_x = spec.n_x if spec.family == "circle_follower" else spec.n_states
    if spec.nu_vector is not None:
        if n_x is not None and len(spec.nu_vector) != n_x:
            bad("nu.vector", f"length {len(spec.nu_vector)} != n_x {n_x}")
        arr = np.asarray(spec.nu_vector)
        if arr.min() < 0 or abs(arr.sum() - 1.0) > 1e-10:
            bad("nu.vector", "must be a probability vector")
    elif spec.nu_point is not None and n_x is not None:
        if not 0 <= spec.nu_point < n_x:
            bad("nu.point", f"index {spec.nu_point} outside 0..{n_x - 1}")
    if spec.terminal_cost is not None:
        if n_x is not None and len(spec.terminal_cost) != n_x:
            bad("terminal_cost", f"length {len(spec.terminal_cost)} != n_x {n_x}")
        if min(spec.terminal_cost) < 0:
            bad("terminal_cost", "must be nonnegative")


def load_config(path) -> ProblemSpec:
    """Read and validate a JSON problem configuration."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return _build_spec(raw)


def serialize(spec: ProblemSpec) -> dict:
    """Inverse of load_config: a dict that reproduces ``spec`` exactly."""
    out = {
        "family": spec.family, "sigma": spec.sigma, "gamma": spec.gamma,
        "alpha": spec.alpha, "a_min": spec.a_min, "a_max": spec.a_max,
        "horizon": spec.horizon, "n_x": spec.n_x, "n_y": spec.n_y,
        "n_a": spec.n_a, "n_t": spec.n_t,
        "risk": {"kind": spec.risk_kind, "theta": spec.theta, "beta": spec.beta},
        "solver": dataclasses.asdict(spec.solver),
        "validation": dataclasses.asdict(spec.validation),
    }
    if spec.y_max is not None:
        out["y_max"] = spec.y_max
    if spec.nu_vector is not None:
        out["nu"] = {"vector": list(spec.nu_vector)}
    else:
        out["nu"] = {"point": spec.nu_point}
    if spec.terminal_cost is not None:
        out["terminal_cost"] = list(spec.terminal_cost)
    if spec.family == "custom":
        out["generator_file"] = spec.generator_file
        if spec.n_states is not None:
            out["n_states"] = spec.n_states
        out["actions"] = list(spec.actions)
        cost = {}
        if spec.cost_constant is not None:
            cost["constant"] = spec.cost_constant
        if spec.cost_table is not None:
            cost["table"] = [list(r) for r in spec.cost_table]
        out["cost"] = cost
    return out


# ---------------------------------------------------------------------------
# Problem assembly


@dataclass(frozen=True)
class ProblemPieces:
    base: ControlledGenerator
    cost: np.ndarray
    a_values: np.ndarray
    y_grid: object
    t_grid: object
    nu: np.ndarray
    initial_xy: DiscreteDistribution
    v: Optional[np.ndarray]


def build_problem(spec: ProblemSpec) -> ProblemPieces:
    """Materialize grids, generator, cost table, and initial law."""
    if spec.family == "circle_follower":
        x_grid = build_circle_grid(spec.n_x)
        a_values = np.linspace(spec.a_min, spec.a_max, spec.n_a)
        base = ControlledGenerator(
            per_action=tuple(discretize_circle_diffusion(x_grid, a, spec.sigma)
                             for a in a_values),
            state_grid=x_grid)
        cost = (x_grid.distance(x_grid.points, 0.0)[:, None] ** 2
                + spec.gamma * a_values[None, :] ** 2)
        n_x = spec.n_x
        x_points = x_grid.points
    else:
        base = load_generator_triplets(spec.generator_file, n_states=spec.n_states,
                                       n_actions=len(spec.actions))
        a_values = np.asarray(spec.actions, dtype=float)
        n_x = base.dim
        x_points = np.arange(n_x, dtype=float)
        if spec.cost_table is not None:
            cost = np.asarray(spec.cost_table, dtype=float)
            if cost.shape != (n_x, len(a_values)):
                raise ConfigError(
                    f"config key cost.table: shape {cost.shape} != ({n_x}, {len(a_values)})")
        else:
            cost = np.full((n_x, len(a_values)), float(spec.cost_constant))
    y_grid = build_uniform_grid(0.0, spec.y_max_resolved, spec.n_y)
    t_grid = build_uniform_grid(0.0, spec.horizon, spec.n_t)
    if spec.nu_vector is not None:
        nu = np.asarray(spec.nu_vector, dtype=float)
    else:
        nu = np.zeros(n_x)
        nu[spec.nu_point] = 1.0
    if len(nu) != n_x:
        raise ConfigError(f"config key nu: length {len(nu)} != n_x {n_x}")
    initial = np.zeros((n_x, spec.n_y))
    initial[:, 0] = nu
    initial_xy = DiscreteDistribution(axes=("x", "y"),
                                      coords=(x_points, y_grid.points), mass=initial)
    v = None if spec.terminal_cost is None else np.asarray(spec.terminal_cost, dtype=float)
    return ProblemPieces(base=base, cost=cost, a_values=a_values, y_grid=y_grid,
                         t_grid=t_grid, nu=nu, initial_xy=initial_xy, v=v)


def _risk_spec(spec: ProblemSpec) -> RiskSpec:
    if spec.risk_kind in ("entropic", "entropic_linear"):
        return RiskSpec(kind="entropic_linear", theta=spec.theta)
    if spec.risk_kind == "expectation":
        return RiskSpec(kind="expectation")
    return RiskSpec(kind="mean_semideviation", beta=spec.beta)


def _write_policy_csvs(policy: MarkovPolicy, pieces: ProblemPieces, out_dir):
    t = pieces.t_grid.points
    x = (pieces.base.state_grid.points if pieces.base.state_grid is not None
         else np.arange(pieces.base.dim, dtype=float))
    y = pieces.y_grid.points
    a = pieces.a_values
    with open(out_dir / "policy.csv", "w", newline="") as fh:
        fh.write("t,x,y,a,prob\n")
        for k in range(policy.probs.shape[0]):
            for i in range(len(x)):
                for j in range(len(y)):
                    row = policy.probs[k, i, j]
                    for m in range(len(a)):
                        fh.write(f"{t[k]:.17g},{x[i]:.17g},{y[j]:.17g},"
                                 f"{a[m]:.17g},{row[m]:.17g}\n")
    with open(out_dir / "policy_mask.csv", "w", newline="") as fh:
        fh.write("t,x,y,reachable\n")
        for k in range(policy.mask.shape[0]):
            for i in range(len(x)):
                for j in range(len(y)):
                    fh.write(f"{t[k]:.17g},{x[i]:.17g},{y[j]:.17g},"
                             f"{int(policy.mask[k, i, j])}\n")


def run(spec: ProblemSpec, out_dir) -> SolveReport:
    """Solve the configured problem and write the report artifacts.

    Writes report.json, marginal_x.csv (t,x,mass), marginal_y.csv
    (t,y,mass), policy.csv (t,x,y,a,prob), and policy_mask.csv into
    ``out_dir``.
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pieces = build_problem(spec)
    aug = augment_generator(pieces.base, pieces.cost, spec.alpha,
                            pieces.y_grid, t=0.0)
    fp = assemble_forward_program(aug, pieces.initial_xy, pieces.t_grid,
                                  a_values=pieces.a_values)
    risk = _risk_spec(spec)
    opts = spec.solver
    if risk.is_linear:
        report = optimize_linear_risk(fp, risk, v=pieces.v, tol_gap=opts.tol_gap,
                                      max_iter=opts.max_iter,
                                      mass_floor=opts.mass_floor)
    else:
        report = optimize_smooth_risk(fp, risk, v=pieces.v,
                                      max_fw_iter=opts.max_fw_iter, tol=opts.fw_tol,
                                      tol_gap=opts.tol_gap, max_iter=opts.max_iter,
                                      mass_floor=opts.mass_floor)
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_trajectory_csv(report.trajectory, out / "marginal_x.csv", axes=("x",))
    write_trajectory_csv(report.trajectory, out / "marginal_y.csv", axes=("y",))
    _write_policy_csvs(report.policy, pieces, out)
    return report


def _read_policy(report_dir, pieces: ProblemPieces, n_t: int) -> MarkovPolicy:
    from pathlib import Path

    rep = Path(report_dir)
    raw = np.loadtxt(rep / "policy.csv", delimiter=",", skiprows=1)
    mask_raw = np.loadtxt(rep / "policy_mask.csv", delimiter=",", skiprows=1)
    n_x, n_y, n_a = pieces.base.dim, pieces.y_grid.n, len(pieces.a_values)
    probs = raw[:, 4].reshape(n_t, n_x, n_y, n_a)
    mask = mask_raw[:, 3].reshape(n_t, n_x, n_y).astype(bool)
    return MarkovPolicy(probs=probs, mask=mask)


def run_validation(spec: ProblemSpec, report_dir, paths: Optional[int] = None,
                   seed: Optional[int] = None) -> dict:
    """Monte Carlo cross-check of a solve run; writes mc_summary.json."""
    from pathlib import Path

    rep = Path(report_dir)
    pieces = build_problem(spec)
    policy = _read_policy(rep, pieces, spec.n_t)
    cfg = McConfig(n_paths=paths if paths is not None else spec.validation.paths,
                   seed=seed if seed is not None else spec.validation.seed)
    result = simulate_paths(pieces.base, policy, pieces.cost, spec.alpha,
                            pieces.y_grid, pieces.nu, pieces.t_grid, cfg)
    marg = np.loadtxt(rep / "marginal_y.csv", delimiter=",", skiprows=1)
    t_last = marg[:, 0].max()
    rows = marg[marg[:, 0] == t_last]
    lp_dist = DiscreteDistribution(axes=("y",), coords=(rows[:, 1],), mass=rows[:, 2])
    from .forward import distribution_from_samples

    w1 = wasserstein1(distribution_from_samples(result.samples), lp_dist)
    summary = {
        "paths": cfg.n_paths,
        "seed": cfg.seed,
        "mean": float(result.samples.mean()),
        "std": float(result.samples.std(ddof=1)) if cfg.n_paths > 1 else 0.0,
        "stderr": result.stderr,
        "w1_vs_lp": w1,
        "grid_allowance": pieces.y_grid.spacing,
        "stderr_allowance": 3.0 * result.stderr,
        "fallback_lookups": result.fallback_lookups,
    }
    with open(rep / "mc_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(rep / "mc_samples.csv", "w", newline="") as fh:
        fh.write("y\n")
        fh.writelines(f"{v:.17g}\n" for v in result.samples)
    return summary


def run_oracle(spec: ProblemSpec) -> dict:
    """Enumerate deterministic policies; cross-check with the LP when linear."""
    pieces = build_problem(spec)
    risk = _risk_spec(spec)
    enum_spec = (RiskSpec(kind="entropic", theta=spec.theta)
                 if risk.kind == "entropic_linear" else risk)
    result = enumerate_policies(pieces.base, pieces.cost, spec.alpha, pieces.y_grid,
                                pieces.t_grid, pieces.nu, enum_spec, v=pieces.v)
    out = {"enumeration_value": result.value, "n_policies": result.n_policies}
    if risk.is_linear:
        aug = augment_generator(pieces.base, pieces.cost, spec.alpha,
                                pieces.y_grid, t=0.0)
        fp = assemble_forward_program(aug, pieces.initial_xy, pieces.t_grid,
                                      a_values=pieces.a_values)
        report = optimize_linear_risk(fp, risk, v=pieces.v,
                                      tol_gap=spec.solver.tol_gap,
                                      max_iter=spec.solver.max_iter)
        out["lp_value"] = report.rho_star
    return out


# ---------------------------------------------------------------------------
# Entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="riskflow",
                                     description="Risk-aware control of Markov chains "
                                                 "via forward-equation linear programs")
    sub = parser.add_subparsers(dest="command", required=True)
    p_solve = sub.add_parser("solve", help="solve a configured problem")
    p_solve.add_argument("--config", required=True)
    p_solve.add_argument("--out", required=True)
    p_val = sub.add_parser("validate", help="Monte Carlo cross-check of a solve run")
    p_val.add_argument("--config", required=True)
    p_val.add_argument("--report", required=True)
    p_val.add_argument("--paths", type=int, default=None)
    p_val.add_argument("--seed", type=int, default=None)
    p_orc = sub.add_parser("oracle", help="brute-force enumeration on a tiny instance")
    p_orc.add_argument("--config", required=True)
    args = parser.parse_args(argv)

    try:
        spec = load_config(args.config)
        if args.command == "solve":
            report = run(spec, args.out)
            print(f"rho_star={report.rho_star:.6g} gap={report.duality_gap:.2e} "
                  f"status={report.status}")
            return EXIT_OK if report.status == "optimal" else EXIT_MAX_ITER
        if args.command == "validate":
            summary = run_validation(spec, args.report, args.paths, args.seed)
            print(json.dumps(summary, indent=2, sort_keys=True))
            return EXIT_OK
        summary = run_oracle(spec)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LpFailureError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE if exc.status in ("infeasible", "unbounded") else EXIT_MAX_ITER
    except PolicyEnumerationError as exc:
        print(f"enumeration refused: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RiskflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
