"""Experiment harness: config ingestion, maneuver runs, solver comparison,
Monte Carlo sweeps, and structured result persistence.

Runs are described by a single JSON document (see ``ExperimentConfig``);
outputs are CSV time series (plot-tool agnostic, 15 significant digits) and
JSON reports.  All numerical content is deterministic for a fixed (config,
seed) pair; wall-clock timings are the one exception and live in clearly
named columns/fields.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .algebra import log_so3
from .ilqr import ILQRConfig, LineSearchExhaustedError, ilqr_solve
from .mpsp import (
    MPSPConfig,
    build_chain,
    deviation_allowing_pi,
    linearize_rollout,
    mpsp_solve,
    mpsp_update_increment,
    rank_certificate,
)
from .tpbvp import ShootingProblem, seed_from_controls, solve_tpbvp
from .vehicles import (
    SingleMainRotorHelicopter,
    VariablePitchQuadrotor,
    VehicleState,
    load_smrh_params,
    load_vpq_params,
)

EULER_CONVENTION = "ZYX"
SOLVERS = ("mpsp_increment", "mpsp_effort", "ilqr", "tpbvp")


class ConfigError(ValueError):
    """Invalid or unknown configuration content, with a dotted path."""


# ---------------------------------------------------------------------------
# Euler-angle conversions (ZYX / yaw-pitch-roll)
# ---------------------------------------------------------------------------


def euler_to_rotation(phi_deg, theta_deg, psi_deg):
    """Rotation matrix from ZYX Euler angles in degrees: Rz(psi) Ry(theta) Rx(phi)."""
    phi, theta, psi = np.radians([phi_deg, theta_deg, psi_deg])
    cphi, sphi = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cpsi, spsi = np.cos(psi), np.sin(psi)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cphi, -sphi], [0.0, sphi, cphi]])
    ry = np.array([[cth, 0.0, sth], [0.0, 1.0, 0.0], [-sth, 0.0, cth]])
    rz = np.array([[cpsi, -spsi, 0.0], [spsi, cpsi, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def rotation_to_euler(rot):
    """ZYX Euler angles in degrees; at theta = +-90 deg, psi is set to zero."""
    rot = np.asarray(rot, dtype=float)
    sin_theta = -rot[2, 0]
    if abs(sin_theta) >= 1.0 - 1e-12:
        theta = np.copysign(np.pi / 2.0, sin_theta)
        if sin_theta > 0.0:
            phi = np.arctan2(rot[0, 1], rot[1, 1])
        else:
            phi = np.arctan2(-rot[0, 1], rot[1, 1])
        psi = 0.0
    else:
        theta = np.arcsin(np.clip(sin_theta, -1.0, 1.0))
        phi = np.arctan2(rot[2, 1], rot[2, 2])
        psi = np.arctan2(rot[1, 0], rot[0, 0])
    return np.degrees([phi, theta, psi])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _reject_unknown(data, known, path):
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown configuration key")


def _triple(data, key, path, default=(0.0, 0.0, 0.0)):
    value = data.get(key, list(default))
    arr = np.asarray(value, dtype=float)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{path}.{key}: expected three finite numbers")
    return arr


@dataclass
class BoundaryCondition:
    """Attitude as ZYX Euler degrees, body rates in deg/s, SMRH moment in N m."""

    euler_deg: np.ndarray
    rate_deg_s: np.ndarray
    moment_nm: np.ndarray

    @classmethod
    def from_dict(cls, data, path):
        _reject_unknown(data, {"euler_deg", "rate_deg_s", "moment_nm"}, path)
        return cls(
            _triple(data, "euler_deg", path),
            _triple(data, "rate_deg_s", path),
            _triple(data, "moment_nm", path),
        )

    def to_dict(self):
        return {
            "euler_deg": list(self.euler_deg),
            "rate_deg_s": list(self.rate_deg_s),
            "moment_nm": list(self.moment_nm),
        }


@dataclass
class MonteCarloConfig:
    trials: int = 25
    mode: str = "random_initial_condition"
    attitude_range_deg: float = 10.0
    rate_range_deg_s: float = 10.0
    moment_range_nm: float = 0.1
    control_range: float = 0.5
    workers: int = 1

    @classmethod
    def from_dict(cls, data, path="monte_carlo"):
        known = {f.name for f in cls.__dataclass_fields__.values()}
        _reject_unknown(data, known, path)
        cfg = cls(**data)
        if cfg.trials < 1:
            raise ConfigError(f"{path}.trials: need at least one trial")
        if cfg.mode not in ("random_initial_condition", "random_control_guess"):
            raise ConfigError(f"{path}.mode: unknown mode '{cfg.mode}'")
        for name in ("attitude_range_deg", "rate_range_deg_s", "moment_range_nm",
                     "control_range"):
            if getattr(cfg, name) < 0.0:
                raise ConfigError(f"{path}.{name}: ranges must be nonnegative")
        if cfg.workers < 1:
            raise ConfigError(f"{path}.workers: need at least one worker")
        return cfg


_MPSP_KEYS = {
    "control_weight", "max_iterations", "terminal_tolerance", "update_variant",
}
_ILQR_KEYS = {
    "terminal_weight", "control_weight", "armijo_constant", "alphas",
    "max_iterations", "cost_tolerance", "stall_tolerance",
}
_TPBVP_KEYS = {
    "control_weight", "substeps", "max_iterations", "residual_tolerance",
    "initial_costate",
}


@dataclass
class ExperimentConfig:
    """One maneuver experiment: vehicle, solver, horizon, boundaries, seeds."""

    vehicle: str = "vpq"
    solver: str = "mpsp_increment"
    t_f: float = 0.6
    h: float = 0.001
    start: BoundaryCondition = field(
        default_factory=lambda: BoundaryCondition.from_dict({}, "start")
    )
    target: BoundaryCondition = field(
        default_factory=lambda: BoundaryCondition.from_dict({}, "target")
    )
    mpsp: dict = field(default_factory=dict)
    ilqr: dict = field(default_factory=dict)
    tpbvp: dict = field(default_factory=dict)
    monte_carlo: MonteCarloConfig = field(default_factory=MonteCarloConfig)
    vehicle_params: str | None = None
    seed: int = 0
    out_dir: str = "runs/out"
    compat_paper_matrices: bool = False

    @classmethod
    def from_dict(cls, data):
        known = {
            "vehicle", "solver", "t_f", "h", "start", "target", "mpsp", "ilqr",
            "tpbvp", "monte_carlo", "vehicle_params", "seed", "out_dir",
            "compat_paper_matrices",
        }
        _reject_unknown(data, known, "config")
        cfg = cls(
            vehicle=data.get("vehicle", "vpq"),
            solver=data.get("solver", "mpsp_increment"),
            t_f=float(data.get("t_f", 0.6)),
            h=float(data.get("h", 0.001)),
            start=BoundaryCondition.from_dict(data.get("start", {}), "start"),
            target=BoundaryCondition.from_dict(data.get("target", {}), "target"),
            mpsp=dict(data.get("mpsp", {})),
            ilqr=dict(data.get("ilqr", {})),
            tpbvp=dict(data.get("tpbvp", {})),
            monte_carlo=MonteCarloConfig.from_dict(
                data.get("monte_carlo", {}), "monte_carlo"
            ),
            vehicle_params=data.get("vehicle_params"),
            seed=int(data.get("seed", 0)),
            out_dir=str(data.get("out_dir", "runs/out")),
            compat_paper_matrices=bool(data.get("compat_paper_matrices", False)),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as err:
                raise ConfigError(f"config: invalid JSON ({err})") from err
        return cls.from_dict(data)

    def validate(self):
        if self.vehicle not in ("vpq", "smrh"):
            raise ConfigError(f"config.vehicle: unknown vehicle '{self.vehicle}'")
        if self.solver not in SOLVERS:
            raise ConfigError(f"config.solver: unknown solver '{self.solver}'")
        if self.h <= 0.0:
            raise ConfigError("config.h: step must be positive")
        if self.n_states < 3:
            raise ConfigError("config.t_f: horizon must span at least three states")
        _reject_unknown(self.mpsp, _MPSP_KEYS, "mpsp")
        _reject_unknown(self.ilqr, _ILQR_KEYS, "ilqr")
        _reject_unknown(self.tpbvp, _TPBVP_KEYS, "tpbvp")
        if self.vehicle == "vpq" and np.any(self.start.moment_nm != 0.0):
            raise ConfigError("start.moment_nm: the VPQ has no moment state")
        if self.vehicle == "vpq" and np.any(self.target.moment_nm != 0.0):
            raise ConfigError("target.moment_nm: the VPQ has no moment state")

    @property
    def n_states(self):
        return int(round(self.t_f / self.h))

    def to_dict(self):
        data = asdict(self)
        data["start"] = self.start.to_dict()
        data["target"] = self.target.to_dict()
        return data

    def override(self, dotted, value):
        """Set one leaf by dotted path, e.g. ``mpsp.max_iterations``."""
        parts = dotted.split(".")
        node = self
        for part in parts[:-1]:
            if isinstance(node, dict):
                node = node.setdefault(part, {})
            elif hasattr(node, part):
                node = getattr(node, part)
            else:
                raise ConfigError(f"config.{dotted}: no such configuration path")
        leaf = parts[-1]
        if isinstance(node, dict):
            node[leaf] = value
        elif hasattr(node, leaf):
            setattr(node, leaf, value)
        else:
            raise ConfigError(f"config.{dotted}: no such configuration path")


def build_vehicle(config):
    """Vehicle instance plus parameter provenance for the run report."""
    if config.vehicle == "vpq":
        params = load_vpq_params(config.vehicle_params)
        return VariablePitchQuadrotor(params), dict(params.provenance)
    params = load_smrh_params(config.vehicle_params)
    return SingleMainRotorHelicopter(params), dict(params.provenance)


def boundary_state(config, bc):
    attitude = euler_to_rotation(*bc.euler_deg)
    omega = np.radians(bc.rate_deg_s)
    if config.vehicle == "smrh":
        return VehicleState(attitude, omega, np.array(bc.moment_nm))
    return VehicleState(attitude, omega)


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------


def _fmt(x):
    value = float(x)
    if value == 0.0:
        value = 0.0  # normalize negative zero for stable output
    return format(value, ".15g")


def write_trajectory_csv(path, trajectory, with_moment):
    header = ["t", "phi", "theta", "psi", "p", "q", "r"]
    if with_moment:
        header += ["l", "m", "n"]
    header += ["u1", "u2", "u3"]
    lines = [
        f"# euler={EULER_CONVENTION} (yaw-pitch-roll), angles deg; "
        "rates rad/s body frame; moments N*m; controls as solved",
        ",".join(header),
    ]
    times = trajectory.times
    zeros = np.zeros(3)
    for k in range(len(trajectory)):
        euler = rotation_to_euler(trajectory.attitudes[k])
        row = [times[k], *euler, *trajectory.rates[k]]
        if with_moment:
            row += list(trajectory.moments[k])
        row += list(trajectory.controls[k] if k < len(trajectory) - 1 else zeros)
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_convergence_csv(path, report):
    has_cost = report.costs is not None
    header = "iter,deviation_norm,j_increment,j_effort,wall_ms"
    if has_cost:
        header += ",cost"
    lines = [header]
    for i in range(report.iterations):
        row = [
            str(i + 1),
            _fmt(report.deviation_norms[i]),
            _fmt(report.increment_costs[i]),
            _fmt(report.effort_costs[i]),
            _fmt(report.wall_times[i] * 1e3),
        ]
        if has_cost:
            row.append(_fmt(report.costs[i]))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def _report_payload(report):
    payload = {
        "converged": report.converged,
        "iterations": report.iterations,
        "status": report.status,
        "deviation_norms": report.deviation_norms,
        "increment_costs": report.increment_costs,
        "effort_costs": report.effort_costs,
        "wall_times_s": report.wall_times,
        "convergence_ratios": [
            None if np.isnan(r) else r for r in report.ratios
        ],
    }
    if report.costs is not None:
        payload["costs"] = report.costs
    return payload


# ---------------------------------------------------------------------------
# Solver dispatch
# ---------------------------------------------------------------------------


def _mpsp_config(config, variant):
    kwargs = dict(config.mpsp)
    kwargs.setdefault("update_variant", variant)
    kwargs["compat_printed"] = config.compat_paper_matrices
    return MPSPConfig(**kwargs)


def _ilqr_config(config):
    kwargs = dict(config.ilqr)
    if "alphas" in kwargs:
        kwargs["alphas"] = tuple(kwargs["alphas"])
    kwargs["compat_printed"] = config.compat_paper_matrices
    return ILQRConfig(**kwargs)


def solve_maneuver(config, vehicle=None, x0=None, u_init=None):
    """Run the configured solver; returns (trajectory, report-like, extras).

    For the TPBVP solver the "report" is the shooting result; an MPSP
    solve supplies the seed when ``tpbvp.initial_costate`` is "from_mpsp".
    """
    if vehicle is None:
        vehicle, _ = build_vehicle(config)
    if x0 is None:
        x0 = boundary_state(config, config.start)
    target = boundary_state(config, config.target)
    n_states, h = config.n_states, config.h
    if config.solver in ("mpsp_increment", "mpsp_effort"):
        variant = config.solver.split("_", 1)[1]
        traj, report = mpsp_solve(
            vehicle, x0, target, n_states, h, _mpsp_config(config, variant), u_init
        )
        return traj, report, {}
    if config.solver == "ilqr":
        try:
            traj, report = ilqr_solve(
                vehicle, x0, target, n_states, h, _ilqr_config(config), u_init
            )
        except LineSearchExhaustedError as err:
            return None, err.report, {}
        return traj, report, {}
    # TPBVP benchmark
    kwargs = dict(config.tpbvp)
    initial = kwargs.pop("initial_costate", "from_mpsp")
    problem = ShootingProblem(
        vehicle, x0, target, n_states, h,
        control_weight=kwargs.pop("control_weight", 1.0),
        substeps=kwargs.pop("substeps", 1),
        compat_printed=config.compat_paper_matrices,
    )
    extras = {}
    if initial == "from_mpsp":
        seed_traj, seed_report = mpsp_solve(
            vehicle, x0, target, n_states, h, _mpsp_config(config, "effort"), u_init
        )
        extras["seed_mpsp_converged"] = seed_report.converged
        initial = seed_from_controls(problem, seed_traj.controls)
    elif initial == "cold":
        initial = None
    result = solve_tpbvp(problem, initial, **kwargs)
    return result.trajectory, result, extras


# ---------------------------------------------------------------------------
# Maneuver runs
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    config: dict
    parameter_provenance: dict
    files: dict
    converged: bool
    status: str
    final_control_effort: float | None
    wall_time_s: float
    report: dict

    @property
    def exit_code(self):
        return 0 if self.converged else 2

    def to_json(self):
        return json.dumps(
            {
                "euler_convention": EULER_CONVENTION,
                "config": self.config,
                "parameter_provenance": self.parameter_provenance,
                "files": self.files,
                "converged": self.converged,
                "status": self.status,
                "final_control_effort": self.final_control_effort,
                "wall_time_s": self.wall_time_s,
                "solver_report": self.report,
            },
            indent=2,
        )


def _effort(trajectory):
    if trajectory is None:
        return None
    return 0.5 * float(np.sum(trajectory.controls**2))


def run_maneuver(config, out_dir=None):
    """Solve one maneuver and persist trajectory/convergence/report files."""
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vehicle, provenance = build_vehicle(config)
    started = time.perf_counter()
    trajectory, report, extras = solve_maneuver(config, vehicle)
    wall = time.perf_counter() - started

    files = {}
    if trajectory is not None:
        traj_path = out / "trajectory.csv"
        write_trajectory_csv(traj_path, trajectory, vehicle.has_moment)
        files["trajectory"] = str(traj_path)
    conv_path = out / "convergence.csv"
    if hasattr(report, "deviation_norms"):
        write_convergence_csv(conv_path, report)
        files["convergence"] = str(conv_path)
        payload = _report_payload(report)
        converged, status = report.converged, report.status
    else:  # shooting result
        Path(conv_path).write_text(
            "iter,residual_norm\n"
            + f"{report.iterations},{_fmt(report.residual_norm)}\n"
        )
        files["convergence"] = str(conv_path)
        payload = {
            "converged": report.converged,
            "iterations": report.iterations,
            "status": report.status,
            "residual_norm": report.residual_norm,
            **extras,
        }
        converged, status = report.converged, report.status

    run_report = RunReport(
        config=config.to_dict(),
        parameter_provenance=provenance,
        files=files,
        converged=converged,
        status=status,
        final_control_effort=_effort(trajectory),
        wall_time_s=wall,
        report=payload,
    )
    (out / "report.json").write_text(run_report.to_json() + "\n")
    return run_report


# ---------------------------------------------------------------------------
# Solver comparison
# ---------------------------------------------------------------------------


def _attitude_rms_deg(a, b):
    total = 0.0
    for k in range(len(a)):
        total += np.sum(log_so3(b.attitudes[k].T @ a.attitudes[k]) ** 2)
    return float(np.degrees(np.sqrt(total / len(a))))


def _control_rms_relative(a, b):
    return float(np.linalg.norm(a.controls - b.controls) / np.linalg.norm(b.controls))


def _terminal_attitude_deg(a, b):
    return float(
        np.degrees(np.linalg.norm(log_so3(b.attitudes[-1].T @ a.attitudes[-1])))
    )


def run_comparison(config, out_dir=None):
    """Run MPSP (effort variant), iLQR, and the TPBVP benchmark on one
    problem; emit per-pair RMS deviations and a summary table.

    Solver failures are recorded and the remaining pairs still compared.
    """
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vehicle, provenance = build_vehicle(config)

    runs = {}
    for solver in ("mpsp_effort", "ilqr", "tpbvp"):
        sub = ExperimentConfig.from_dict({**config.to_dict(), "solver": solver})
        label = solver.split("_")[0]
        started = time.perf_counter()
        try:
            trajectory, report, extras = solve_maneuver(sub, vehicle)
        except Exception as err:  # comparison must tolerate benchmark failures
            runs[label] = {
                "converged": False,
                "status": f"{type(err).__name__}: {err}",
                "wall_time_s": time.perf_counter() - started,
                "trajectory": None,
            }
            continue
        wall = time.perf_counter() - started
        entry = {
            "converged": bool(report.converged),
            "status": report.status,
            "wall_time_s": wall,
            "trajectory": trajectory,
        }
        if hasattr(report, "iterations"):
            entry["iterations"] = report.iterations
            if report.iterations:
                entry["wall_per_iteration_s"] = wall / report.iterations
        if trajectory is not None:
            path = out / f"{label}_trajectory.csv"
            write_trajectory_csv(path, trajectory, vehicle.has_moment)
            entry["trajectory_file"] = str(path)
        runs[label] = entry

    pairs = {}
    reference = {"mpsp_vs_tpbvp": "tpbvp", "ilqr_vs_tpbvp": "tpbvp", "mpsp_vs_ilqr": "ilqr"}
    for pair, ref in reference.items():
        first = pair.split("_vs_")[0]
        ta, tb = runs[first].get("trajectory"), runs[ref].get("trajectory")
        if ta is None or tb is None:
            continue
        pairs[pair] = {
            "control_rms_relative": _control_rms_relative(ta, tb),
            "attitude_rms_deg": _attitude_rms_deg(ta, tb),
            "terminal_attitude_deg": _terminal_attitude_deg(ta, tb),
        }

    payload = {
        "config": config.to_dict(),
        "parameter_provenance": provenance,
        "solvers": {
            name: {k: v for k, v in entry.items() if k != "trajectory"}
            for name, entry in runs.items()
        },
        "pairwise": pairs,
    }
    (out / "comparison.json").write_text(json.dumps(payload, indent=2) + "\n")
    return payload


def comparison_table(payload):
    """Plain-text summary table of a comparison payload."""
    lines = [f"{'solver':<8} {'converged':<10} {'wall [s]':<10} {'per-iter [s]':<12}"]
    for name, entry in payload["solvers"].items():
        per_iter = entry.get("wall_per_iteration_s")
        lines.append(
            f"{name:<8} {str(entry['converged']):<10} "
            f"{entry['wall_time_s']:<10.3f} "
            f"{per_iter if per_iter is None else format(per_iter, '.4f')!s:<12}"
        )
    lines.append("")
    lines.append(f"{'pair':<16} {'ctrl RMS rel':<14} {'att RMS [deg]':<14} {'term att [deg]'}")
    for pair, metrics in payload["pairwise"].items():
        lines.append(
            f"{pair:<16} {metrics['control_rms_relative']:<14.5f} "
            f"{metrics['attitude_rms_deg']:<14.5f} "
            f"{metrics['terminal_attitude_deg']:.6f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


def trial_rng(seed, trial):
    """Counter-based per-trial stream: independent, reproducible in isolation."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, trial])))


def _perturbed_config(config, trial):
    """Per-trial start state / control guess for the configured MC mode."""
    mc = config.monte_carlo
    rng = trial_rng(config.seed, trial)
    start = config.start
    u_init = None
    if mc.mode == "random_initial_condition":
        euler = start.euler_deg + rng.uniform(-1.0, 1.0, 3) * mc.attitude_range_deg
        rates = start.rate_deg_s + rng.uniform(-1.0, 1.0, 3) * mc.rate_range_deg_s
        moment = start.moment_nm.copy()
        if config.vehicle == "smrh":
            moment = moment + rng.uniform(-1.0, 1.0, 3) * mc.moment_range_nm
        start = BoundaryCondition(euler, rates, moment)
    else:
        u_init = rng.uniform(-1.0, 1.0, (config.n_states - 1, 3)) * mc.control_range
    return start, u_init


def _run_trial(args):
    config_data, trial = args
    config = ExperimentConfig.from_dict(config_data)
    vehicle, _ = build_vehicle(config)
    start, u_init = _perturbed_config(config, trial)
    x0 = boundary_state(config, start)
    record = {"trial": trial, "start": start.to_dict()}
    try:
        trajectory, report, _ = solve_maneuver(config, vehicle, x0=x0, u_init=u_init)
        record.update(
            converged=bool(report.converged),
            iterations=int(report.iterations),
            status=report.status,
            deviation_norms=list(report.deviation_norms),
            increment_costs=list(report.increment_costs),
            final_deviation=float(report.deviation_norms[-1]),
            final_control_effort=_effort(trajectory),
        )
    except Exception as err:  # a failed trial must not abort the sweep
        record.update(
            converged=False,
            iterations=0,
            status=f"{type(err).__name__}: {err}",
            deviation_norms=[],
            increment_costs=[],
            final_deviation=float("nan"),
            final_control_effort=None,
        )
    return record


def run_monte_carlo(config, out_dir=None):
    """Perturbation sweep with per-trial RNG streams derived from the seed.

    Aggregates convergence rate, iteration-count distribution, and final
    control-effort quartiles; writes per-trial curves for plotting.
    """
    if config.solver == "tpbvp":
        raise ConfigError("config.solver: Monte Carlo sweeps support mpsp_*/ilqr")
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mc = config.monte_carlo
    jobs = [(config.to_dict(), trial) for trial in range(mc.trials)]
    if mc.workers > 1:
        with ProcessPoolExecutor(max_workers=mc.workers) as pool:
            records = list(pool.map(_run_trial, jobs))
    else:
        records = [_run_trial(job) for job in jobs]
    records.sort(key=lambda r: r["trial"])

    lines = ["trial,converged,iterations,final_deviation,final_control_effort"]
    for r in records:
        effort = "" if r["final_control_effort"] is None else _fmt(r["final_control_effort"])
        lines.append(
            f"{r['trial']},{int(r['converged'])},{r['iterations']},"
            f"{_fmt(r['final_deviation'])},{effort}"
        )
    (out / "trials.csv").write_text("\n".join(lines) + "\n")

    curve_lines = ["trial,iter,deviation_norm,j_increment"]
    for r in records:
        for i, (norm, jdu) in enumerate(zip(r["deviation_norms"], r["increment_costs"])):
            curve_lines.append(f"{r['trial']},{i + 1},{_fmt(norm)},{_fmt(jdu)}")
    (out / "curves.csv").write_text("\n".join(curve_lines) + "\n")

    converged = [r for r in records if r["converged"]]
    efforts = np.array(
        [r["final_control_effort"] for r in converged], dtype=float
    )
    iteration_counts = [r["iterations"] for r in converged]
    aggregate = {
        "config": config.to_dict(),
        "trials": mc.trials,
        "mode": mc.mode,
        "n_converged": len(converged),
        "convergence_rate": len(converged) / mc.trials,
        "iterations_max": max(iteration_counts) if iteration_counts else None,
        "iterations_mean": float(np.mean(iteration_counts)) if iteration_counts else None,
    }
    if len(efforts):
        q1, median, q3 = np.percentile(efforts, [25.0, 50.0, 75.0])
        aggregate["control_effort"] = {
            "q1": q1,
            "median": median,
            "q3": q3,
            "iqr": q3 - q1,
            "iqr_over_median": (q3 - q1) / median if median else None,
        }
    (out / "monte_carlo.json").write_text(json.dumps(aggregate, indent=2) + "\n")
    return aggregate, records


# ---------------------------------------------------------------------------
# Certification battery (rank certificate + invariant suite)
# ---------------------------------------------------------------------------


def run_certification():
    """Quick deterministic invariant suite; returns [(name, ok, detail)].

    Covers the structure-constant identities, exp/log round trips, chain
    recursion vs direct products, the full-row-rank certificate with the
    closed-form determinant, finite-difference linearization agreement, QP
    update / dense-KKT equivalence, and update primal feasibility.
    """
    from .algebra import LieAlgebraSpec, ad_matrix, coad_matrix, exp_so3, group_step
    from .vehicles import SMSModel

    checks = []
    rng = np.random.default_rng(2024)

    spec = LieAlgebraSpec.so3()
    worst = 0.0
    for _ in range(200):
        v, mu, eta = rng.standard_normal((3, 3))
        lhs = (coad_matrix(spec, v) @ mu) @ eta
        rhs = mu @ (ad_matrix(spec, v) @ eta)
        worst = max(worst, abs(lhs - rhs))
    checks.append(("coadjoint duality pairing (so3)", worst < 1e-12, f"max {worst:.2e}"))

    worst = 0.0
    for _ in range(500):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        v = rng.uniform(1e-10, np.pi - 0.01) * direction
        worst = max(worst, np.linalg.norm(log_so3(exp_so3(v)) - v))
    checks.append(("exp/log round trip", worst < 1e-9, f"max {worst:.2e}"))

    rot = np.eye(3)
    for _ in range(10_000):
        rot = group_step(rot, rng.uniform(-10, 10, 3), 1e-3)
    drift = np.linalg.norm(rot.T @ rot - np.eye(3))
    checks.append(("group-step orthogonality drift", drift < 1e-9, f"{drift:.2e}"))

    a = rng.standard_normal((7, 6, 6))
    b = rng.standard_normal((7, 6, 3))
    chain = build_chain(a, b)
    worst = 0.0
    for k in range(7):
        direct = b[k]
        for j in range(k + 1, 7):
            direct = a[j] @ direct
        worst = max(worst, np.abs(chain.matrices[k] - direct).max())
    checks.append(("sensitivity recursion vs products", worst < 1e-12, f"max {worst:.2e}"))

    for name, loader, cls, n_states in (
        ("vpq", load_vpq_params, VariablePitchQuadrotor, 600),
        ("smrh", load_smrh_params, SingleMainRotorHelicopter, 600),
    ):
        vehicle = cls(loader())
        x0 = (
            VehicleState(np.eye(3), np.zeros(3))
            if name == "vpq"
            else VehicleState(np.eye(3), np.zeros(3), np.zeros(3))
        )
        traj = vehicle.rollout(x0, np.zeros((n_states - 1, 3)), 1e-3)
        g = build_chain(*linearize_rollout(vehicle, traj)).matrices
        sharp = np.linalg.inv(vehicle.params.inertia) if name == "vpq" else None
        cert = rank_certificate(g, h=1e-3, inertia_sharp=sharp)
        ok = cert.full_rank and (cert.det_ok is not False)
        detail = f"sigma_min {cert.sigma_min:.2e}"
        if cert.det_value is not None:
            detail += f", det {cert.det_value:.3e} vs {cert.det_expected:.3e}"
        checks.append((f"rank certificate ({name})", ok, detail))

    from .mpsp import linearize_vpq

    params = load_vpq_params()
    vehicle = VariablePitchQuadrotor(params)
    h = 1e-3
    w0 = np.array([0.3, -0.5, 0.4])
    state = VehicleState(exp_so3(np.array([0.2, 0.1, -0.3])), w0)
    u0 = np.array([0.5, -0.3, 0.2])
    a_lin, b_lin = linearize_vpq(params, w0, h)
    nominal_next = vehicle.step(state, u0, h)
    worst = 0.0
    eps = 1e-5
    for i in range(6):
        dev = np.zeros(6)
        dev[i] = eps
        plus = vehicle.deviation(
            vehicle.step(
                VehicleState(state.attitude @ exp_so3(dev[:3]), state.omega + dev[3:]),
                u0, h,
            ),
            nominal_next,
        )
        minus = vehicle.deviation(
            vehicle.step(
                VehicleState(state.attitude @ exp_so3(-dev[:3]), state.omega - dev[3:]),
                u0, h,
            ),
            nominal_next,
        )
        worst = max(worst, np.abs((plus - minus) / (2 * eps) - a_lin[:, i]).max())
    checks.append(("finite-difference linearization (vpq)", worst < 1e-6, f"max {worst:.2e}"))

    worst = 0.0
    feas = 0.0
    for _ in range(50):
        count = int(rng.integers(1, 6))
        n = int(rng.integers(1, 4))
        p = int(rng.integers(1, min(count * n, 6) + 1))
        g = rng.standard_normal((count, p, n))
        q = rng.standard_normal((n, n))
        r = q @ q.T + n * np.eye(n)
        dxn = rng.standard_normal(p)
        u_prev = rng.standard_normal((count, n))
        u_new = mpsp_update_increment(u_prev, g, r, dxn)
        r_big = np.kron(np.eye(count), r)
        g_stack = g.transpose(1, 0, 2).reshape(p, count * n)
        kkt = np.block([[r_big, g_stack.T], [g_stack, np.zeros((p, p))]])
        sol = np.linalg.solve(kkt, np.concatenate([np.zeros(count * n), dxn]))
        oracle = u_prev - sol[: count * n].reshape(count, n)
        worst = max(worst, np.abs(u_new - oracle).max())
        reached = np.einsum("kpn,kn->p", g, u_prev - u_new)
        feas = max(feas, np.linalg.norm(reached - dxn))
    checks.append(("QP update vs dense KKT oracle", worst < 1e-10, f"max {worst:.2e}"))
    checks.append(("update primal feasibility", feas < 1e-10, f"max {feas:.2e}"))

    from .algebra import InertiaOperator
    from .vehicles import AbelianSMS

    model = SMSModel(
        LieAlgebraSpec.abelian(2), InertiaOperator.from_matrix(np.diag([2.0, 0.5]))
    )
    system = AbelianSMS(model)
    x0 = VehicleState(np.zeros(2), np.zeros(2))
    target = VehicleState(np.array([1.0, -2.0]), np.zeros(2))
    ilqr_cfg = ILQRConfig(max_iterations=2)
    traj, _ = ilqr_solve(system, x0, target, 50, 0.02, ilqr_cfg)
    chain = build_chain(*linearize_rollout(system, traj))
    e_n = deviation_allowing_pi(system, traj.terminal_state, target)
    q_n = 1e4 * np.eye(4)
    grad = traj.controls + np.einsum("kpn,p->kn", chain.matrices, q_n @ e_n)
    gmax = np.abs(grad).max()
    checks.append(("abelian LQ one-pass optimality", gmax < 1e-9, f"grad {gmax:.2e}"))

    return checks
