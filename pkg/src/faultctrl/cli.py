"""Batch front-end: config parsing, run orchestration, CSV/JSON export.

Subcommands:
    run <config>                 integrate one scenario and export outputs
    validate <config>            parse and validate without running
    sweep <config> --vary k=a,b  fan out runs over a parameter list
    oracle-compare <config>      event engine vs regularized cross-check
    report <run_dir>             render figures from an exported run

Exit codes: 0 success, 2 validation failure, 3 integration failure,
4 monitor failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from .control import GainSet, ReferenceParams, left_pseudoinverse, validate_gains, reference
from .model import FaultModel, FrictionParams
from .observer import make_observer_config, hurwitz_check
from .passivity import evaluate_monitors
from .scenario import ScenarioConfig, build_fault, build_well_matrix, load_matrix_csv, critical_stiffness_report
from .sim import IntegrationError, RunMode, SimConfig, Trajectory, regularized_oracle_run, run, stick_episodes_from_series

__all__ = ["RunManifest", "ConfigError", "parse_config", "run_and_export", "main"]

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INTEGRATION = 3
EXIT_MONITOR = 4

DAY = 86400.0


class ConfigError(ValueError):
    """Configuration file invalid; message names the offending field."""


@dataclass
class RunManifest:
    """Fully validated description of one run."""

    scenario: ScenarioConfig
    friction: FrictionParams
    gains: GainSet
    ref: ReferenceParams
    sim: SimConfig
    observer_epsilon: float
    observer_l1: float
    observer_l2: float
    observer_mismatch: float
    output_dir: Path
    seed: int
    sector_samples: int
    matrix_dir: Path | None
    source_path: Path | None

    def build_model(self) -> FaultModel:
        matrices = None
        if self.matrix_dir is not None:
            matrices = {}
            for name in ("M", "K_bar", "H_bar", "C_p"):
                f = self.matrix_dir / f"{name}.csv"
                if f.exists():
                    matrices[name] = load_matrix_csv(f)
        return build_fault(self.scenario, friction=self.friction, matrices=matrices)


def _get(cp, section, key, cast, default=None, path=None):
    try:
        raw = cp.get(section, key)
    except (configparser.NoSectionError, configparser.NoOptionError):
        if default is not None:
            return default
        raise ConfigError(f"missing required field [{section}] {key}"
                          + (f" in {path}" if path else ""))
    try:
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field [{section}] {key} = {raw!r}: {exc}") from exc


def _parse_wells(raw: str):
    wells = []
    for part in raw.replace(";", " ").split():
        x, z = part.split(",")
        wells.append((float(x), float(z)))
    return tuple(wells)


REQUIRED_FIELDS = [
    "[run] mode", "[run] t_end", "[scenario] nx", "[scenario] nz",
    "[gains] lambda_delta", "[gains] lambda_v", "[reference] d_max",
    "[reference] t_op_days",
]


def parse_config(path) -> RunManifest:
    """Read and fully validate a run configuration.

    Every structural validation (gain condition, observer spectrum, well
    matrix rank, matrix definiteness) runs eagerly so that a bad file is
    rejected before any integration starts.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = cp.read(path)
    if not read or not cp.sections():
        raise ConfigError(
            f"{path} is empty or unreadable; required fields: "
            + ", ".join(REQUIRED_FIELDS))

    g = lambda sec, key, cast, default=None: _get(cp, sec, key, cast, default, path)

    scenario = ScenarioConfig(
        Nx=g("scenario", "nx", int),
        Nz=g("scenario", "nz", int),
        Lx=g("scenario", "lx", float, 3000.0),
        Lz=g("scenario", "lz", float, 3000.0),
        sigma_surface=g("scenario", "sigma_surface", float, 3.9),
        sigma_gradient=g("scenario", "sigma_gradient", float, 3.0e-5),
        element_mass=g("scenario", "element_mass", float, 5.0e-5),
        spring_k=g("scenario", "spring_k", float, 0.039),
        rayleigh_alpha=g("scenario", "rayleigh_alpha", float, 0.05),
        rayleigh_beta=g("scenario", "rayleigh_beta", float, 1.0e-3),
        well_positions=g("scenario", "wells", _parse_wells,
                         ScenarioConfig().well_positions),
        well_kernel_radius=g("scenario", "well_kernel_radius", float, 1500.0),
        C_h_scalar=g("scenario", "c_h_scalar", float, 2.88e-7),
    )
    friction = FrictionParams(
        mu_res=g("friction", "mu_res", float, 0.5),
        delta_mu=g("friction", "delta_mu", float, -0.1),
        d_c=g("friction", "d_c", float, 10.0),
        mu_min=g("friction", "mu_min", float, 0.25),
        l_delta=g("friction", "l_delta", float, 0.04),
        l_v=g("friction", "l_v", float, 0.0),
    )
    gains = GainSet(
        lambda_delta=g("gains", "lambda_delta", float),
        lambda_v=g("gains", "lambda_v", float),
        lambda_xi=g("gains", "lambda_xi", float, 5.0e3),
        mu_min=friction.mu_min,
        l_delta=friction.l_delta,
        l_v=friction.l_v,
    )
    ref = ReferenceParams(
        d_max=g("reference", "d_max", float),
        t_op=g("reference", "t_op_days", float) * DAY,
    )
    mode = g("run", "mode", str)
    try:
        run_mode = RunMode(mode)
    except ValueError:
        raise ConfigError(
            f"field [run] mode = {mode!r}: must be one of "
            + ", ".join(m.value for m in RunMode))
    sim = SimConfig(
        t_end=g("run", "t_end", float),
        dt_init=g("sim", "dt_init", float, 1.0e-3),
        dt_min=g("sim", "dt_min", float, 1.0e-10),
        dt_max=g("sim", "dt_max", float, 2.0e5),
        newton_tol=g("sim", "newton_tol", float, 1.0e-10),
        newton_max_iter=g("sim", "newton_max_iter", int, 12),
        event_tol=g("sim", "event_tol", float, 1.0e-12),
        stick_velocity_floor=g("sim", "stick_velocity_floor", float, 1.0e-14),
        mode=run_mode,
        err_rtol=g("sim", "err_rtol", float, 1.0e-6),
        max_slip_per_step=g("sim", "max_slip_per_step", float, 0.2),
        trigger_velocity=g("sim", "trigger_velocity", float, 1.0e-12),
        max_steps=g("sim", "max_steps", int, 2_000_000),
        max_samples=g("sim", "max_samples", int, 2000),
        ff_accel_cap_factor=g("sim", "ff_accel_cap_factor", float, 100.0),
    )

    out_root = os.environ.get("FAULTCTRL_OUTPUT_ROOT", ".")
    output_dir = Path(g("output", "dir", str, str(Path(out_root) / path.stem)))
    if not output_dir.is_absolute():
        output_dir = Path(out_root) / output_dir

    manifest = RunManifest(
        scenario=scenario,
        friction=friction,
        gains=gains,
        ref=ref,
        sim=sim,
        observer_epsilon=g("observer", "epsilon", float, 0.1),
        observer_l1=g("observer", "l1", float, 1.0),
        observer_l2=g("observer", "l2", float, 2.0),
        observer_mismatch=g("observer", "mismatch", float, 0.05),
        output_dir=output_dir,
        seed=g("run", "seed", int, 0),
        sector_samples=g("run", "sector_samples", int, 100_000),
        matrix_dir=(Path(g("scenario", "matrix_dir", str))
                    if cp.has_option("scenario", "matrix_dir") else None),
        source_path=path,
    )
    _validate_manifest(manifest)
    return manifest


def _validate_manifest(manifest: RunManifest):
    check = validate_gains(manifest.gains)
    if not check.ok:
        raise ConfigError(
            f"gain condition violated: need lambda_delta > "
            f"{check.threshold_delta:g} (got {manifest.gains.lambda_delta:g}) "
            f"and lambda_v > {check.threshold_v:g} "
            f"(got {manifest.gains.lambda_v:g})")
    model = manifest.build_model()  # raises on rank/definiteness failures
    _, _, C_m = build_well_matrix(manifest.scenario)
    manifest.gains.C_t = left_pseudoinverse(model.C_p)
    if manifest.sim.mode.has_observer:
        obs = make_observer_config(model, C_m, epsilon=manifest.observer_epsilon,
                                   l1=manifest.observer_l1, l2=manifest.observer_l2,
                                   mismatch=manifest.observer_mismatch)
        report = hurwitz_check(obs)
        if not report.ok:
            raise ConfigError(
                f"observer matrix not Hurwitz (max Re {report.max_real_part:g})")


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_trajectory_csv(path: Path, traj: Trajectory, n: int, q: int):
    """Write the downsampled trajectory in the documented column layout."""
    cols = (["t"]
            + [f"x1_{i+1}" for i in range(n)]
            + [f"x2_{i+1}" for i in range(n)]
            + [f"x3_{i+1}" for i in range(n)]
            + [f"xhat3_{i+1}" for i in range(n)]
            + [f"xi_{j+1}" for j in range(q)]
            + [f"p_{j+1}" for j in range(q)]
            + [f"pinf_{j+1}" for j in range(q)]
            + ["y_m", "V", "residual", "metric_E", "metric_Et", "metric_Ep"])
    m = len(traj.t)
    zeros_n = np.zeros((m, n))
    zeros_q = np.zeros((m, q))
    xhat3 = traj.xhat3 if traj.xhat3 is not None else zeros_n
    xi = traj.xi if traj.xi is not None else zeros_q
    p_inf = traj.p_inf if traj.p_inf is not None else zeros_q
    blocks = np.column_stack([
        traj.t, traj.x1, traj.x2, traj.x3, xhat3, xi, traj.p, p_inf,
        traj.y_m, traj.V, traj.residual, traj.metric_E, traj.metric_Et,
        traj.metric_Ep,
    ])
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in blocks:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_events_csv(path: Path, traj: Trajectory):
    with open(path, "w", newline="\n") as fh:
        fh.write("t,element,transition\n")
        for t, elem, kind in traj.events:
            fh.write(f"{_fmt(t)},{elem},{kind}\n")


def _fast_phase(traj: Trajectory, frac: float = 1e-3):
    rate = traj.fine_max_rate
    if not len(rate) or rate.max() <= 0:
        return 0.0, 0.0, 0.0
    peak = float(rate.max())
    mask = rate >= frac * peak
    ts = traj.fine_t[mask]
    return peak, float(ts[0]), float(ts[-1])


def summarize(traj: Trajectory, manifest: RunManifest, monitor) -> dict:
    peak, t_lo, t_hi = _fast_phase(traj)
    r_final, _ = reference(traj.t[-1], manifest.ref)
    summary = {
        "config": _manifest_dict(manifest),
        "final_slip": {
            "mean": float(traj.x1[-1].mean()),
            "min": float(traj.x1[-1].min()),
            "max": float(traj.x1[-1].max()),
        },
        "final_time": float(traj.t[-1]),
        "reference_at_final_time": float(r_final),
        "peak_slip_rate": peak,
        "fast_phase": {"start": t_lo, "end": t_hi, "duration": t_hi - t_lo},
        "n_events": len(traj.events),
        "steps": traj.meta.get("steps"),
        "tail_metric_E": monitor.tail_metric_E,
        "tail_metric_Et": monitor.tail_metric_Et,
        "tail_metric_Ep": monitor.tail_metric_Ep,
        "monitor": {
            "max_residual": monitor.max_residual,
            "max_residual_tol": monitor.max_residual_tol,
            "n_warnings": monitor.n_warnings,
            "n_failures": monitor.n_failures,
            "sector_margin": monitor.sector_margin,
            "ok": monitor.ok,
            "notes": monitor.notes,
        },
        "seed": manifest.seed,
    }
    return summary


def _manifest_dict(manifest: RunManifest) -> dict:
    d = {
        "scenario": asdict(manifest.scenario),
        "friction": asdict(manifest.friction),
        "gains": {k: v for k, v in asdict(manifest.gains).items() if k != "C_t"},
        "reference": asdict(manifest.ref),
        "sim": {k: (v.value if isinstance(v, RunMode) else v)
                for k, v in asdict(manifest.sim).items()},
        "observer": {
            "epsilon": manifest.observer_epsilon,
            "l1": manifest.observer_l1,
            "l2": manifest.observer_l2,
            "mismatch": manifest.observer_mismatch,
        },
        "seed": manifest.seed,
    }
    return d


def run_and_export(manifest: RunManifest) -> int:
    """Execute the manifest and write trajectory.csv, events.csv,
    summary.json (plus run_meta.json with wall time) into the output dir."""
    t_wall = time.perf_counter()
    try:
        _validate_manifest(manifest)
    except (ConfigError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    model = manifest.build_model()
    C_p, C_h, C_m = build_well_matrix(manifest.scenario)
    manifest.gains.C_t = left_pseudoinverse(model.C_p)
    obs = None
    if manifest.sim.mode.has_observer:
        obs = make_observer_config(model, C_m, epsilon=manifest.observer_epsilon,
                                   l1=manifest.observer_l1, l2=manifest.observer_l2,
                                   mismatch=manifest.observer_mismatch)

    failed = None
    try:
        traj = run(model, manifest.gains, obs, manifest.sim, ref=manifest.ref,
                   C_h=C_h, C_m=C_m)
    except IntegrationError as exc:
        print(f"integration error: {exc}", file=sys.stderr)
        traj = exc.trajectory
        failed = str(exc)
        if traj is None or not len(traj.t):
            return EXIT_INTEGRATION

    rng = np.random.default_rng(manifest.seed)
    monitor = evaluate_monitors(
        traj, model, manifest.gains,
        sector_samples=manifest.sector_samples,
        state_box={"x1_max": model.friction.d_c, "x3_max": 1.0},
        rng=rng,
    )

    out = manifest.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(out / "trajectory.csv", traj, model.n, model.q)
    write_events_csv(out / "events.csv", traj)
    summary = summarize(traj, manifest, monitor)
    if failed:
        summary["integration_error"] = failed
    with open(out / "summary.json", "w", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "run_meta.json", "w", newline="\n") as fh:
        json.dump({"wall_time_s": time.perf_counter() - t_wall}, fh, indent=2)
        fh.write("\n")

    if failed:
        return EXIT_INTEGRATION
    if not monitor.ok:
        print("monitor failure: " + "; ".join(monitor.notes), file=sys.stderr)
        return EXIT_MONITOR
    return EXIT_OK


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_run(args) -> int:
    try:
        manifest = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.output:
        manifest.output_dir = Path(args.output)
    code = run_and_export(manifest)
    print(f"run finished with exit code {code}; outputs in {manifest.output_dir}")
    return code


def _cmd_validate(args) -> int:
    try:
        manifest = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    model = manifest.build_model()
    margins = critical_stiffness_report(model)
    check = validate_gains(manifest.gains)
    print(f"{manifest.source_path}: OK")
    print(f"  n={model.n} q={model.q} mode={manifest.sim.mode.value}")
    print(f"  gain thresholds: lambda_delta > {check.threshold_delta:g}, "
          f"lambda_v > {check.threshold_v:g}")
    print(f"  unstable elements (negative stiffness margin): "
          f"{int((margins < 0).sum())}/{model.n}")
    return EXIT_OK


def _set_dotted(manifest_sections: dict, key: str, value: str):
    section, _, field = key.partition(".")
    if section not in manifest_sections:
        raise ConfigError(f"unknown sweep section {section!r}")
    manifest_sections[section][field] = value


def _sweep_worker(payload):
    config_path, key, value, out_dir = payload
    manifest = parse_config(config_path)
    section, _, field = key.partition(".")
    target = {
        "scenario": manifest.scenario,
        "gains": manifest.gains,
        "sim": manifest.sim,
        "reference": manifest.ref,
        "friction": manifest.friction,
    }.get(section)
    if target is None:
        raise ConfigError(f"unknown sweep section {section!r}")
    if not hasattr(target, field):
        raise ConfigError(f"unknown sweep field {key!r}")
    current = getattr(target, field)
    cast = type(current) if current is not None else float
    setattr(target, field, cast(value))
    manifest.output_dir = Path(out_dir)
    code = run_and_export(manifest)
    return {"key": key, "value": value, "dir": str(out_dir), "exit_code": code}


def _cmd_sweep(args) -> int:
    key, _, values = args.vary.partition("=")
    if not values:
        print("sweep --vary expects key=v1,v2,...", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        manifest = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    base_out = Path(args.output) if args.output else manifest.output_dir
    jobs = []
    for v in values.split(","):
        out_dir = base_out / f"{key.replace('.', '_')}={v}"
        jobs.append((str(args.config), key, v, str(out_dir)))
    results = []
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(j) for j in jobs]
    base_out.mkdir(parents=True, exist_ok=True)
    with open(base_out / "sweep_index.json", "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    worst = max(r["exit_code"] for r in results)
    for r in results:
        print(f"{r['key']}={r['value']}: exit {r['exit_code']} ({r['dir']})")
    return worst


def _cmd_oracle_compare(args) -> int:
    try:
        manifest = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if manifest.sim.mode.has_actuator or manifest.sim.mode.has_observer:
        print("oracle-compare requires open_loop, stabilize or track mode",
              file=sys.stderr)
        return EXIT_VALIDATION
    model = manifest.build_model()
    manifest.gains.C_t = left_pseudoinverse(model.C_p)
    traj = run(model, manifest.gains, None, manifest.sim, ref=manifest.ref)
    oracle_cfg = replace(manifest.sim, dt_init=args.oracle_dt)
    oracle = regularized_oracle_run(model, manifest.gains, oracle_cfg,
                                    boundary_layer=args.boundary_layer,
                                    ref=manifest.ref)
    slip_ev = traj.x1[-1]
    slip_or = oracle.x1[-1]
    denom = max(float(np.abs(slip_or).max()), 1e-30)
    rel = float(np.abs(slip_ev - slip_or).max()) / denom
    n_stick_ev = sum(1 for _, _, k in traj.events if k == "Slip->Stick")
    n_stick_or = stick_episodes_from_series(oracle.t, oracle.x3,
                                            args.boundary_layer)
    print(f"terminal slip: event engine mean {slip_ev.mean():.6g}, "
          f"oracle mean {slip_or.mean():.6g}, max relative diff {rel:.3g}")
    print(f"stick events: event engine {n_stick_ev}, oracle {n_stick_or}")
    agree = rel <= args.rel_tol and n_stick_ev == n_stick_or
    print("AGREE" if agree else "DISAGREE")
    return EXIT_OK if agree else 1


def _cmd_report(args) -> int:
    from .plots import render_run_report
    run_dir = Path(args.run_dir)
    if not (run_dir / "trajectory.csv").exists():
        print(f"no trajectory.csv in {run_dir}", file=sys.stderr)
        return EXIT_VALIDATION
    written = render_run_report(run_dir)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="faultctrl",
        description="Stick-slip fault simulation with pressure-based "
                    "stabilization and tracking control.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="integrate one configuration")
    p_run.add_argument("config")
    p_run.add_argument("--output", help="override output directory")
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate", help="validate a configuration")
    p_val.add_argument("config")
    p_val.set_defaults(func=_cmd_validate)

    p_sweep = sub.add_parser("sweep", help="run a one-parameter sweep")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--vary", required=True,
                         help="dotted key and values, e.g. gains.lambda_v=300,346.4,400")
    p_sweep.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p_sweep.add_argument("--output", help="override output root")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_oc = sub.add_parser("oracle-compare",
                          help="cross-check the event engine against the "
                               "regularized fixed-step integrator")
    p_oc.add_argument("config")
    p_oc.add_argument("--boundary-layer", type=float, default=1e-8)
    p_oc.add_argument("--oracle-dt", type=float, default=1e-4)
    p_oc.add_argument("--rel-tol", type=float, default=1e-3)
    p_oc.set_defaults(func=_cmd_oracle_compare)

    p_rep = sub.add_parser("report", help="render figures for a finished run")
    p_rep.add_argument("run_dir")
    p_rep.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
