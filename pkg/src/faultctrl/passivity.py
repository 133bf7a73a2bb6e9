"""Numerical monitors for the energy-balance structure of the closed loop.

The monitors evaluate storage functions along recorded trajectories,
check the discrete dissipation identity by quadrature, probe the sector
bound of the shifted friction by randomized sampling, and report
distances to the convergence domains (zero velocity, zero projected
tracking error, actuator pressure matching its nominal demand).
Violations within ten times the quadrature tolerance are warnings;
anything larger fails the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .control import GainSet, stabilizing_pressure
from .model import FaultModel, PlantState, shifted_friction_slip

__all__ = [
    "MonitorReport",
    "storage_V",
    "storage_Vp",
    "dissipation_residual",
    "sector_probe",
    "passivity_map_probe",
    "convergence_metrics",
    "evaluate_monitors",
]

WARN_FACTOR = 10.0


@dataclass
class MonitorReport:
    """Verdicts of the trajectory monitors with their tolerances."""

    max_residual: float
    max_residual_tol: float
    n_warnings: int
    n_failures: int
    sector_margin: float | None
    tail_metric_E: float
    tail_metric_Et: float
    tail_metric_Ep: float
    ok: bool
    notes: list = field(default_factory=list)


def storage_V(state: PlantState, model: FaultModel) -> float:
    """Mechanical storage 1/2 (x1'x1 + x2' K_bar x2 + x3' M x3)."""
    return float(
        0.5 * (state.x1 @ state.x1
               + state.x2 @ (model.K_bar @ state.x2)
               + state.x3 @ (model.M @ state.x3))
    )


def storage_Vp(p_tilde, C_h: np.ndarray) -> float:
    """Actuator storage 1/2 p_tilde' C_h^-1 p_tilde."""
    p_tilde = np.atleast_1d(np.asarray(p_tilde, dtype=float))
    C_h = np.atleast_2d(np.asarray(C_h, dtype=float))
    try:
        sol = np.linalg.solve(C_h, p_tilde)
    except np.linalg.LinAlgError as exc:
        raise ValueError("C_h is singular") from exc
    return float(0.5 * p_tilde @ sol)


def dissipation_residual(t, V, supply):
    """Signed residuals of the energy balance between samples.

    For each window [t_k, t_k+1] returns V(t_k+1) - V(t_k) minus the
    trapezoidal quadrature of the supply rate, together with a per-window
    quadrature tolerance built from the supply variation (which grows
    exactly where the integrand kinks, i.e. near events).
    """
    t = np.asarray(t, dtype=float)
    V = np.asarray(V, dtype=float)
    supply = np.asarray(supply, dtype=float)
    dt = np.diff(t)
    dV = np.diff(V)
    quad = 0.5 * dt * (supply[1:] + supply[:-1])
    residual = dV - quad
    tol = 0.5 * dt * np.abs(np.diff(supply)) + 1e-12 * np.maximum.reduce(
        [np.abs(V[1:]), np.abs(V[:-1]), np.full(dV.shape, 1e-30)])
    return residual, tol


def sector_probe(model: FaultModel, state_box: dict, samples: int,
                 rng: np.random.Generator | None = None) -> float:
    """Worst sampled margin of the friction sector bound.

    Draws (x1, x3) uniformly from the box and returns the minimum of
    x3' g + l_delta |x3|' x1 + l_v x3' x3 with g the shifted friction at
    zero pressure; nonnegative margins certify the configured sector.
    """
    rng = rng or np.random.default_rng(0)
    n = model.n
    x1_hi = state_box.get("x1_max", model.friction.d_c)
    x3_hi = state_box.get("x3_max", 1.0)
    worst = np.inf
    fr = model.friction
    chunk = max(1, min(samples, 20000))
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        x1 = rng.uniform(0.0, x1_hi, size=(k, n))
        x3 = rng.uniform(-x3_hi, x3_hi, size=(k, n))
        x3[x3 == 0.0] = x3_hi * 1e-9
        mu = fr.mu_res - fr.delta_mu * np.exp(-x1 / fr.d_c)
        g = np.sign(x3) * mu * model.sigma_n_prime - model.F_s_star
        margin = (
            np.einsum("ij,ij->i", x3, g)
            + fr.l_delta * np.einsum("ij,ij->i", np.abs(x3), x1)
            + fr.l_v * np.einsum("ij,ij->i", x3, x3)
        )
        worst = min(worst, float(margin.min()))
        done += k
    return worst


def passivity_map_probe(model: FaultModel, gains: GainSet, state_box: dict,
                        samples: int,
                        rng: np.random.Generator | None = None) -> float:
    """Worst sampled value of the controlled friction passivity map.

    For slipping states with the stabilizing pressure law applied,
    evaluates -x1'|x3| + x3' g - x3' b C_p p and returns the minimum;
    nonnegative values certify that the control restores passivity of
    the friction block.
    """
    rng = rng or np.random.default_rng(0)
    n = model.n
    x1_hi = state_box.get("x1_max", model.friction.d_c)
    x3_hi = state_box.get("x3_max", 1.0)
    worst = np.inf
    for _ in range(samples):
        x1 = rng.uniform(0.0, x1_hi, size=n)
        x3 = rng.uniform(-x3_hi, x3_hi, size=n)
        x3[x3 == 0.0] = x3_hi * 1e-9
        p = stabilizing_pressure(x1, x3, gains, model.C_p)
        g = shifted_friction_slip(x1, x3, np.zeros(model.q), model)
        bcp = np.sign(x3) * model.mu(x1) * (model.C_p @ p)
        val = float(-x1 @ np.abs(x3) + x3 @ g - x3 @ bcp)
        worst = min(worst, val)
    return worst


def convergence_metrics(t, x3, r3, C_t, p=None, p_bar=None, tail_frac=0.05):
    """Distance series to the convergence domains with tail averages.

    Returns a dict with the series ||x3||, ||C_t (r3 - x3)|| and, when
    actuator data is supplied, ||p - p_bar||, plus their averages over
    the final tail_frac of the run.
    """
    t = np.asarray(t, dtype=float)
    x3 = np.asarray(x3, dtype=float)
    r3 = np.asarray(r3, dtype=float)
    if r3.ndim == 1 and x3.ndim == 2:
        r3 = r3[:, None] * np.ones_like(x3)
    norm_E = np.linalg.norm(x3, axis=-1)
    err = (r3 - x3) @ C_t.T
    norm_Et = np.linalg.norm(err, axis=-1)
    out = {"metric_E": norm_E, "metric_Et": norm_Et}
    if p is not None and p_bar is not None:
        out["metric_Ep"] = np.linalg.norm(np.asarray(p) - np.asarray(p_bar), axis=-1)
    if len(t) > 1:
        t_tail = t[-1] - tail_frac * (t[-1] - t[0])
        sel = t >= t_tail
        for key in list(out.keys()):
            out["tail_" + key] = float(np.mean(out[key][sel]))
    else:
        for key in list(out.keys()):
            out["tail_" + key] = float(out[key][-1])
    return out


def evaluate_monitors(traj, model: FaultModel, gains: GainSet,
                      sector_samples: int = 0,
                      state_box: dict | None = None,
                      rng: np.random.Generator | None = None) -> MonitorReport:
    """Run all monitors on a recorded trajectory and aggregate verdicts.

    Windows whose dissipation residual exceeds its quadrature tolerance
    are warnings up to WARN_FACTOR times the tolerance and failures
    beyond that.
    """
    notes = []
    residual = np.asarray(traj.fine_residual[1:], dtype=float)
    tol = np.asarray(traj.fine_residual_tol[1:], dtype=float)
    if residual.size:
        ratio = np.abs(residual) / np.maximum(tol, 1e-300)
        n_warn = int(np.sum((ratio > 1.0) & (ratio <= WARN_FACTOR)))
        n_fail = int(np.sum(ratio > WARN_FACTOR))
        i_max = int(np.argmax(np.abs(residual)))
        max_res = float(np.abs(residual[i_max]))
        max_tol = float(tol[i_max])
    else:
        n_warn = n_fail = 0
        max_res = max_tol = 0.0
    if n_warn:
        notes.append(f"{n_warn} dissipation windows above tolerance (warning band)")
    if n_fail:
        notes.append(f"{n_fail} dissipation windows beyond {WARN_FACTOR}x tolerance")

    margin = None
    if sector_samples > 0:
        box = state_box or {"x1_max": model.friction.d_c, "x3_max": 1.0}
        margin = sector_probe(model, box, sector_samples, rng=rng)
        if margin < 0.0:
            n_fail += 1
            notes.append(f"sector probe violated: margin {margin:g}")

    # tail metrics come pre-computed on the fine series
    def tail_avg(series):
        t = traj.fine_t
        if len(t) < 2:
            return float(series[-1]) if len(series) else 0.0
        sel = t >= t[-1] - 0.05 * (t[-1] - t[0])
        return float(np.mean(np.asarray(series)[sel]))

    report = MonitorReport(
        max_residual=max_res,
        max_residual_tol=max_tol,
        n_warnings=n_warn,
        n_failures=n_fail,
        sector_margin=margin,
        tail_metric_E=tail_avg(traj.fine_metric_E),
        tail_metric_Et=tail_avg(traj.fine_metric_Et),
        tail_metric_Ep=tail_avg(traj.fine_metric_Ep),
        ok=n_fail == 0,
        notes=notes,
    )
    return report
