"""Pressure control laws: stabilization, integral tracking, actuator compensation.

The controller modulates friction through the effective normal stress:
negative well pressure strengthens the fault (stabilization), positive
pressure weakens it (tracking).  Gains must satisfy the sector-based
inequalities checked by validate_gains before any law is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FaultModel, PlantState, friction_branch, elastic_force

__all__ = [
    "GainSet",
    "GainCheck",
    "ReferenceParams",
    "ControllerState",
    "validate_gains",
    "left_pseudoinverse",
    "reference",
    "reference_accel",
    "stabilizing_pressure",
    "tracking_pressure",
    "integral_update",
    "nominal_pressure",
    "nominal_pressure_rate",
    "compensated_well_pressure",
]


@dataclass
class GainSet:
    """Controller gains and the sector constants they are checked against."""

    lambda_delta: float = 40.0
    lambda_v: float = 346.4
    lambda_xi: float = 5.0e3
    mu_min: float = 0.25
    l_delta: float = 0.04
    l_v: float = 0.0
    C_t: np.ndarray | None = None


@dataclass
class GainCheck:
    """Result of the gain condition with both thresholds and margins."""

    threshold_delta: float
    threshold_v: float
    ok_delta: bool
    ok_v: bool

    @property
    def ok(self) -> bool:
        return self.ok_delta and self.ok_v


@dataclass
class ReferenceParams:
    """Smooth slip reference: target displacement over an operational time."""

    d_max: float = 0.5
    t_op: float = 360.0 * 86400.0

    def __post_init__(self):
        if self.d_max <= 0 or self.t_op <= 0:
            raise ValueError("d_max and t_op must be positive")


@dataclass
class ControllerState:
    """Integral state of the tracking controller (one entry per well)."""

    xi: np.ndarray

    @classmethod
    def zero(cls, q: int) -> "ControllerState":
        return cls(np.zeros(q))


def validate_gains(gains: GainSet) -> GainCheck:
    """Check the strict gain inequalities required for passivity injection."""
    if gains.mu_min <= 0:
        raise ValueError("mu_min must be positive")
    thr_delta = (gains.l_delta + 1.0) / gains.mu_min
    thr_v = gains.l_v / gains.mu_min
    return GainCheck(
        threshold_delta=thr_delta,
        threshold_v=thr_v,
        ok_delta=gains.lambda_delta > thr_delta,
        ok_v=gains.lambda_v > thr_v,
    )


def left_pseudoinverse(C_p: np.ndarray) -> np.ndarray:
    """C_t = (C_p^T C_p)^-1 C_p^T, so that C_t C_p = I_q."""
    C_p = np.asarray(C_p, dtype=float)
    gram = C_p.T @ C_p
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError(
            f"C_p is rank deficient (normal-equation condition {cond:.3g})"
        )
    return np.linalg.solve(gram, C_p.T)


def reference(t, params: ReferenceParams):
    """Reference displacement and its rate at time t.

    r(t) = d_max s^3 (10 - 15 s + 6 s^2), s = t / t_op: a quintic ramp
    with zero velocity at both ends; r = d_max, r_dot = 0 for t > t_op.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("reference requires t >= 0")
    s = np.minimum(t / params.t_op, 1.0)
    r = params.d_max * s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2)
    r_dot = 30.0 * params.d_max / params.t_op * s ** 2 * (1.0 - s) ** 2
    if t.ndim:
        return r, r_dot
    return float(r), float(r_dot)


def reference_accel(t, params: ReferenceParams):
    """Second time derivative of the reference (needed by the compensator)."""
    t = np.asarray(t, dtype=float)
    s = np.minimum(t / params.t_op, 1.0)
    acc = 60.0 * params.d_max / params.t_op ** 2 * s * (1.0 - s) * (1.0 - 2.0 * s)
    return acc if acc.ndim else float(acc)


def stabilizing_pressure(x1, x3, gains: GainSet, C_p: np.ndarray) -> np.ndarray:
    """Passivity-restoring law p = -lambda_delta C_p^T x1 - lambda_v C_p^T |x3|."""
    x1 = np.asarray(x1, dtype=float)
    x3 = np.asarray(x3, dtype=float)
    return -gains.lambda_delta * (C_p.T @ x1) - gains.lambda_v * (C_p.T @ np.abs(x3))


def tracking_pressure(x1, x3, xi, r3, gains: GainSet, C_p: np.ndarray,
                      sign_x3: np.ndarray | None = None) -> np.ndarray:
    """Integral tracking law.

    p = -lambda_delta C_p^T x1 - lambda_v C_p^T |x3 - r3| - lambda_v C_p^T |r3|
        + lambda_xi C_p^T sign(x3) C_p xi

    sign(x3) resolves to 0 for arrested elements, which keeps the law
    continuous through stick episodes; sign_x3 overrides the pointwise
    sign (the simulator freezes it per step).
    """
    x1 = np.asarray(x1, dtype=float)
    x3 = np.asarray(x3, dtype=float)
    xi = np.asarray(xi, dtype=float)
    r3 = np.asarray(r3, dtype=float)
    s3 = np.sign(x3) if sign_x3 is None else sign_x3
    return (
        -gains.lambda_delta * (C_p.T @ x1)
        - gains.lambda_v * (C_p.T @ np.abs(x3 - r3))
        - gains.lambda_v * (C_p.T @ np.abs(r3))
        + gains.lambda_xi * (C_p.T @ (s3 * (C_p @ xi)))
    )


def integral_update(x3, r3, C_t: np.ndarray) -> np.ndarray:
    """Integral state rate xi_dot = C_t (r3 - x3)."""
    return C_t @ (np.asarray(r3, dtype=float) - np.asarray(x3, dtype=float))


def nominal_pressure(x1, x3, xi, r3, gains: GainSet, C_p: np.ndarray,
                     sign_x3: np.ndarray | None = None) -> np.ndarray:
    """Fault pressure demanded by the tracking law (alias used by the
    actuator compensator, where it plays the role of the nominal input)."""
    return tracking_pressure(x1, x3, xi, r3, gains, C_p, sign_x3=sign_x3)


def nominal_pressure_rate(x1, x3, xi, r3, r3_dot, x3_dot, gains: GainSet,
                          C_p: np.ndarray, C_t: np.ndarray,
                          sign_x3: np.ndarray | None = None,
                          sign_xr: np.ndarray | None = None,
                          sign_r: np.ndarray | None = None) -> np.ndarray:
    """Time derivative of the nominal fault pressure along the dynamics.

    Uses x1_dot = |x3|, xi_dot = C_t (r3 - x3) and treats the sign
    matrices as constant (their derivative vanishes while the system is
    in motion).
    """
    x3 = np.asarray(x3, dtype=float)
    r3 = np.asarray(r3, dtype=float)
    s3 = np.sign(x3) if sign_x3 is None else sign_x3
    sxr = np.sign(x3 - r3) if sign_xr is None else sign_xr
    sr = np.sign(r3) if sign_r is None else sign_r
    xi_dot = C_t @ (r3 - x3)
    return (
        -gains.lambda_delta * (C_p.T @ np.abs(x3))
        - gains.lambda_v * (C_p.T @ (sxr * (np.asarray(x3_dot) - np.asarray(r3_dot))))
        - gains.lambda_v * (C_p.T @ (sr * np.asarray(r3_dot)))
        + gains.lambda_xi * (C_p.T @ (s3 * (C_p @ xi_dot)))
    )


def compensated_well_pressure(state: PlantState, xi, t, gains: GainSet,
                              model: FaultModel, C_h: np.ndarray,
                              ref: ReferenceParams,
                              nominal_model: FaultModel | None = None,
                              p_fault: np.ndarray | None = None) -> np.ndarray:
    """Well pressure compensating the actuator (diffusion) dynamics.

    p_inf = C_h^-1 d/dt(p_bar) + p_bar - mu_min C_p^T |x3|, with the
    nominal fault pressure p_bar given by the tracking law.  The slip
    acceleration needed inside d/dt(p_bar) is evaluated from the
    (nominal) model dynamics at the supplied state, not by numerical
    differentiation.
    """
    nominal = nominal_model or model
    q = model.q
    _, r_dot = reference(t, ref)
    r3 = np.full(model.n, r_dot)
    r3_dot = np.full(model.n, reference_accel(t, ref))

    p_bar = nominal_pressure(state.x1, state.x3, xi, r3, gains, model.C_p)
    if p_fault is None:
        p_fault = p_bar

    force, _ = friction_branch(state.x1, state.x2, state.x3, p_fault, nominal)
    fe = elastic_force(state.x2, state.x3, nominal)
    x3_dot = nominal.M_inv @ (fe - force)

    p_bar_rate = nominal_pressure_rate(
        state.x1, state.x3, xi, r3, r3_dot, x3_dot, gains, model.C_p,
        gains.C_t if gains.C_t is not None else left_pseudoinverse(model.C_p),
    )
    if C_h.shape != (q, q):
        raise ValueError(f"C_h must be {q}x{q}, got {C_h.shape}")
    try:
        feedforward = np.linalg.solve(C_h, p_bar_rate)
    except np.linalg.LinAlgError as exc:
        raise ValueError("actuator matrix C_h is singular") from exc

    p_tilde = -gains.mu_min * (model.C_p.T @ np.abs(state.x3))
    return feedforward + p_bar + p_tilde
