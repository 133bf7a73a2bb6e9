"""Event-driven stiff integration of the coupled fault / controller system.

The integrator is a one-step TR-BDF2 composite (trapezoidal half stage,
then BDF2) with an embedded third-order error estimate, damped modified
Newton on the implicit stages, and adaptive steps.  Per-element stick and
slip modes are frozen during a step; zero crossings of the slip rate and
of the load-versus-strength margin are located by bisection on the cubic
Hermite interpolant and the step is re-split at the earliest crossing.
Stuck elements keep their velocity pinned at exactly zero: their state
rows integrate trivially, which keeps the Newton matrix well conditioned
without reindexing.

A fixed-step regularized engine (set-valued sign replaced by a saturation
with a thin boundary layer, integrated by BDF2) provides an independent
cross-check of the event-based path.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .control import (
    GainSet,
    ReferenceParams,
    left_pseudoinverse,
    reference,
    reference_accel,
)
from .model import STICK, FaultModel, PlantState, elastic_force, static_threshold
from .observer import ObserverConfig

__all__ = [
    "RunMode",
    "SimConfig",
    "Trajectory",
    "IntegrationError",
    "step_trbdf2",
    "locate_event",
    "mode_transition",
    "run",
    "regularized_oracle_run",
    "stick_episodes_from_series",
]

GAMMA = 2.0 - math.sqrt(2.0)          # TR stage fraction
STAGE_D = 1.0 - 1.0 / math.sqrt(2.0)  # implicit coefficient, equal in both stages


class RunMode(enum.Enum):
    OPEN_LOOP = "open_loop"
    STABILIZE = "stabilize"
    TRACK = "track"
    TRACK_ACTUATOR = "track_actuator"
    TRACK_ACTUATOR_OBSERVER = "track_actuator_observer"

    @property
    def has_integral(self) -> bool:
        return self in (RunMode.TRACK, RunMode.TRACK_ACTUATOR,
                        RunMode.TRACK_ACTUATOR_OBSERVER)

    @property
    def has_actuator(self) -> bool:
        return self in (RunMode.TRACK_ACTUATOR, RunMode.TRACK_ACTUATOR_OBSERVER)

    @property
    def has_observer(self) -> bool:
        return self is RunMode.TRACK_ACTUATOR_OBSERVER


@dataclass
class SimConfig:
    """Integration parameters and the closed-loop wiring mode."""

    t_end: float = 600.0
    dt_init: float = 1.0e-4
    dt_min: float = 1.0e-10
    dt_max: float = 10.0
    newton_tol: float = 1.0e-10
    newton_max_iter: int = 12
    event_tol: float = 1.0e-12
    stick_velocity_floor: float = 1.0e-14
    mode: RunMode = RunMode.OPEN_LOOP
    # Damping rate [1/s] applied to the non-uniform part of the slip-rate
    # estimate.  The scalar measurement only observes the fault average;
    # the orthogonal estimate components are both unobservable and prone
    # to ringing through the pressure law, so they are relaxed towards
    # the estimated average.  Uniform motion is untouched.
    obs_diff_damping: float = 1.0e5
    # Relative hysteresis of the stick-to-slip transition: a stuck element
    # unlocks once its load exceeds the strength by this fraction.  Keeps
    # elements resting exactly at the verge from sputtering on roundoff
    # noise; far below any physical stress scale of interest.
    unlock_band_rel: float = 1.0e-9
    err_rtol: float = 1.0e-6
    debug_every: int = 0  # print step diagnostics every N accepted steps
    max_slip_per_step: float = 0.2
    trigger_velocity: float = 1.0e-12
    max_steps: int = 2_000_000
    max_samples: int = 2000
    # Safety cap on the acceleration feedforward inside the actuator
    # compensator, as a multiple of the peak reference acceleration.  The
    # feedforward is the exact rate of the pressure law along the
    # controller's own dynamics, which keeps the loop through p neutral;
    # the cap merely bounds the channel during violent transients where
    # frozen-sign glitches could otherwise be amplified.
    ff_accel_cap_factor: float = 1.0e6

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = RunMode(self.mode)
        if not (0 < self.dt_min <= self.dt_init <= self.dt_max):
            raise ValueError("require 0 < dt_min <= dt_init <= dt_max")
        for name in ("newton_tol", "event_tol", "stick_velocity_floor", "err_rtol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Trajectory:
    """Recorded run: downsampled state samples plus per-step monitor series.

    The sample arrays hold the full state at an adaptive cadence (always
    including events); the fine arrays hold scalar monitor channels at
    every accepted step, dense enough for the energy-balance checks.
    """

    t: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    xi: np.ndarray | None
    p: np.ndarray
    p_inf: np.ndarray | None
    xhat1: np.ndarray | None
    xhat2: np.ndarray | None
    xhat3: np.ndarray | None
    y_m: np.ndarray
    V: np.ndarray
    supply: np.ndarray
    residual: np.ndarray
    metric_E: np.ndarray
    metric_Et: np.ndarray
    metric_Ep: np.ndarray
    fine_t: np.ndarray
    fine_V: np.ndarray
    fine_supply: np.ndarray
    fine_residual: np.ndarray
    fine_residual_tol: np.ndarray
    fine_max_rate: np.ndarray
    fine_metric_E: np.ndarray
    fine_metric_Et: np.ndarray
    fine_metric_Ep: np.ndarray
    events: list
    meta: dict

    @property
    def n_events(self) -> int:
        return len(self.events)

    def final_state(self) -> PlantState:
        mode = np.sign(self.x3[-1]).astype(int)
        return PlantState(self.x1[-1].copy(), self.x2[-1].copy(),
                          self.x3[-1].copy(), mode)


class IntegrationError(RuntimeError):
    """Integration could not continue; carries the last good trajectory."""

    def __init__(self, message: str, trajectory: Trajectory | None = None):
        super().__init__(message)
        self.trajectory = trajectory


# ---------------------------------------------------------------------------
# TR-BDF2 single step
# ---------------------------------------------------------------------------

def _newton_solve(residual, y0, solve, tol, max_iter, weights):
    """Damped modified-Newton loop; returns (y, converged, iterations).

    Converged when the update is below 10% of the local-error budget in
    the error-weighted norm, or below the configured relative tolerance
    against the state magnitude (whichever is reached first).
    """
    y = y0.copy()
    r = residual(y)
    if not np.all(np.isfinite(r)):
        return y, False, 0
    for it in range(1, max_iter + 1):
        delta = solve(-r)
        step = 1.0
        y_new = y + delta
        r_new = residual(y_new)
        for _ in range(5):
            if np.all(np.isfinite(r_new)) and \
                    np.linalg.norm(r_new) <= np.linalg.norm(r) * (1.0 + 1e-8) + 1e-300:
                break
            step *= 0.5
            y_new = y + step * delta
            r_new = residual(y_new)
        y, r = y_new, r_new
        upd = step * delta
        disp_ew = np.sqrt(np.mean((upd / weights) ** 2))
        disp_rel = np.sqrt(np.mean((upd / (np.abs(y) + 1e-300)) ** 2))
        if disp_ew <= 0.1 or disp_rel <= tol:
            return y, True, it
    return y, False, max_iter


def step_trbdf2(rhs, jac, t, y, dt, *, newton_tol=1e-10, newton_max_iter=12,
                lu=None, weights=None):
    """One TR-BDF2 composite step.

    rhs(t, y) defines the system; jac(t, y) is consulted only when no
    factorization is supplied through `lu`.  Returns (y_new, err, info):
    err is the embedded local error estimate (smoothed by the stage
    matrix); info carries the endpoint derivatives, Newton statistics and
    the factorization for reuse.  On Newton failure y_new is None.
    """
    y = np.asarray(y, dtype=float)
    ndim = y.size
    if weights is None:
        weights = np.abs(y) + 1.0
    f0 = rhs(t, y)

    if lu is None:
        if jac is None:
            raise ValueError("step_trbdf2 needs either jac or a precomputed lu")
        J = jac(t, y)
        lu = scipy.linalg.lu_factor(np.eye(ndim) - STAGE_D * dt * J)
    solve = lambda b: scipy.linalg.lu_solve(lu, b)

    h_tr = GAMMA * dt
    a1 = y + 0.5 * h_tr * f0
    res1 = lambda z: z - a1 - 0.5 * h_tr * rhs(t + h_tr, z)
    y_gamma, ok1, it1 = _newton_solve(res1, y + h_tr * f0, solve,
                                      newton_tol, newton_max_iter, weights)
    if not ok1 or not np.all(np.isfinite(y_gamma)):
        return None, None, {"converged": False, "lu": lu, "iterations": it1}
    f_gamma = rhs(t + h_tr, y_gamma)

    c1 = 1.0 / (GAMMA * (2.0 - GAMMA))
    c2 = (1.0 - GAMMA) ** 2 / (GAMMA * (2.0 - GAMMA))
    a2 = c1 * y_gamma - c2 * y
    res2 = lambda z: z - a2 - STAGE_D * dt * rhs(t + dt, z)
    y_new, ok2, it2 = _newton_solve(res2, y + (y_gamma - y) / GAMMA, solve,
                                    newton_tol, newton_max_iter, weights)
    if not ok2 or not np.all(np.isfinite(y_new)):
        return None, None, {"converged": False, "lu": lu, "iterations": it1 + it2}
    f1 = rhs(t + dt, y_new)

    raw_err = (dt / 3.0) * ((1.0 - GAMMA) * f0 - f_gamma + GAMMA * f1)
    err = solve(raw_err)

    info = {
        "converged": True,
        "f0": f0,
        "f1": f1,
        "lu": lu,
        "iterations": it1 + it2,
    }
    return y_new, err, info


# ---------------------------------------------------------------------------
# Event helpers
# ---------------------------------------------------------------------------

def locate_event(event_fn, t_lo, t_hi, *, f_lo=None, f_hi=None,
                 value_tol=1e-12, max_iter=80):
    """Bisection refinement of a sign change of event_fn on [t_lo, t_hi].

    Returns the crossing time, or None when the function does not change
    sign across the interval.
    """
    f_lo = event_fn(t_lo) if f_lo is None else f_lo
    f_hi = event_fn(t_hi) if f_hi is None else f_hi
    if f_lo == 0.0:
        return t_lo
    if f_lo * f_hi > 0.0:
        return None
    lo, hi = t_lo, t_hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        f_mid = event_fn(mid)
        if abs(f_mid) <= value_tol:
            return mid
        if f_lo * f_mid <= 0.0:
            hi = mid
        else:
            lo, f_lo = mid, f_mid
    return hi


def mode_transition(state: PlantState, element: int, model: FaultModel, p,
                    band: float = 0.0) -> int:
    """Resolve the mode of one element after a located event.

    The element's velocity is pinned to exactly zero; it sticks when the
    load stays below the static strength and otherwise (re)enters slip in
    the direction of the load.  A positive band captures marginally loaded
    elements into stick, mirroring the hysteresis of the unlock event.
    """
    state.x3[element] = 0.0
    fe = elastic_force(state.x2, state.x3, model)
    load = fe[element] + model.F_s_star[element]
    strength = static_threshold(np.maximum(state.x1, 0.0), p, model)[element]
    if abs(load) < strength + band:
        state.mode[element] = STICK
    else:
        state.mode[element] = int(np.sign(load)) if load != 0.0 else 1
    return int(state.mode[element])


def stick_episodes_from_series(t, x3, layer, min_dwell_samples=2):
    """Count per-element entries of |x3| into the boundary layer.

    Used to extract a stick count from a regularized (event-free)
    trajectory comparable with the event engine's Slip->Stick log.
    """
    x3 = np.asarray(x3, dtype=float)
    if x3.ndim == 1:
        x3 = x3[:, None]
    count = 0
    for col in x3.T:
        inside = np.abs(col) < layer
        entries = np.flatnonzero(~inside[:-1] & inside[1:]) + 1
        for k in entries:
            if inside[k:k + min_dwell_samples].all():
                count += 1
    return count


# ---------------------------------------------------------------------------
# Coupled closed-loop system
# ---------------------------------------------------------------------------

@dataclass
class _Frozen:
    """Signs and branch flags held fixed during one integration step."""

    mode: np.ndarray          # plant stick/slip modes
    s_gate: np.ndarray        # sign gating the integral term
    s_xr: np.ndarray          # sign of x3_fb - r3 inside the compensator
    obs_branch: np.ndarray | None  # observer per-element slip sign (0 = clipped)


class _System:
    """Mode-specific augmented dynamics with analytic Jacobian."""

    def __init__(self, model: FaultModel, gains: GainSet, obs: ObserverConfig | None,
                 cfg: SimConfig, ref: ReferenceParams, C_h: np.ndarray | None,
                 C_m: np.ndarray | None):
        self.model = model
        self.gains = gains
        self.obs = obs
        self.cfg = cfg
        self.ref = ref
        self.mode = cfg.mode
        n, q = model.n, model.q

        self.C_t = gains.C_t if gains.C_t is not None else left_pseudoinverse(model.C_p)
        self.C_h = None if C_h is None else np.asarray(C_h, dtype=float).reshape(q, q)
        if C_m is None:
            C_m = np.full((1, n), 1.0 / n)
        self.C_m = np.asarray(C_m, dtype=float).reshape(1, n)

        if self.mode.has_actuator and self.C_h is None:
            raise ValueError("actuator modes require C_h")
        if self.mode.has_observer and obs is None:
            raise ValueError("observer mode requires an ObserverConfig")

        # state layout
        self.i_x1 = slice(0, n)
        self.i_x2 = slice(n, 2 * n)
        self.i_x3 = slice(2 * n, 3 * n)
        ofs = 3 * n
        self.i_xi = None
        self.i_p = None
        self.i_h1 = self.i_h2 = self.i_h3 = None
        if self.mode.has_integral:
            self.i_xi = slice(ofs, ofs + q)
            ofs += q
        if self.mode.has_actuator:
            self.i_p = slice(ofs, ofs + q)
            ofs += q
        if self.mode.has_observer:
            self.i_h1 = slice(ofs, ofs + n)
            self.i_h2 = slice(ofs + n, ofs + 2 * n)
            self.i_h3 = slice(ofs + 2 * n, ofs + 3 * n)
            ofs += 3 * n
        self.ndim = ofs

        self.Minv = model.M_inv
        if obs is not None:
            self.Nominal = obs.nominal
        else:
            self.Nominal = model
        self.NMinv = self.Nominal.M_inv

        atol = np.empty(self.ndim)
        atol[self.i_x1] = 1e-10
        atol[self.i_x2] = 1e-10
        atol[self.i_x3] = 1e-14
        if self.i_xi is not None:
            atol[self.i_xi] = 1e-12
        if self.i_p is not None:
            atol[self.i_p] = 1e-10
        if self.i_h1 is not None:
            atol[self.i_h1] = 1e-10
            atol[self.i_h2] = 1e-10
            atol[self.i_h3] = 1e-14
        self.atol = atol

        # peak |d/dt r3| of the quintic ramp: 60 d_max/t_op^2 * max s(1-s)(1-2s)
        peak_ref_accel = 60.0 * ref.d_max / ref.t_op ** 2 * 0.09622504486493764
        self.ff_cap = cfg.ff_accel_cap_factor * peak_ref_accel

    # -- reference ----------------------------------------------------------

    def r3(self, t) -> float:
        if not self.mode.has_integral:
            return 0.0
        _, rd = reference(t, self.ref)
        return rd

    # -- packing ------------------------------------------------------------

    def pack_initial(self, x0: PlantState) -> np.ndarray:
        y = np.zeros(self.ndim)
        y[self.i_x1] = x0.x1
        y[self.i_x2] = x0.x2
        y[self.i_x3] = x0.x3
        return y

    def plant_view(self, y, plant_mode) -> PlantState:
        return PlantState(y[self.i_x1], y[self.i_x2], y[self.i_x3], plant_mode)

    # -- frozen configuration -------------------------------------------------

    def freeze(self, t, y, plant_mode) -> _Frozen:
        x3_fb = y[self.i_h3] if self.mode.has_observer else y[self.i_x3]
        r3 = self.r3(t)
        floor = self.cfg.stick_velocity_floor
        s_gate = np.where(np.abs(x3_fb) > floor, np.sign(x3_fb), 0.0)
        s_xr = np.where(np.abs(x3_fb - r3) > floor, np.sign(x3_fb - r3), -1.0)
        # The estimate's friction always takes the quasi-static projection
        # form clip(load, +-strength): without event location a signed slip
        # branch chatters across zero velocity at the friction-relay scale.
        obs_branch = np.zeros(self.model.n) if self.mode.has_observer else None
        return _Frozen(mode=plant_mode.copy(), s_gate=s_gate, s_xr=s_xr,
                       obs_branch=obs_branch)

    def freeze_tag(self, frz: _Frozen):
        return (
            frz.mode.tobytes(), frz.s_gate.tobytes(), frz.s_xr.tobytes(),
            None if frz.obs_branch is None else frz.obs_branch.tobytes(),
        )

    # -- pressure laws ----------------------------------------------------------

    def fault_pressure(self, t, y, frz: _Frozen) -> np.ndarray:
        """Pressure applied on the fault for the current wiring."""
        g, C_p = self.gains, self.model.C_p
        if self.mode is RunMode.OPEN_LOOP:
            return np.zeros(self.model.q)
        if self.mode is RunMode.STABILIZE:
            return -g.lambda_delta * (C_p.T @ y[self.i_x1]) \
                - g.lambda_v * (C_p.T @ np.abs(y[self.i_x3]))
        if self.mode is RunMode.TRACK:
            return self._p_bar(t, y, frz)
        return y[self.i_p].copy()

    def _fb(self, y):
        """Feedback source: the estimate when the observer is in the loop."""
        if self.mode.has_observer:
            return y[self.i_h1], y[self.i_h2], y[self.i_h3]
        return y[self.i_x1], y[self.i_x2], y[self.i_x3]

    def _p_bar(self, t, y, frz: _Frozen) -> np.ndarray:
        """Nominal (tracking-law) fault pressure at the feedback state."""
        g, C_p = self.gains, self.model.C_p
        x1, _, x3 = self._fb(y)
        xi = y[self.i_xi]
        r3 = self.r3(t)
        ones = np.ones(self.model.n)
        return (
            -g.lambda_delta * (C_p.T @ x1)
            - g.lambda_v * (C_p.T @ np.abs(x3 - r3))
            - g.lambda_v * (C_p.T @ (abs(r3) * ones))
            + g.lambda_xi * (C_p.T @ (frz.s_gate * (C_p @ xi)))
        )

    # -- friction pieces -----------------------------------------------------

    def _plant_force(self, y, p, frz: _Frozen):
        """Frozen-mode plant friction and the elastic/friction imbalance."""
        m = self.model
        x1 = np.maximum(y[self.i_x1], 0.0)
        x2 = y[self.i_x2]
        x3 = y[self.i_x3]
        fe = -m.K_bar @ x2 - m.H_bar @ x3
        sig_eff = np.maximum(m.sigma_n_prime - m.C_p @ p, 0.0)
        mu = m.mu(x1)
        slip = frz.mode != STICK
        force = np.where(slip, frz.mode * mu * sig_eff - m.F_s_star, fe)
        imb = fe - force
        imb[~slip] = 0.0
        return fe, force, imb, sig_eff, mu, slip

    def _nominal_accel(self, y, p, frz: _Frozen):
        """Slip acceleration of the nominal model at the feedback state.

        With the observer in the loop the estimate's friction takes the
        quasi-static projection clip(load, +-strength): the estimate has
        no event handling, and the projection balances the load exactly
        in stick while matching the driven slip force.  Without the
        observer the true plant's frozen modes apply.
        """
        nom = self.Nominal
        if self.mode.has_observer:
            x1 = np.maximum(y[self.i_h1], 0.0)
            x2 = y[self.i_h2]
            x3 = y[self.i_h3]
            fe = -nom.K_bar @ x2 - nom.H_bar @ x3
            sig_eff = np.maximum(nom.sigma_n_prime - nom.C_p @ p, 0.0)
            strength = nom.mu(x1) * sig_eff
            load = fe + nom.F_s_star
            force = np.clip(load, -strength, strength) - nom.F_s_star
            return self.NMinv @ (fe - force)
        x1 = np.maximum(y[self.i_x1], 0.0)
        x2 = y[self.i_x2]
        x3 = y[self.i_x3]
        branch = frz.mode.astype(float)
        fe = -nom.K_bar @ x2 - nom.H_bar @ x3
        sig_eff = np.maximum(nom.sigma_n_prime - nom.C_p @ p, 0.0)
        strength = nom.mu(x1) * sig_eff
        load = fe + nom.F_s_star
        slip = branch != 0
        force = np.where(slip, branch * strength - nom.F_s_star,
                         np.clip(load, -strength, strength) - nom.F_s_star)
        return self.NMinv @ (fe - force)

    # -- rhs ---------------------------------------------------------------------

    def rhs(self, t, y, frz: _Frozen) -> np.ndarray:
        m = self.model
        n = m.n
        g = self.gains
        C_p = m.C_p
        dy = np.zeros(self.ndim)

        p = self.fault_pressure(t, y, frz)
        fe, force, imb, _, _, slip = self._plant_force(y, p, frz)
        x3 = y[self.i_x3]

        dy[self.i_x1] = np.where(slip, frz.mode * x3, 0.0)
        dy[self.i_x2] = x3
        dx3 = self.Minv @ imb
        dx3[~slip] = 0.0
        dy[self.i_x3] = dx3

        if not self.mode.has_integral:
            return dy

        r3 = self.r3(t)
        x3_fb = y[self.i_h3] if self.mode.has_observer else x3
        xi_dot = self.C_t @ (r3 - x3_fb)
        dy[self.i_xi] = xi_dot

        if self.mode.has_actuator:
            p_state = y[self.i_p]
            if self.mode.has_observer:
                # the feedback state is the estimate, so the exact rate of
                # the pressure law follows the observer dynamics, injection
                # and differential damping included; anything else breaks
                # the feedforward cancellation and destabilizes the loop
                # through p
                obs = self.obs
                xh3 = y[self.i_h3]
                innov = float(self.C_m @ x3) - float(self.C_m @ xh3)
                acc_nom = self._nominal_accel(y, p_state, frz)
                fb_rate3 = acc_nom + obs.lambda2 * obs.L2 * innov \
                    + self.cfg.obs_diff_damping * (xh3.mean() - xh3)
                dy[self.i_h1] = np.abs(xh3)
                dy[self.i_h2] = xh3 + obs.lambda1 * obs.L1 * innov
                dy[self.i_h3] = fb_rate3
            else:
                fb_rate3 = dy[self.i_x3]
            r3dot = reference_accel(t, self.ref)
            d_acc = np.clip(fb_rate3 - r3dot, -self.ff_cap, self.ff_cap)
            p_bar = self._p_bar(t, y, frz)
            s_r = np.sign(r3)
            ones = np.ones(n)
            p_bar_rate = (
                -g.lambda_delta * (C_p.T @ np.abs(x3_fb))
                - g.lambda_v * (C_p.T @ (frz.s_xr * d_acc))
                - g.lambda_v * (C_p.T @ (s_r * r3dot * ones))
                + g.lambda_xi * (C_p.T @ (frz.s_gate * (C_p @ xi_dot)))
            )
            p_tilde_inf = -g.mu_min * (C_p.T @ np.abs(x3_fb))
            dy[self.i_p] = p_bar_rate + self.C_h @ (p_bar - p_state + p_tilde_inf)
        return dy

    # -- jacobian ------------------------------------------------------------------

    def jac(self, t, y, frz: _Frozen) -> np.ndarray:
        m = self.model
        n = m.n
        g = self.gains
        C_p = m.C_p
        J = np.zeros((self.ndim, self.ndim))

        p = self.fault_pressure(t, y, frz)
        x1 = np.maximum(y[self.i_x1], 0.0)
        x3 = y[self.i_x3]
        slip = frz.mode != STICK
        sig = m.sigma_n_prime - C_p @ p
        active = sig > 0.0
        sig_eff = np.maximum(sig, 0.0)
        mu = m.mu(x1)
        fr = m.friction
        mu_prime = (fr.delta_mu / fr.d_c) * np.exp(-x1 / fr.d_c)

        J[self.i_x1, self.i_x3] = np.diag(np.where(slip, frz.mode, 0.0))
        J[self.i_x2, self.i_x3] = np.eye(n)

        slip_f = slip.astype(float)
        dimb_dx2 = -slip_f[:, None] * m.K_bar
        dimb_dx3 = -slip_f[:, None] * m.H_bar
        dimb_dx1 = -np.diag(np.where(slip, frz.mode * mu_prime * sig_eff, 0.0))
        dimb_dp = slip_f[:, None] * ((frz.mode * mu * active)[:, None] * C_p)

        plant_blocks = {
            "x1": self.Minv @ dimb_dx1,
            "x2": self.Minv @ dimb_dx2,
            "x3": self.Minv @ dimb_dx3,
            "p": self.Minv @ dimb_dp,
        }
        Jp = plant_blocks["p"]
        J[self.i_x3, self.i_x1] = plant_blocks["x1"]
        J[self.i_x3, self.i_x2] = plant_blocks["x2"]
        J[self.i_x3, self.i_x3] += plant_blocks["x3"]

        if self.mode is RunMode.STABILIZE:
            J[self.i_x3, self.i_x1] += Jp @ (-g.lambda_delta * C_p.T)
            J[self.i_x3, self.i_x3] += Jp @ (-g.lambda_v * C_p.T @ np.diag(np.sign(x3)))
        elif self.mode is RunMode.TRACK:
            for key, blk in self._p_bar_jac(t, y, frz).items():
                J[self.i_x3, self._fb_slice(key)] += Jp @ blk
        elif self.mode.has_actuator:
            J[self.i_x3, self.i_p] = Jp

        if not self.mode.has_integral:
            return J

        x3_fb_slice = self.i_h3 if self.mode.has_observer else self.i_x3
        J[self.i_xi, x3_fb_slice] = -self.C_t

        if self.mode.has_actuator:
            self._actuator_jac(t, y, frz, J, plant_blocks)
        if self.mode.has_observer:
            self._observer_jac(t, y, frz, J)
        return J

    def _fb_slice(self, key):
        if self.mode.has_observer:
            table = {"x1": self.i_h1, "x2": self.i_h2, "x3": self.i_h3}
        else:
            table = {"x1": self.i_x1, "x2": self.i_x2, "x3": self.i_x3}
        table["xi"] = self.i_xi
        return table[key]

    def _p_bar_jac(self, t, y, frz: _Frozen) -> dict:
        g, C_p = self.gains, self.model.C_p
        _, _, x3_fb = self._fb(y)
        r3 = self.r3(t)
        return {
            "x1": -g.lambda_delta * C_p.T,
            "x3": -g.lambda_v * C_p.T @ np.diag(np.sign(x3_fb - r3)),
            "xi": g.lambda_xi * C_p.T @ np.diag(frz.s_gate) @ C_p,
        }

    def _nominal_accel_jac(self, y, p, frz: _Frozen) -> dict:
        """Blocks of d(accel_fb)/d(x1_fb, x2_fb, x3_fb, p)."""
        nom = self.Nominal
        fr = nom.friction
        if self.mode.has_observer:
            x1 = np.maximum(y[self.i_h1], 0.0)
            x2 = y[self.i_h2]
            x3 = y[self.i_h3]
            branch = np.zeros(nom.n)
        else:
            x1 = np.maximum(y[self.i_x1], 0.0)
            x2 = y[self.i_x2]
            x3 = y[self.i_x3]
            branch = frz.mode.astype(float)
        fe = -nom.K_bar @ x2 - nom.H_bar @ x3
        sig = nom.sigma_n_prime - nom.C_p @ p
        active = sig > 0.0
        sig_eff = np.maximum(sig, 0.0)
        mu = nom.mu(x1)
        mu_prime = (fr.delta_mu / fr.d_c) * np.exp(-x1 / fr.d_c)
        strength = mu * sig_eff
        load = fe + nom.F_s_star
        slip = branch != 0
        inside = ~slip & (np.abs(load) <= strength)
        samp = np.where(slip, branch,
                        np.where(load > strength, 1.0,
                                 np.where(load < -strength, -1.0, 0.0)))
        row = (~inside).astype(float)
        dimb_dx2 = -row[:, None] * nom.K_bar
        dimb_dx3 = -row[:, None] * nom.H_bar
        dimb_dx1 = -np.diag(samp * mu_prime * sig_eff)
        dimb_dp = (samp * mu * active)[:, None] * nom.C_p
        return {
            "x1": self.NMinv @ dimb_dx1,
            "x2": self.NMinv @ dimb_dx2,
            "x3": self.NMinv @ dimb_dx3,
            "p": self.NMinv @ dimb_dp,
        }

    def _actuator_jac(self, t, y, frz: _Frozen, J, plant_blocks):
        g, C_p = self.gains, self.model.C_p
        n = self.model.n
        _, _, x3_fb = self._fb(y)
        r3dot = reference_accel(t, self.ref)

        if self.mode.has_observer:
            obs = self.obs
            nd = self.model.n
            acc_blocks = dict(self._nominal_accel_jac(y, y[self.i_p], frz))
            L2C = obs.lambda2 * np.outer(obs.L2, self.C_m.ravel())
            diff_damp = self.cfg.obs_diff_damping * (np.full((nd, nd), 1.0 / nd)
                                                     - np.eye(nd))
            acc_blocks["x3"] = acc_blocks["x3"] - L2C + diff_damp
            acc_blocks["x3_true"] = L2C
            innov = float(self.C_m @ y[self.i_x3]) - float(self.C_m @ y[self.i_h3])
            xh3 = y[self.i_h3]
            fb_rate3 = self._nominal_accel(y, y[self.i_p], frz) \
                + obs.lambda2 * obs.L2 * innov \
                + self.cfg.obs_diff_damping * (xh3.mean() - xh3)
        else:
            acc_blocks = dict(plant_blocks)
            frz_rhs = self.rhs(t, y, frz)
            fb_rate3 = frz_rhs[self.i_x3]

        unclipped = (np.abs(fb_rate3 - r3dot) < self.ff_cap).astype(float)
        acc_blocks = {k: unclipped[:, None] * v for k, v in acc_blocks.items()}
        sgn_fb = np.diag(np.sign(x3_fb))
        Sxr = np.diag(frz.s_xr)
        Sg = np.diag(frz.s_gate)
        LvSxr = g.lambda_v * C_p.T @ Sxr

        pb = self._p_bar_jac(t, y, frz)
        term_x1 = -LvSxr @ acc_blocks["x1"] + self.C_h @ pb["x1"]
        term_x2 = -LvSxr @ acc_blocks["x2"]
        term_x3 = (
            -g.lambda_delta * C_p.T @ sgn_fb
            - LvSxr @ acc_blocks["x3"]
            - g.lambda_xi * C_p.T @ Sg @ C_p @ self.C_t
            + self.C_h @ (pb["x3"] - g.mu_min * C_p.T @ sgn_fb)
        )
        term_xi = self.C_h @ pb["xi"]
        term_p = -LvSxr @ acc_blocks["p"] - self.C_h

        rows = J[self.i_p]
        rows[:, self._fb_slice("x1")] += term_x1
        rows[:, self._fb_slice("x2")] += term_x2
        rows[:, self._fb_slice("x3")] += term_x3
        rows[:, self.i_xi] += term_xi
        rows[:, self.i_p] += term_p
        if self.mode.has_observer and "x3_true" in acc_blocks:
            rows[:, self.i_x3] += -LvSxr @ acc_blocks["x3_true"]

    def _observer_jac(self, t, y, frz: _Frozen, J):
        obs = self.obs
        n = self.model.n
        xh3 = y[self.i_h3]
        blocks = self._nominal_accel_jac(y, y[self.i_p], frz)
        L1C = obs.lambda1 * np.outer(obs.L1, self.C_m.ravel())
        L2C = obs.lambda2 * np.outer(obs.L2, self.C_m.ravel())
        diff_damp = self.cfg.obs_diff_damping * (np.full((n, n), 1.0 / n)
                                                 - np.eye(n))

        J[self.i_h1, self.i_h3] = np.diag(np.sign(xh3))
        J[self.i_h2, self.i_h3] = np.eye(n) - L1C
        J[self.i_h2, self.i_x3] = L1C
        J[self.i_h3, self.i_h1] = blocks["x1"]
        J[self.i_h3, self.i_h2] = blocks["x2"]
        J[self.i_h3, self.i_h3] = blocks["x3"] - L2C + diff_damp
        J[self.i_h3, self.i_p] = blocks["p"]
        J[self.i_h3, self.i_x3] = L2C

    # -- event functions --------------------------------------------------------

    def event_values(self, t, y, plant_mode) -> np.ndarray:
        """Per-element event margins.

        Slipping element: signed velocity mode * x3 (event on reaching
        zero).  Stuck element: strength - |load| plus a small hysteresis
        band, so that elements resting exactly at the verge of slip do
        not retrigger on roundoff noise; they unlock once the load
        exceeds the strength by the band.
        """
        m = self.model
        frz = self.freeze(t, y, plant_mode)
        p = self.fault_pressure(t, y, frz)
        x1 = np.maximum(y[self.i_x1], 0.0)
        fe = -m.K_bar @ y[self.i_x2] - m.H_bar @ y[self.i_x3]
        load = fe + m.F_s_star
        strength = m.mu(x1) * np.maximum(m.sigma_n_prime - m.C_p @ p, 0.0)
        band = self.cfg.event_tol + self.cfg.unlock_band_rel * strength
        slip = plant_mode != STICK
        return np.where(slip, plant_mode * y[self.i_x3],
                        strength - np.abs(load) + band)

    # -- monitors -----------------------------------------------------------------

    def monitors(self, t, y, plant_mode) -> dict:
        """Scalar channels recorded at every accepted step."""
        m = self.model
        frz = self.freeze(t, y, plant_mode)
        p = self.fault_pressure(t, y, frz)
        _, force, _, _, _, _ = self._plant_force(y, p, frz)
        x1 = y[self.i_x1]
        x2 = y[self.i_x2]
        x3 = y[self.i_x3]
        V = 0.5 * (x1 @ x1 + x2 @ (m.K_bar @ x2) + x3 @ (m.M @ x3))
        supply = x1 @ np.abs(x3) - x3 @ force - x3 @ (m.H_bar @ x3)
        r3 = self.r3(t)
        err_t = self.C_t @ (r3 - x3)
        if self.mode.has_actuator:
            ep = float(np.linalg.norm(y[self.i_p] - self._p_bar(t, y, frz)))
        elif self.mode.has_integral:
            ep = 0.0
        else:
            ep = 0.0
        return {
            "p": p,
            "V": float(V),
            "supply": float(supply),
            "max_rate": float(np.max(np.abs(x3))) if m.n else 0.0,
            "metric_E": float(np.linalg.norm(x3)),
            "metric_Et": float(np.linalg.norm(err_t)),
            "metric_Ep": ep,
            "y_m": float(self.C_m @ x3),
        }

    def well_pressure_output(self, t, y, plant_mode):
        """Logged well-head pressure p_inf (actuator modes only)."""
        if not self.mode.has_actuator:
            return None
        g, C_p = self.gains, self.model.C_p
        n = self.model.n
        frz = self.freeze(t, y, plant_mode)
        x3_fb = y[self.i_h3] if self.mode.has_observer else y[self.i_x3]
        r3 = self.r3(t)
        r3dot = reference_accel(t, self.ref)
        if self.mode.has_observer:
            innov = float(self.C_m @ y[self.i_x3]) - float(self.C_m @ y[self.i_h3])
            fb_rate3 = self._nominal_accel(y, y[self.i_p], frz) \
                + self.obs.lambda2 * self.obs.L2 * innov
        else:
            fb_rate3 = self.rhs(t, y, frz)[self.i_x3]
        d_acc = np.clip(fb_rate3 - r3dot, -self.ff_cap, self.ff_cap)
        xi_dot = self.C_t @ (r3 - x3_fb)
        p_bar_rate = (
            -g.lambda_delta * (C_p.T @ np.abs(x3_fb))
            - g.lambda_v * (C_p.T @ (frz.s_xr * d_acc))
            - g.lambda_v * (C_p.T @ (np.sign(r3) * r3dot * np.ones(n)))
            + g.lambda_xi * (C_p.T @ (frz.s_gate * (C_p @ xi_dot)))
        )
        p_bar = self._p_bar(t, y, frz)
        p_tilde = -g.mu_min * (C_p.T @ np.abs(x3_fb))
        return np.linalg.solve(self.C_h, p_bar_rate) + p_bar + p_tilde


# ---------------------------------------------------------------------------
# Recording
# ---------------------------------------------------------------------------

class _Recorder:
    def __init__(self, sys: _System, cfg: SimConfig):
        self.sys = sys
        self.cfg = cfg
        self.samples = []
        self.fine = []
        self.events = []
        self.last_sample_t = -np.inf
        self.last_sample_logv = None
        self.min_dt_out = cfg.t_end / max(cfg.max_samples, 10)

    def record_fine(self, t, mon, residual, res_tol):
        self.fine.append((t, mon["V"], mon["supply"], residual, res_tol,
                          mon["max_rate"], mon["metric_E"], mon["metric_Et"],
                          mon["metric_Ep"]))

    def maybe_sample(self, t, y, plant_mode, mon, force=False):
        logv = math.log10(mon["max_rate"] + 1e-30)
        due = (
            force
            or not self.samples
            or (t - self.last_sample_t) >= self.min_dt_out
            or (self.last_sample_logv is not None
                and abs(logv - self.last_sample_logv) >= 0.1)
        )
        if not due:
            return
        sys = self.sys
        entry = {
            "t": t,
            "x1": y[sys.i_x1].copy(),
            "x2": y[sys.i_x2].copy(),
            "x3": y[sys.i_x3].copy(),
            "xi": y[sys.i_xi].copy() if sys.i_xi is not None else None,
            "p": mon["p"].copy(),
            "p_inf": sys.well_pressure_output(t, y, plant_mode),
            "xhat1": y[sys.i_h1].copy() if sys.i_h1 is not None else None,
            "xhat2": y[sys.i_h2].copy() if sys.i_h2 is not None else None,
            "xhat3": y[sys.i_h3].copy() if sys.i_h3 is not None else None,
            "mon": mon,
        }
        self.samples.append(entry)
        self.last_sample_t = t
        self.last_sample_logv = logv

    def build(self, meta) -> Trajectory:
        s = self.samples
        fine = np.asarray(self.fine, dtype=float) if self.fine else np.zeros((0, 9))
        get = lambda key: np.array([e[key] for e in s])
        opt = lambda key: (np.array([e[key] for e in s])
                           if s and s[0][key] is not None else None)
        monget = lambda key: np.array([e["mon"][key] for e in s])
        t_samples = get("t") if s else np.zeros(0)
        res = np.zeros(len(s))
        if len(fine) and len(s):
            csum = np.concatenate([[0.0], np.cumsum(fine[:, 3])])
            pos = np.searchsorted(fine[:, 0], t_samples, side="right")
            prev = np.concatenate([[0], pos[:-1]])
            res = csum[pos] - csum[prev]
        return Trajectory(
            t=t_samples,
            x1=get("x1"), x2=get("x2"), x3=get("x3"),
            xi=opt("xi"), p=get("p"), p_inf=opt("p_inf"),
            xhat1=opt("xhat1"), xhat2=opt("xhat2"), xhat3=opt("xhat3"),
            y_m=monget("y_m"), V=monget("V"), supply=monget("supply"),
            residual=res,
            metric_E=monget("metric_E"), metric_Et=monget("metric_Et"),
            metric_Ep=monget("metric_Ep"),
            fine_t=fine[:, 0], fine_V=fine[:, 1], fine_supply=fine[:, 2],
            fine_residual=fine[:, 3], fine_residual_tol=fine[:, 4],
            fine_max_rate=fine[:, 5], fine_metric_E=fine[:, 6],
            fine_metric_Et=fine[:, 7], fine_metric_Ep=fine[:, 8],
            events=self.events, meta=meta,
        )


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------

def _settle_modes(sys: _System, t, y, plant_mode):
    """Make the stick/slip classification consistent with the state.

    Zero-velocity elements stick when their load does not beat the
    strength by the hysteresis band (which selects the non-moving
    solution at the verge) and otherwise slip in the load direction.
    """
    m = sys.model
    for _ in range(m.n + 1):
        frz = sys.freeze(t, y, plant_mode)
        p = sys.fault_pressure(t, y, frz)
        x3 = y[sys.i_x3]
        fe = -m.K_bar @ y[sys.i_x2] - m.H_bar @ x3
        load = fe + m.F_s_star
        strength = m.mu(np.maximum(y[sys.i_x1], 0.0)) * \
            np.maximum(m.sigma_n_prime - m.C_p @ p, 0.0)
        band = sys.cfg.event_tol + sys.cfg.unlock_band_rel * strength
        changed = False
        for i in range(m.n):
            if x3[i] == 0.0:
                want = STICK if abs(load[i]) <= strength[i] + band[i] \
                    else int(np.sign(load[i]))
            else:
                want = int(np.sign(x3[i]))
            if plant_mode[i] != want:
                plant_mode[i] = want
                changed = True
        if not changed:
            return


def _apply_event(sys: _System, rec: _Recorder, t, y, element: int, plant_mode):
    """Apply the located transition at the current state and log it."""
    frz = sys.freeze(t, y, plant_mode)
    p = sys.fault_pressure(t, y, frz)
    state = sys.plant_view(y, plant_mode)
    old = int(plant_mode[element])
    strength_el = static_threshold(np.maximum(state.x1, 0.0), p, sys.model)[element]
    band = sys.cfg.event_tol + sys.cfg.unlock_band_rel * strength_el
    new = mode_transition(state, element, sys.model, p, band=band)
    if old != STICK and new == STICK:
        rec.events.append((t, element, "Slip->Stick"))
    elif old == STICK and new != STICK:
        rec.events.append((t, element, "Stick->Slip"))
    elif old != STICK and new != STICK:
        rec.events.append((t, element, "Slip->Stick"))
        rec.events.append((t, element, "Stick->Slip"))
    _settle_modes(sys, t, y, plant_mode)


def run(model: FaultModel, gains: GainSet, obs: ObserverConfig | None,
        cfg: SimConfig, ref: ReferenceParams | None = None,
        C_h: np.ndarray | None = None, C_m: np.ndarray | None = None,
        x0: PlantState | None = None) -> Trajectory:
    """Integrate the closed loop selected by cfg.mode and record a Trajectory.

    Raises IntegrationError (carrying the partial trajectory) when the
    step size collapses below dt_min or the step budget is exhausted.
    """
    ref = ref or ReferenceParams()
    sys = _System(model, gains, obs, cfg, ref, C_h, C_m)
    rec = _Recorder(sys, cfg)

    if x0 is None:
        x0 = PlantState.zero(model.n)
        x0.x3 = x0.x3 + cfg.trigger_velocity
        x0.mode = np.sign(x0.x3).astype(int)
    y = sys.pack_initial(x0)
    plant_mode = x0.mode.astype(int).copy()
    t = 0.0
    _settle_modes(sys, t, y, plant_mode)

    meta = {
        "mode": cfg.mode.value,
        "n": model.n,
        "q": model.q,
        "t_end": cfg.t_end,
        "trigger_velocity": cfg.trigger_velocity,
    }

    mon = sys.monitors(t, y, plant_mode)
    rec.record_fine(t, mon, 0.0, 0.0)
    rec.maybe_sample(t, y, plant_mode, mon, force=True)

    h = cfg.dt_init
    lu = None
    lu_h = None
    lu_tag = None
    prev_V, prev_supply, prev_t = mon["V"], mon["supply"], t
    steps = 0
    immediate_events = 0

    def wrms(vec, yref):
        w = sys.atol + cfg.err_rtol * np.abs(yref) + 1e-300
        return float(np.sqrt(np.mean((vec / w) ** 2)))

    def accept(t_new, y_new):
        nonlocal t, prev_V, prev_supply, prev_t
        mon = sys.monitors(t_new, y_new, plant_mode)
        dV = mon["V"] - prev_V
        quad = 0.5 * (t_new - prev_t) * (mon["supply"] + prev_supply)
        res = dV - quad
        res_tol = 0.5 * (t_new - prev_t) * abs(mon["supply"] - prev_supply) \
            + 1e-12 * max(abs(mon["V"]), abs(prev_V), 1e-30)
        rec.record_fine(t_new, mon, res, res_tol)
        prev_V, prev_supply, prev_t = mon["V"], mon["supply"], t_new
        t = t_new
        return mon

    while t < cfg.t_end:
        steps += 1
        if steps > cfg.max_steps:
            meta["aborted_at"] = t
            raise IntegrationError(f"step budget exhausted at t={t:g}",
                                   rec.build(meta))
        vmax = float(np.max(np.abs(y[sys.i_x3]))) if model.n else 0.0
        h_cap = cfg.max_slip_per_step / vmax if vmax > 0 else np.inf
        remaining = cfg.t_end - t
        h = min(h, cfg.dt_max, h_cap)
        if remaining <= h or remaining < cfg.dt_min:
            h = remaining
        else:
            h = max(h, cfg.dt_min)

        frz = sys.freeze(t, y, plant_mode)
        tag = sys.freeze_tag(frz)
        if lu is None or tag != lu_tag or abs(h / lu_h - 1.0) > 0.3:
            J = sys.jac(t, y, frz)
            lu = scipy.linalg.lu_factor(np.eye(sys.ndim) - STAGE_D * h * J)
            lu_h = h
            lu_tag = tag
            fresh_lu = True
        else:
            fresh_lu = False

        rhs = lambda tt, yy: sys.rhs(tt, yy, frz)
        weights = sys.atol + cfg.err_rtol * np.abs(y) + 1e-300
        y_new, err, info = step_trbdf2(
            rhs, None, t, y, h,
            newton_tol=cfg.newton_tol, newton_max_iter=cfg.newton_max_iter,
            lu=lu, weights=weights,
        )
        if y_new is None:
            if not fresh_lu:
                lu = None  # stale factorization: refresh and retry same h
                continue
            h *= 0.5
            lu = None
            if h < cfg.dt_min:
                meta["aborted_at"] = t
                raise IntegrationError(f"Newton failed below dt_min at t={t:g}",
                                       rec.build(meta))
            continue

        err_norm = wrms(err, y_new)
        if err_norm > 1.0:
            h *= float(np.clip(0.9 * err_norm ** (-1.0 / 3.0), 0.1, 0.5))
            lu = None if abs(h / lu_h - 1.0) > 0.3 else lu
            if h < cfg.dt_min:
                meta["aborted_at"] = t
                raise IntegrationError(
                    f"error control collapsed below dt_min at t={t:g}",
                    rec.build(meta))
            continue

        # --- event scan on the candidate step ---
        ev0 = sys.event_values(t, y, plant_mode)
        ev1 = sys.event_values(t + h, y_new, plant_mode)
        slip = plant_mode != STICK
        floor_v = cfg.stick_velocity_floor
        crossed = (ev0 > 0.0) & (ev1 <= 0.0)
        # a freshly unlocked element starts at zero velocity; only a
        # materially negative excursion counts as an inconsistent start
        crossed &= ~(slip & (ev0 <= floor_v) & (ev1 >= -floor_v))
        crossed |= slip & (ev0 <= 0.0) & (ev1 < -floor_v)
        hit = np.flatnonzero(crossed)

        if hit.size:
            f0, f1 = info["f0"], info["f1"]

            def hermite(tt):
                s = (tt - t) / h
                return ((1 + 2 * s) * (1 - s) ** 2 * y
                        + s * (1 - s) ** 2 * h * f0
                        + s * s * (3 - 2 * s) * y_new
                        + s * s * (s - 1) * h * f1)

            t_star = t + h
            first = int(hit[0])
            for i in hit:
                if ev0[i] <= 0.0:
                    t_star = t
                    first = int(i)
                    break
                fn = lambda tt, i=i: sys.event_values(tt, hermite(tt), plant_mode)[i]
                tc = locate_event(fn, t, t + h, f_lo=ev0[i], f_hi=ev1[i],
                                  value_tol=cfg.event_tol)
                if tc is not None and tc < t_star:
                    t_star = tc
                    first = int(i)

            h_full = h
            if t_star <= t + max(cfg.dt_min, 1e-14 * max(abs(t), 1.0)):
                # event at the very start: switch modes without advancing
                immediate_events += 1
                if immediate_events > 8 * model.n:
                    meta["aborted_at"] = t
                    raise IntegrationError(f"event chattering at t={t:g}",
                                           rec.build(meta))
                _apply_event(sys, rec, t, y, first, plant_mode)
                lu = None
                continue

            if t_star < t + h:
                h_ev = t_star - t
                lu_ev = lu if abs(h_ev / lu_h - 1.0) <= 0.3 else None
                if lu_ev is None:
                    J = sys.jac(t, y, frz)
                    lu_ev = scipy.linalg.lu_factor(
                        np.eye(sys.ndim) - STAGE_D * h_ev * J)
                y_ev, _, info_ev = step_trbdf2(
                    rhs, None, t, y, h_ev,
                    newton_tol=cfg.newton_tol,
                    newton_max_iter=cfg.newton_max_iter,
                    lu=lu_ev, weights=weights,
                )
                if y_ev is None:
                    h = 0.5 * h_ev
                    lu = None
                    continue
                y_new = y_ev
                h = h_ev

            immediate_events = 0
            y = y_new
            t_new = t + h
            _apply_event(sys, rec, t_new, y, first, plant_mode)
            mon = accept(t_new, y)
            rec.maybe_sample(t, y, plant_mode, mon, force=True)
            lu = None
            h = max(cfg.dt_min, 0.05 * h_full)
            continue

        # --- plain acceptance ---
        immediate_events = 0
        if cfg.debug_every and steps % cfg.debug_every == 0:
            ww = sys.atol + cfg.err_rtol * np.abs(y_new)
            k = int(np.argmax(np.abs(err) / ww))
            print(f"    [dbg] step {steps} t={t:.6g} h={h:.3g} err={err_norm:.3g} "
                  f"worst_idx={k} err_k={err[k]:.2e} newton_it={info['iterations']}",
                  flush=True)
        y = y_new
        mon = accept(t + h, y)
        rec.maybe_sample(t, y, plant_mode, mon)
        grow = 0.9 * err_norm ** (-1.0 / 3.0) if err_norm > 1e-12 else 5.0
        h = h * float(np.clip(grow, 0.2, 5.0))

    mon = sys.monitors(t, y, plant_mode)
    rec.maybe_sample(t, y, plant_mode, mon, force=True)
    meta["steps"] = steps
    meta["final_mode_stuck"] = int(np.sum(plant_mode == STICK))
    return rec.build(meta)


# ---------------------------------------------------------------------------
# Regularized cross-check engine
# ---------------------------------------------------------------------------

def regularized_oracle_run(model: FaultModel, gains: GainSet, cfg: SimConfig,
                           boundary_layer: float,
                           ref: ReferenceParams | None = None,
                           x0: PlantState | None = None) -> Trajectory:
    """Fixed-step BDF2 integration of the saturation-regularized model.

    The set-valued sign is replaced by sat(x3 / boundary_layer); inside
    the layer the friction ramps linearly, which reproduces stick as a
    thin quasi-equilibrium instead of an event.  Supports the open-loop,
    stabilizing and tracking wirings (no actuator, no observer); the step
    is fixed at cfg.dt_init.
    """
    if boundary_layer <= 0:
        raise ValueError("boundary_layer must be positive")
    if cfg.mode.has_actuator or cfg.mode.has_observer:
        raise ValueError("oracle engine supports open_loop, stabilize and track only")
    ref = ref or ReferenceParams()
    m = model
    n, q = m.n, m.q
    has_xi = cfg.mode.has_integral
    ndim = 3 * n + (q if has_xi else 0)
    C_t = gains.C_t if gains.C_t is not None else left_pseudoinverse(m.C_p)

    def pressure(t, x1, x3, xi):
        if cfg.mode is RunMode.OPEN_LOOP:
            return np.zeros(q)
        if cfg.mode is RunMode.STABILIZE:
            return -gains.lambda_delta * (m.C_p.T @ x1) \
                - gains.lambda_v * (m.C_p.T @ np.abs(x3))
        _, rd = reference(t, ref)
        sat = np.clip(x3 / boundary_layer, -1.0, 1.0)
        return (
            -gains.lambda_delta * (m.C_p.T @ x1)
            - gains.lambda_v * (m.C_p.T @ np.abs(x3 - rd))
            - gains.lambda_v * (m.C_p.T @ (abs(rd) * np.ones(n)))
            + gains.lambda_xi * (m.C_p.T @ (sat * (m.C_p @ xi)))
        )

    def rhs(t, y):
        x1 = np.maximum(y[:n], 0.0)
        x2 = y[n:2 * n]
        x3 = y[2 * n:3 * n]
        xi = y[3 * n:] if has_xi else None
        sat = np.clip(x3 / boundary_layer, -1.0, 1.0)
        p = pressure(t, x1, x3, xi)
        sig_eff = np.maximum(m.sigma_n_prime - m.C_p @ p, 0.0)
        force = sat * m.mu(x1) * sig_eff - m.F_s_star
        fe = -m.K_bar @ x2 - m.H_bar @ x3
        dy = np.empty_like(y)
        dy[:n] = np.abs(x3)
        dy[n:2 * n] = x3
        dy[2 * n:3 * n] = m.M_inv @ (fe - force)
        if has_xi:
            _, rd = reference(t, ref)
            dy[3 * n:] = C_t @ (rd - x3)
        return dy

    def jac(t, y):
        x1 = np.maximum(y[:n], 0.0)
        x3 = y[2 * n:3 * n]
        xi = y[3 * n:] if has_xi else None
        sat = np.clip(x3 / boundary_layer, -1.0, 1.0)
        inside = np.abs(x3) < boundary_layer
        p = pressure(t, x1, x3, xi)
        sig = m.sigma_n_prime - m.C_p @ p
        active = sig > 0.0
        sig_eff = np.maximum(sig, 0.0)
        mu = m.mu(x1)
        fr = m.friction
        mu_p = (fr.delta_mu / fr.d_c) * np.exp(-x1 / fr.d_c)
        J = np.zeros((ndim, ndim))
        J[:n, 2 * n:3 * n] = np.diag(np.sign(x3))
        J[n:2 * n, 2 * n:3 * n] = np.eye(n)
        dF_dx3 = np.diag(np.where(inside, mu * sig_eff / boundary_layer, 0.0))
        dF_dx1 = np.diag(sat * mu_p * sig_eff)
        dF_dp = -(sat * mu * active)[:, None] * m.C_p
        J[2 * n:3 * n, :n] = m.M_inv @ (-dF_dx1)
        J[2 * n:3 * n, n:2 * n] = m.M_inv @ (-m.K_bar)
        J[2 * n:3 * n, 2 * n:3 * n] = m.M_inv @ (-m.H_bar - dF_dx3)
        if cfg.mode is not RunMode.OPEN_LOOP:
            if cfg.mode is RunMode.STABILIZE:
                r3 = 0.0
            else:
                _, r3 = reference(t, ref)
            dp_dx1 = -gains.lambda_delta * m.C_p.T
            dp_dx3 = -gains.lambda_v * m.C_p.T @ np.diag(np.sign(x3 - r3))
            J[2 * n:3 * n, :n] += m.M_inv @ (-dF_dp @ dp_dx1)
            J[2 * n:3 * n, 2 * n:3 * n] += m.M_inv @ (-dF_dp @ dp_dx3)
            if has_xi:
                dp_dxi = gains.lambda_xi * m.C_p.T @ np.diag(sat) @ m.C_p
                J[2 * n:3 * n, 3 * n:] = m.M_inv @ (-dF_dp @ dp_dxi)
                J[3 * n:, 2 * n:3 * n] = -C_t
        return J

    if x0 is None:
        x0 = PlantState.zero(n)
        x0.x3 = x0.x3 + cfg.trigger_velocity
    y = np.zeros(ndim)
    y[:n] = x0.x1
    y[n:2 * n] = x0.x2
    y[2 * n:3 * n] = x0.x3

    h = cfg.dt_init
    total = int(math.ceil(cfg.t_end / h))
    sample_every = max(1, total // max(cfg.max_samples * 4, 100))
    ts = [0.0]
    x1s, x2s, x3s = [y[:n].copy()], [y[n:2 * n].copy()], [y[2 * n:3 * n].copy()]

    eye = np.eye(ndim)
    y_prev = y.copy()
    t = 0.0

    def newton(res, z0, lu):
        z = z0
        for _ in range(60):
            r = res(z)
            dz = scipy.linalg.lu_solve(lu, -r)
            z = z + dz
            if np.linalg.norm(dz) <= 1e-13 * (np.linalg.norm(z) + 1e-30):
                break
        return z

    for k in range(total):
        hh = min(h, cfg.t_end - t)
        if hh <= 0:
            break
        t_next = t + hh
        if k == 0:
            lu = scipy.linalg.lu_factor(eye - hh * jac(t, y))
            z = newton(lambda z: z - y - hh * rhs(t_next, z),
                       y + hh * rhs(t, y), lu)
            y_prev, y = y, z
        else:
            lu = scipy.linalg.lu_factor(eye - (2.0 / 3.0) * hh * jac(t, y))
            z = newton(
                lambda z: z - (4.0 / 3.0) * y + (1.0 / 3.0) * y_prev
                - (2.0 / 3.0) * hh * rhs(t_next, z),
                2.0 * y - y_prev, lu)
            y_prev, y = y, z
        t = t_next
        if (k + 1) % sample_every == 0 or t >= cfg.t_end:
            ts.append(t)
            x1s.append(y[:n].copy())
            x2s.append(y[n:2 * n].copy())
            x3s.append(y[2 * n:3 * n].copy())

    ts = np.asarray(ts)
    x1a, x2a, x3a = map(np.asarray, (x1s, x2s, x3s))
    zero_q = np.zeros((len(ts), q))
    empty = np.zeros(len(ts))
    meta = {"engine": "regularized", "boundary_layer": boundary_layer,
            "mode": cfg.mode.value, "dt": h}
    return Trajectory(
        t=ts, x1=x1a, x2=x2a, x3=x3a, xi=None, p=zero_q, p_inf=None,
        xhat1=None, xhat2=None, xhat3=None,
        y_m=x3a.mean(axis=1), V=empty, supply=empty, residual=empty,
        metric_E=np.linalg.norm(x3a, axis=1), metric_Et=empty, metric_Ep=empty,
        fine_t=ts, fine_V=empty, fine_supply=empty, fine_residual=empty,
        fine_residual_tol=empty, fine_max_rate=np.abs(x3a).max(axis=1),
        fine_metric_E=np.linalg.norm(x3a, axis=1), fine_metric_Et=empty,
        fine_metric_Ep=empty, events=[], meta=meta,
    )
