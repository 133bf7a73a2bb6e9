"""Fault plant model: viscoelastic forces and set-valued Coulomb friction.

States are expressed in coordinates shifted to the verge-of-slip operating
point, so the stored tectonic preload appears as the constant vector
``F_s_star`` inside the friction term.  All quantities are SI (m, s, Pa, N,
kg); forces are per unit fault area, so normal stresses and shear forces
share the Pa scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "STICK",
    "FrictionParams",
    "FaultModel",
    "PlantState",
    "mu_coefficient",
    "elastic_force",
    "static_threshold",
    "shifted_friction_slip",
    "friction_branch",
    "plant_rhs",
]

# Mode convention: 0 = stick (velocity pinned to zero), +1/-1 = slip with
# that sign of velocity.
STICK = 0


class ShapeError(ValueError):
    """Vector/matrix dimensions inconsistent with the fault model."""


class BranchError(ValueError):
    """A friction branch was evaluated outside its validity region."""


@dataclass
class FrictionParams:
    """Slip-weakening Coulomb friction coefficients.

    mu(slip) = mu_res - delta_mu * exp(-slip / d_c); with delta_mu < 0 the
    coefficient decays from the static value mu_res - delta_mu to the
    residual mu_res over the characteristic slip d_c.

    l_delta, l_v are the sector slopes bounding the shifted friction term;
    mu_min is the guaranteed friction floor used by the controller.
    """

    mu_res: float = 0.5
    delta_mu: float = -0.1
    d_c: float = 10.0
    mu_min: float = 0.25
    l_delta: float = 0.04
    l_v: float = 0.0

    def __post_init__(self):
        if self.d_c <= 0:
            raise ValueError(f"d_c must be positive, got {self.d_c}")
        if self.mu_min <= 0:
            raise ValueError(f"mu_min must be positive, got {self.mu_min}")
        # min over slip >= 0 of the exponential law
        mu_static = self.mu_res - self.delta_mu
        if min(self.mu_res, mu_static) < self.mu_min:
            raise ValueError(
                f"friction floor violated: min mu = "
                f"{min(self.mu_res, mu_static):g} < mu_min = {self.mu_min:g}"
            )
        if self.delta_mu < 0 and mu_static <= self.mu_res:
            raise ValueError("weakening (delta_mu < 0) requires mu(0) > mu_res")

    @property
    def mu_static(self) -> float:
        """Coefficient at zero slip."""
        return self.mu_res - self.delta_mu


@dataclass
class FaultModel:
    """Discretized fault: inertia, viscoelasticity, friction, well coupling.

    M, K_bar, H_bar are symmetric positive definite (n x n); sigma_n_prime
    is the effective normal stress profile; C_p maps the q well pressures
    to pressure on each fault element; F_s_star is the verge-of-slip static
    force, i.e. the elastic preload stored at the operating point.
    """

    n: int
    q: int
    M: np.ndarray
    K_bar: np.ndarray
    H_bar: np.ndarray
    sigma_n_prime: np.ndarray
    C_p: np.ndarray
    friction: FrictionParams
    delta0: np.ndarray
    F_s_star: np.ndarray
    p0: np.ndarray
    _M_inv: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.K_bar = np.asarray(self.K_bar, dtype=float)
        self.H_bar = np.asarray(self.H_bar, dtype=float)
        self.sigma_n_prime = np.asarray(self.sigma_n_prime, dtype=float).reshape(self.n)
        self.C_p = np.asarray(self.C_p, dtype=float).reshape(self.n, self.q)
        self.delta0 = np.asarray(self.delta0, dtype=float).reshape(self.n)
        self.F_s_star = np.asarray(self.F_s_star, dtype=float).reshape(self.n)
        self.p0 = np.asarray(self.p0, dtype=float).reshape(self.q)

    def validate(self) -> None:
        """Check the structural assumptions; raises ValueError on failure."""
        n, q = self.n, self.q
        if q >= n:
            raise ValueError(f"underactuation requires q < n, got q={q}, n={n}")
        for name, mat in (("M", self.M), ("K_bar", self.K_bar), ("H_bar", self.H_bar)):
            if mat.shape != (n, n):
                raise ShapeError(f"{name} must be {n}x{n}, got {mat.shape}")
            if not np.allclose(mat, mat.T, rtol=1e-10, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            w = np.linalg.eigvalsh(mat)
            if w.min() <= 0:
                raise ValueError(f"{name} must be positive definite (min eig {w.min():g})")
        if np.any(self.delta0 < 0):
            raise ValueError("delta0 must be componentwise nonnegative")
        if np.linalg.matrix_rank(self.C_p) < q:
            raise ValueError("C_p must have full column rank")

    @property
    def M_inv(self) -> np.ndarray:
        if self._M_inv is None:
            self._M_inv = np.linalg.inv(self.M)
        return self._M_inv

    def mu(self, x1: np.ndarray) -> np.ndarray:
        """Friction coefficient at accumulated slip x1 (shifted coordinates)."""
        return mu_coefficient(x1 + self.delta0, self.friction)


@dataclass
class PlantState:
    """Plant state in shifted coordinates.

    x1: accumulated slip (nonnegative, nondecreasing); x2: displacement;
    x3: slip rate; mode: per-element stick/slip flag (0 stick, +-1 slip
    direction).  mode[i] == STICK implies x3[i] == 0 exactly.
    """

    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    mode: np.ndarray

    @classmethod
    def zero(cls, n: int) -> "PlantState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n, dtype=int))

    def copy(self) -> "PlantState":
        return PlantState(self.x1.copy(), self.x2.copy(), self.x3.copy(), self.mode.copy())


def mu_coefficient(slip, params: FrictionParams):
    """Slip-weakening friction coefficient mu(slip).

    slip is the total accumulated slip (must be nonnegative); scalar or
    array input is accepted.
    """
    slip = np.asarray(slip, dtype=float)
    if np.any(slip < 0):
        raise ValueError(f"slip must be nonnegative, got min {slip.min():g}")
    out = params.mu_res - params.delta_mu * np.exp(-slip / params.d_c)
    return out if out.ndim else float(out)


def elastic_force(x2: np.ndarray, x3: np.ndarray, model: FaultModel) -> np.ndarray:
    """Shifted viscoelastic force -K_bar x2 - H_bar x3 [Pa].

    The operating-point preload is not included here; it is carried
    separately in model.F_s_star.
    """
    x2 = np.asarray(x2, dtype=float)
    x3 = np.asarray(x3, dtype=float)
    if x2.shape != (model.n,) or x3.shape != (model.n,):
        raise ShapeError(
            f"expected vectors of length {model.n}, got {x2.shape} and {x3.shape}"
        )
    return -model.K_bar @ x2 - model.H_bar @ x3


def effective_normal_stress(x1: np.ndarray, p: np.ndarray, model: FaultModel) -> np.ndarray:
    """sigma_n' - C_p p, floored at zero (an opened interface has no strength)."""
    sig = model.sigma_n_prime - model.C_p @ np.asarray(p, dtype=float).reshape(model.q)
    return np.maximum(sig, 0.0)


def static_threshold(x1: np.ndarray, p: np.ndarray, model: FaultModel) -> np.ndarray:
    """Static friction strength mu(x1 + delta0) * (sigma_n' - C_p p) [Pa].

    Injection (positive p) reduces effective normal stress and therefore
    the strength; the controller exploits exactly this to unlock stuck
    elements.
    """
    return model.mu(np.asarray(x1, dtype=float)) * effective_normal_stress(x1, p, model)


def shifted_friction_slip(x1, x3, p, model: FaultModel) -> np.ndarray:
    """Slip-branch friction force F = g - b C_p p in shifted coordinates.

    g = sign(x3) mu(x1 + delta0) sigma_n' - F_s_star, and the control term
    subtracts sign(x3) mu (C_p p) elementwise.  Every element must be in
    motion; evaluating at x3[i] == 0 is a branch violation (the stick
    branch resolves the set-valued sign there).
    """
    x1 = np.asarray(x1, dtype=float).reshape(model.n)
    x3 = np.asarray(x3, dtype=float).reshape(model.n)
    if np.any(x3 == 0.0):
        raise BranchError("slip branch evaluated with zero slip-rate; use friction_branch")
    s = np.sign(x3)
    return s * model.mu(x1) * effective_normal_stress(x1, p, model) - model.F_s_star


def friction_branch(x1, x2, x3, p, model: FaultModel):
    """Set-valued Coulomb friction resolved per element.

    Returns (force, mode).  Moving elements (x3 != 0) take the slip-branch
    force.  For arrested elements the friction balances the total load
    (elastic force plus the stored preload F_s_star) while that load stays
    below the static strength; once the load reaches the strength, the
    friction saturates and the element is flagged as entering slip in the
    direction of the load.
    """
    x1 = np.asarray(x1, dtype=float).reshape(model.n)
    x2 = np.asarray(x2, dtype=float).reshape(model.n)
    x3 = np.asarray(x3, dtype=float).reshape(model.n)

    fe = elastic_force(x2, x3, model)
    load = fe + model.F_s_star  # unshifted load the friction must balance
    strength = static_threshold(x1, p, model)
    mu = model.mu(x1)
    sig_eff = effective_normal_stress(x1, p, model)

    moving = x3 != 0.0
    holds = np.abs(load) < strength

    force = np.empty(model.n)
    mode = np.zeros(model.n, dtype=int)

    # slip branch
    s = np.sign(x3)
    force_slip = s * mu * sig_eff - model.F_s_star
    force[moving] = force_slip[moving]
    mode[moving] = s[moving].astype(int)

    # stick branch: friction equals the shifted elastic force exactly
    stuck = ~moving & holds
    force[stuck] = fe[stuck]
    mode[stuck] = STICK

    # saturated branch: load at or beyond strength, slip is imminent
    breaking = ~moving & ~holds
    s_load = np.sign(load)
    force[breaking] = (s_load * strength - model.F_s_star)[breaking]
    mode[breaking] = s_load[breaking].astype(int)

    return force, mode


def plant_rhs(state: PlantState, p, t: float, model: FaultModel):
    """Shifted plant dynamics: (dx1, dx2, dx3).

    dx1 = |x3|, dx2 = x3, dx3 = M^-1 (elastic - friction).  Elements in
    stick mode have identically zero dx3 (the friction balances the load).
    """
    force, mode = friction_branch(state.x1, state.x2, state.x3, p, model)
    fe = elastic_force(state.x2, state.x3, model)
    dx3 = model.M_inv @ (fe - force)
    dx3[(mode == STICK) & (state.x3 == 0.0)] = 0.0
    return np.abs(state.x3), state.x3.copy(), dx3
