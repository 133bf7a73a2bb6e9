"""High-gain observer reconstructing the fault state from the averaged
slip-rate measurement y_m = C_m x3.

The observer integrates a nominal copy of the plant and corrects the
displacement and slip-rate channels with injection gains that scale as
1/eps and 1/eps^2.  Since the measurement is scalar, the injection acts
on the fault-average mode; the unmeasured components follow the nominal
model, which is why the nominal perturbation used in robustness
experiments is chosen on the stable side of the true physics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import FaultModel, FrictionParams, friction_branch, elastic_force, mu_coefficient

__all__ = [
    "ObserverConfig",
    "ObserverState",
    "HurwitzReport",
    "make_observer_config",
    "observer_rhs",
    "hurwitz_check",
]


@dataclass
class ObserverConfig:
    """Observer gains plus the nominal plant it integrates."""

    epsilon: float
    L1: np.ndarray
    L2: np.ndarray
    C_m: np.ndarray
    nominal: FaultModel

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        n = self.nominal.n
        self.L1 = np.asarray(self.L1, dtype=float).reshape(n)
        self.L2 = np.asarray(self.L2, dtype=float).reshape(n)
        self.C_m = np.asarray(self.C_m, dtype=float).reshape(1, n)

    @property
    def lambda1(self) -> float:
        return 1.0 / self.epsilon

    @property
    def lambda2(self) -> float:
        return 1.0 / self.epsilon ** 2


@dataclass
class ObserverState:
    """Estimates of slip, displacement and slip rate."""

    x1_hat: np.ndarray
    x2_hat: np.ndarray
    x3_hat: np.ndarray

    @classmethod
    def zero(cls, n: int) -> "ObserverState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def copy(self) -> "ObserverState":
        return ObserverState(self.x1_hat.copy(), self.x2_hat.copy(), self.x3_hat.copy())


@dataclass
class HurwitzReport:
    """Spectrum of the observer error matrix and the resulting verdict."""

    eigenvalues: np.ndarray
    max_real_part: float
    ok: bool


def make_nominal_model(model: FaultModel, mismatch: float = 0.0) -> FaultModel:
    """Nominal plant copy with a deterministic relative perturbation.

    The perturbation is one-sided towards stability (stiffer springs,
    weaker stress, milder weakening) so that the nominal fault does not
    generate spurious instabilities of its own.
    """
    if mismatch == 0.0:
        return model
    m = float(mismatch)
    fr = model.friction
    nominal_friction = FrictionParams(
        mu_res=fr.mu_res,
        delta_mu=(1.0 - m) * fr.delta_mu,
        d_c=(1.0 + m) * fr.d_c,
        mu_min=fr.mu_min,
        l_delta=fr.l_delta,
        l_v=fr.l_v,
    )
    sigma = (1.0 - m) * model.sigma_n_prime
    f_s_star = mu_coefficient(model.delta0, nominal_friction) * sigma
    return FaultModel(
        n=model.n, q=model.q,
        M=(1.0 - m) * model.M,
        K_bar=(1.0 + m) * model.K_bar,
        H_bar=(1.0 + m) * model.H_bar,
        sigma_n_prime=sigma,
        C_p=model.C_p.copy(),
        friction=nominal_friction,
        delta0=model.delta0.copy(),
        F_s_star=f_s_star,
        p0=model.p0.copy(),
    )


def make_observer_config(model: FaultModel, C_m: np.ndarray, epsilon: float = 0.1,
                         l1: float = 1.0, l2: float = 2.0,
                         mismatch: float = 0.0) -> ObserverConfig:
    """Build the observer with injection shapes L1 = l1 n C_m^T, L2 = l2 n C_m^T.

    The shapes are verified numerically against the Hurwitz requirement;
    a failing spectrum raises immediately.
    """
    C_m = np.asarray(C_m, dtype=float).reshape(1, model.n)
    L1 = l1 * model.n * C_m.ravel()
    L2 = l2 * model.n * C_m.ravel()
    config = ObserverConfig(
        epsilon=epsilon, L1=L1, L2=L2, C_m=C_m,
        nominal=make_nominal_model(model, mismatch),
    )
    report = hurwitz_check(config)
    if not report.ok:
        raise ValueError(
            f"observer error matrix is not Hurwitz (max Re = {report.max_real_part:g})"
        )
    return config


def observer_rhs(est: ObserverState, y_m: float, p_hat, t: float,
                 config: ObserverConfig):
    """Estimate derivatives (dx1_hat, dx2_hat, dx3_hat).

    dx1_hat = |x3_hat| carries no correction term; the displacement and
    slip-rate channels are driven by the scalar innovation with gains
    1/eps and 1/eps^2.  The slip estimate is clamped at zero before the
    friction evaluation (transients can undershoot).
    """
    nominal = config.nominal
    x1 = np.maximum(est.x1_hat, 0.0)
    innov = float(y_m) - float(config.C_m @ est.x3_hat)

    force, _ = friction_branch(x1, est.x2_hat, est.x3_hat, p_hat, nominal)
    fe = elastic_force(est.x2_hat, est.x3_hat, nominal)

    dx1 = np.abs(est.x3_hat)
    dx2 = est.x3_hat + config.lambda1 * config.L1 * innov
    dx3 = nominal.M_inv @ (fe - force) + config.lambda2 * config.L2 * innov
    return dx1, dx2, dx3


def hurwitz_check(config: ObserverConfig) -> HurwitzReport:
    """Assemble the observer error matrix and inspect its spectrum.

    A_tilde = [[0, I - L1 C_m], [-K0, -H0 - L2 C_m]] with K0, H0 the
    inertia-normalized nominal stiffness and viscosity; pass iff every
    eigenvalue has negative real part.
    """
    nominal = config.nominal
    n = nominal.n
    K0 = nominal.M_inv @ nominal.K_bar
    H0 = nominal.M_inv @ nominal.H_bar
    L1 = config.L1.reshape(n, 1)
    L2 = config.L2.reshape(n, 1)
    A = np.block([
        [np.zeros((n, n)), np.eye(n) - L1 @ config.C_m],
        [-K0, -H0 - L2 @ config.C_m],
    ])
    eig = np.linalg.eigvals(A)
    max_real = float(eig.real.max())
    return HurwitzReport(eigenvalues=eig, max_real_part=max_real, ok=max_real < 0.0)
