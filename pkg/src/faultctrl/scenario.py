"""Earthquake case-study construction: grid fault, stress profile, wells.

The default numbers reproduce the demonstration setup: a 3 x 3 km fault
just beneath the surface, discretized into 10 x 10 elements, four
injection wells about 1.5 km from the fault plane, slip-weakening
friction (mu 0.6 -> 0.5 over d_c = 10 m) and hydraulic diffusivity
2.88e-7 / s.  Stresses are normalized so that the friction sector slope
|delta_mu| sigma' / d_c stays below the controller's sector constant
l_delta = 0.04; the stiffness is tuned barely below the weakening slope,
which is what makes the uncontrolled fault seismogenic while keeping the
runaway slip below a meter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import FaultModel, FrictionParams, mu_coefficient

__all__ = [
    "ScenarioConfig",
    "ConstructionError",
    "build_fault",
    "build_well_matrix",
    "critical_stiffness_report",
    "load_matrix_csv",
    "default_scenario",
    "small_scenario",
]

# Ratio of inter-element coupling to each element's own stiffness against
# the loading frame.  The identity part is what keeps K_bar positive
# definite; the Laplacian part transfers stress between neighbours.
NEIGHBOR_COUPLING_RATIO = 0.0025


class ConstructionError(ValueError):
    """Scenario assembly produced an invalid fault model."""


def _default_wells() -> tuple:
    return ((750.0, 750.0), (2250.0, 750.0), (750.0, 2250.0), (2250.0, 2250.0))


@dataclass
class ScenarioConfig:
    """Geometry, material and well layout of the discretized fault."""

    Nx: int = 10
    Nz: int = 10
    Lx: float = 3000.0
    Lz: float = 3000.0
    sigma_surface: float = 3.9
    sigma_gradient: float = 3.0e-5
    element_mass: float = 5.0e-5
    spring_k: float = 0.039
    rayleigh_alpha: float = 0.05
    rayleigh_beta: float = 1.0e-3
    well_positions: tuple = field(default_factory=_default_wells)
    well_kernel_radius: float = 1500.0
    C_h_scalar: float = 2.88e-7

    def __post_init__(self):
        if self.Nx < 1 or self.Nz < 1:
            raise ValueError("grid dimensions must be at least 1")
        positive = {
            "Lx": self.Lx,
            "Lz": self.Lz,
            "element_mass": self.element_mass,
            "spring_k": self.spring_k,
            "well_kernel_radius": self.well_kernel_radius,
            "C_h_scalar": self.C_h_scalar,
            "sigma_surface": self.sigma_surface,
        }
        for name, val in positive.items():
            if val <= 0:
                raise ValueError(f"{name} must be positive, got {val}")
        if self.sigma_gradient < 0:
            raise ValueError("sigma_gradient must be nonnegative")
        if self.rayleigh_alpha < 0 or self.rayleigh_beta < 0:
            raise ValueError("Rayleigh coefficients must be nonnegative")

    @property
    def n(self) -> int:
        return self.Nx * self.Nz

    @property
    def q(self) -> int:
        return len(self.well_positions)

    def element_centers(self) -> np.ndarray:
        """(n, 2) array of (x, z) element centers, row-major in z."""
        dx, dz = self.Lx / self.Nx, self.Lz / self.Nz
        xs = (np.arange(self.Nx) + 0.5) * dx
        zs = (np.arange(self.Nz) + 0.5) * dz
        zz, xx = np.meshgrid(zs, xs, indexing="ij")
        return np.column_stack([xx.ravel(), zz.ravel()])


def grid_laplacian(Nx: int, Nz: int) -> np.ndarray:
    """5-point graph Laplacian of an Nx x Nz grid (degree on the diagonal)."""
    n = Nx * Nz
    L = np.zeros((n, n))
    for iz in range(Nz):
        for ix in range(Nx):
            i = iz * Nx + ix
            for jx, jz in ((ix - 1, iz), (ix + 1, iz), (ix, iz - 1), (ix, iz + 1)):
                if 0 <= jx < Nx and 0 <= jz < Nz:
                    j = jz * Nx + jx
                    L[i, i] += 1.0
                    L[i, j] -= 1.0
    return L


def build_fault(config: ScenarioConfig, friction: FrictionParams | None = None,
                matrices: dict | None = None) -> FaultModel:
    """Assemble the FaultModel for a scenario.

    M = element_mass I; K_bar = spring_k (I + c L) with L the grid
    Laplacian; H_bar = alpha M + beta K_bar; the effective normal stress
    grows linearly with depth.  The operating point sits exactly at the
    verge of slip: F_s_star = mu(0) sigma_n', delta0 = 0, p0 = 0.

    Matrices M, K_bar, H_bar, C_p found in `matrices` (e.g. loaded from
    CSV files of an external discretization) override the assembled ones.
    """
    friction = friction or FrictionParams()
    matrices = matrices or {}
    n = config.n

    centers = config.element_centers()
    sigma = config.sigma_surface + config.sigma_gradient * centers[:, 1]

    M = matrices.get("M")
    if M is None:
        M = config.element_mass * np.eye(n)
    K_bar = matrices.get("K_bar")
    if K_bar is None:
        L = grid_laplacian(config.Nx, config.Nz)
        K_bar = config.spring_k * (np.eye(n) + NEIGHBOR_COUPLING_RATIO * L)
    H_bar = matrices.get("H_bar")
    if H_bar is None:
        H_bar = config.rayleigh_alpha * M + config.rayleigh_beta * K_bar

    eigs = np.linalg.eigvalsh(K_bar)
    if eigs.min() <= 0:
        raise ConstructionError(
            f"assembled K_bar is not positive definite (min eig {eigs.min():g})"
        )

    C_p = matrices.get("C_p")
    if C_p is None:
        C_p, _, _ = build_well_matrix(config)

    delta0 = np.zeros(n)
    F_s_star = mu_coefficient(delta0, friction) * sigma
    p0 = np.zeros(C_p.shape[1])

    model = FaultModel(
        n=n, q=C_p.shape[1], M=M, K_bar=K_bar, H_bar=H_bar,
        sigma_n_prime=sigma, C_p=C_p, friction=friction,
        delta0=delta0, F_s_star=F_s_star, p0=p0,
    )
    model.validate()
    return model


def build_well_matrix(config: ScenarioConfig):
    """Well influence C_p (n x q), actuator C_h (q x q), measurement C_m (1 x n).

    C_p columns are Gaussian kernels around each well position in
    fault-plane coordinates, scaled to unit maximum; C_m averages the
    slip rate over the fault.
    """
    centers = config.element_centers()
    wells = np.asarray(config.well_positions, dtype=float).reshape(-1, 2)
    q = wells.shape[0]
    for wx, wz in wells:
        if not (0 <= wx <= config.Lx and 0 <= wz <= config.Lz):
            raise ConstructionError(f"well at ({wx:g}, {wz:g}) lies outside the fault")

    d2 = ((centers[:, None, :] - wells[None, :, :]) ** 2).sum(axis=2)
    C_p = np.exp(-d2 / (2.0 * config.well_kernel_radius ** 2))
    C_p = C_p / C_p.max(axis=0, keepdims=True)

    if np.linalg.matrix_rank(C_p) < q:
        raise ConstructionError(
            "well influence matrix is rank deficient; wells coincide or overlap fully"
        )

    C_h = config.C_h_scalar * np.eye(q)
    C_m = np.full((1, config.n), 1.0 / config.n)
    return C_p, C_h, C_m


def critical_stiffness_report(model: FaultModel) -> np.ndarray:
    """Per-element stability margin k_ii - |delta_mu| sigma_n' / d_c.

    Negative entries mark elements whose slip-weakening rate exceeds the
    local elastic unloading stiffness: the fingerprint of a seismogenic
    patch.
    """
    weakening = abs(model.friction.delta_mu) * model.sigma_n_prime / model.friction.d_c
    return np.diag(model.K_bar) - weakening


def load_matrix_csv(path) -> np.ndarray:
    """Read one matrix from a delimited file (comma separated, LF)."""
    arr = np.loadtxt(Path(path), delimiter=",", ndmin=2)
    return arr


def default_scenario() -> ScenarioConfig:
    """The shipped 10 x 10 demonstration scenario."""
    return ScenarioConfig()


def small_scenario(Nx: int = 2, Nz: int = 2, wells: int = 2) -> ScenarioConfig:
    """Reduced grid for fast tests; keeps the default physics."""
    base = ScenarioConfig()
    dx, dz = base.Lx / Nx, base.Lz / Nz
    pos = []
    for j in range(wells):
        # spread wells along the diagonal, strictly inside the fault
        frac = (j + 1) / (wells + 1)
        pos.append((frac * base.Lx, frac * base.Lz))
    return ScenarioConfig(Nx=Nx, Nz=Nz, well_positions=tuple(pos))
