"""faultctrl: stick-slip fault simulation with passivity-based pressure control."""

from .model import (
    FaultModel,
    FrictionParams,
    PlantState,
    STICK,
    elastic_force,
    friction_branch,
    mu_coefficient,
    plant_rhs,
    shifted_friction_slip,
    static_threshold,
)
from .scenario import (
    ScenarioConfig,
    build_fault,
    build_well_matrix,
    critical_stiffness_report,
    default_scenario,
    small_scenario,
)
from .control import (
    GainSet,
    ReferenceParams,
    ControllerState,
    compensated_well_pressure,
    integral_update,
    left_pseudoinverse,
    reference,
    reference_accel,
    stabilizing_pressure,
    tracking_pressure,
    validate_gains,
)
from .observer import (
    ObserverConfig,
    ObserverState,
    hurwitz_check,
    make_observer_config,
    observer_rhs,
)
from .sim import (
    IntegrationError,
    RunMode,
    SimConfig,
    Trajectory,
    locate_event,
    mode_transition,
    regularized_oracle_run,
    run,
    step_trbdf2,
)
from .passivity import (
    MonitorReport,
    convergence_metrics,
    dissipation_residual,
    evaluate_monitors,
    passivity_map_probe,
    sector_probe,
    storage_V,
    storage_Vp,
)

__version__ = "0.1.0"
