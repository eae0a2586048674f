"""Trajectory-free training and large-timestep simulation of Hamiltonian
flow maps, with a velocity Verlet reference integrator and conservation-
aware inference filters."""

from .errors import (
    ConfigError,
    DegenerateStateError,
    DimensionMismatch,
    FileFormatError,
    NumericAbort,
    PhaseflowError,
    RejectionBudgetError,
    TimestepRangeError,
    UnsupportedSystemError,
)
from .systems import (
    Barbanis,
    Gravity,
    HarmonicOscillator,
    PhaseState,
    SpringPendulum,
    exact_flow,
    force,
    make_state,
    potential_energy,
    total_energy,
)
from .sampling import (
    GenConfig,
    SampleSet,
    TimestepDist,
    generate,
    load_dataset,
    sample_timesteps,
    save_dataset,
)
from .net import (
    AnalyticOscillatorField,
    FlowFieldNet,
    NetConfig,
    load_checkpoint,
    save_checkpoint,
)
from .loss import LossConfig, LossReport, loss_and_grad, loss_report
from .train import TrainConfig, TrainResult, train
from .integrate import (
    Trajectory,
    load_trajectory,
    make_hfm_stepper,
    make_vv_stepper,
    rollout,
    save_trajectory,
    vv_step,
)
from .filters import (
    ConservationTargets,
    CoupledConservation,
    DriftRemoval,
    LangevinThermostat,
    RandomRotationWrap,
    coupled_conservation_filter,
    default_filter_stack,
)
from .metrics import (
    ConservationDrift,
    NormalizedRmsd,
    conservation_drift,
    distance_hist_mae,
    normalized_rmsd,
    semigroup_error,
    trajectory_mse,
)

__version__ = "0.1.0"

__all__ = [
    "AnalyticOscillatorField",
    "Barbanis",
    "ConfigError",
    "ConservationDrift",
    "ConservationTargets",
    "CoupledConservation",
    "DegenerateStateError",
    "DimensionMismatch",
    "DriftRemoval",
    "FileFormatError",
    "FlowFieldNet",
    "GenConfig",
    "Gravity",
    "HarmonicOscillator",
    "LangevinThermostat",
    "LossConfig",
    "LossReport",
    "NetConfig",
    "NormalizedRmsd",
    "NumericAbort",
    "PhaseState",
    "PhaseflowError",
    "RandomRotationWrap",
    "RejectionBudgetError",
    "SampleSet",
    "SpringPendulum",
    "TimestepDist",
    "TimestepRangeError",
    "TrainConfig",
    "TrainResult",
    "Trajectory",
    "UnsupportedSystemError",
    "conservation_drift",
    "coupled_conservation_filter",
    "default_filter_stack",
    "distance_hist_mae",
    "exact_flow",
    "force",
    "generate",
    "load_checkpoint",
    "load_dataset",
    "load_trajectory",
    "loss_and_grad",
    "loss_report",
    "make_hfm_stepper",
    "make_state",
    "make_vv_stepper",
    "normalized_rmsd",
    "potential_energy",
    "rollout",
    "sample_timesteps",
    "save_checkpoint",
    "save_dataset",
    "save_trajectory",
    "semigroup_error",
    "total_energy",
    "train",
    "trajectory_mse",
    "vv_step",
]
