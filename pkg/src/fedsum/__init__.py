"""Deterministic simulation of federated group-by-sum analytics with
windowed differential privacy.

A fleet of simulated devices accumulates trip records, periodically
checks in with a coordinating server, and uploads bounded per-window
histograms.  The server aggregates uploads exactly, then releases each
window through one of three Laplace-noise mechanisms.  Every stage —
synthetic data, device availability, aggregation, and noise — is
deterministic given its seeds.
"""

from .aggcore import AggCoreConfig, AggregationCore, ClientUpdate
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .dp import (
    MechanismConfig,
    NoisedRelease,
    PreparedMechanism,
    ResolvedMechanism,
    calibrate_clip,
    calibrate_scales,
    laplace_mechanism,
    mech_activity_metric_scaling,
    mech_budget_split,
    mech_joint_clipping,
    prepare_mechanism,
    resolve_mechanism,
)
from .metrics import (
    ReachFunnel,
    default_device_floor,
    device_reach,
    exact_workload,
    per_user_mean_error,
    weighted_relative_error,
)
from .model import (
    IndexedHistogram,
    InvalidParameterError,
    ScaleTable,
    Schema,
    SchemaMismatchError,
    TripRecord,
)
from .query import (
    DEFAULT_TRIPS_STREAM,
    ParseError,
    QuerySpec,
    QueryValidationError,
    parse_and_validate,
    parse_query,
    pretty_print,
    validate_split,
)
from .rng import KeyedRng, laplace_from_uniform, sample_laplace
from .server import FederatedServer, ServerConfig, SuppressedRelease, TaskConfig
from .sim import FleetConfig, SimulationResult, run_simulation
from .sweep import SweepConfig, run_epsilon_sweep, summarize_sweep
from .synth import Corpus, SyntheticCorpusConfig, generate_corpus
from .windows import TimeWindow, WindowAlignment, round_down_window, window_after

__version__ = "0.1.0"

__all__ = [
    "AggCoreConfig",
    "AggregationCore",
    "ClientUpdate",
    "ConfigError",
    "Corpus",
    "DEFAULT_TRIPS_STREAM",
    "ExperimentConfig",
    "FederatedServer",
    "FleetConfig",
    "IndexedHistogram",
    "InvalidParameterError",
    "KeyedRng",
    "MechanismConfig",
    "NoisedRelease",
    "ParseError",
    "PreparedMechanism",
    "QuerySpec",
    "QueryValidationError",
    "ReachFunnel",
    "ResolvedMechanism",
    "ScaleTable",
    "Schema",
    "SchemaMismatchError",
    "ServerConfig",
    "SimulationResult",
    "SuppressedRelease",
    "SweepConfig",
    "SyntheticCorpusConfig",
    "TaskConfig",
    "TimeWindow",
    "TripRecord",
    "WindowAlignment",
    "calibrate_clip",
    "calibrate_scales",
    "default_device_floor",
    "device_reach",
    "exact_workload",
    "generate_corpus",
    "laplace_from_uniform",
    "laplace_mechanism",
    "load_config",
    "mech_activity_metric_scaling",
    "mech_budget_split",
    "mech_joint_clipping",
    "parse_and_validate",
    "parse_config",
    "parse_query",
    "per_user_mean_error",
    "prepare_mechanism",
    "pretty_print",
    "resolve_mechanism",
    "round_down_window",
    "run_epsilon_sweep",
    "run_simulation",
    "sample_laplace",
    "summarize_sweep",
    "validate_split",
    "weighted_relative_error",
    "window_after",
    "__version__",
]
