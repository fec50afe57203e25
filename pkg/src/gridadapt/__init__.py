"""Topology-aware online volt-var control for radial distribution feeders."""
from .adaptation import CostConfig, EstimatorMode, MGapsState, mgaps_step
from .detection import DetectionConfig, DetectionState, EventKind
from .grid_model import Line, RadialNetwork, TopologyDelta, apply_delta, build_sensitivity, load_feeder
from .harness import RunMetrics, ScenarioConfig, run_suite, run_trajectory
from .identification import IdentificationResult, IdentifyConfig, identify
from .policy import PolicyParams, droop_init, policy_control
from .powerflow import solve_linear, solve_nonlinear

__version__ = "0.1.0"

__all__ = [
    "CostConfig", "EstimatorMode", "MGapsState", "mgaps_step",
    "DetectionConfig", "DetectionState", "EventKind",
    "Line", "RadialNetwork", "TopologyDelta", "apply_delta", "build_sensitivity", "load_feeder",
    "RunMetrics", "ScenarioConfig", "run_suite", "run_trajectory",
    "IdentificationResult", "IdentifyConfig", "identify",
    "PolicyParams", "droop_init", "policy_control",
    "solve_linear", "solve_nonlinear",
]
