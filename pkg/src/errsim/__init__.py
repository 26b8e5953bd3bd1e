"""Fault-resilience analysis toolkit for CNN inference graphs.

Mines functional error models from golden/corrupted tensor dumps and
replays them in fast error-simulation campaigns over a deterministic
dataflow interpreter, classifying each corrupted output by usability.
"""

__version__ = "0.1.0"

from .analyzer import analyze_pair, build_error_db, classify_spatial, classify_value_domain, diff_tensors
from .classify import Outcome, Report, aggregate, build_policy, classify_output, register_policy
from .errordb import ErrorModelDB, load_db, load_default_db, sample_error, save_db
from .errors import EngineError, ErrSimError, ValidationError
from .graph import Graph, OperatorNode, apply_operator, execute, execute_from, load_model, save_model
from .patterns import CorruptionEvent, DomainAssignment, SpatialPattern, generate_targets
from .saboteur import CampaignConfig, CampaignRecord, corrupt_values, plan_campaign, run_campaign

__all__ = [
    "CampaignConfig", "CampaignRecord", "CorruptionEvent", "DomainAssignment",
    "EngineError", "ErrSimError", "ErrorModelDB", "Graph", "OperatorNode",
    "Outcome", "Report", "SpatialPattern", "ValidationError",
    "aggregate", "analyze_pair", "apply_operator", "build_error_db",
    "build_policy", "classify_output", "classify_spatial",
    "classify_value_domain", "corrupt_values", "diff_tensors", "execute",
    "execute_from", "generate_targets", "load_db", "load_default_db",
    "load_model", "plan_campaign", "register_policy", "run_campaign",
    "sample_error", "save_db", "save_model",
]
