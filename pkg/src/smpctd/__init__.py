"""m-party semi-honest secure computation with task decomposition."""

from .mpc import Engine, SecretShareTensor, reconstruct, share
from .pipelines import FaModel, PcaModel, PipelineConfig, SvdModel, project, run_pipeline
from .planner import TaskPlan, audit, count_equations, demonstrate_recovery
from .ring import FixedPointCodec, RingElement

__version__ = "0.1.0"

__all__ = [
    "Engine", "SecretShareTensor", "share", "reconstruct",
    "FaModel", "PcaModel", "SvdModel", "PipelineConfig", "project", "run_pipeline",
    "TaskPlan", "audit", "count_equations", "demonstrate_recovery",
    "FixedPointCodec", "RingElement",
]
