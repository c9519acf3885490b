"""Progressive block-drop compression for transformer temporal action detectors."""

from .compress import (CompressConfig, RecoverConfig, progressive_drop, recover,
                       simultaneous_drop, width_prune_baseline)
from .detector import DetectorModel, ModelConfig, TaskConfig, generate_dataset
from .estimators import BlockDropCompressor, TemporalActionDetector
from .metrics import ActionInstance, EvalConfig, mean_map
from .perf import count_macs, latency_bench

__version__ = "0.1.0"

__all__ = [
    "ActionInstance", "BlockDropCompressor", "CompressConfig", "DetectorModel", "EvalConfig",
    "ModelConfig", "RecoverConfig", "TaskConfig", "TemporalActionDetector", "count_macs",
    "generate_dataset", "latency_bench", "mean_map", "progressive_drop", "recover",
    "simultaneous_drop", "width_prune_baseline",
]
