"""Configuration, training loops, evaluation, ablations and plots."""

from .ablation import ROW_NAMES, AblationRow, run_ablation
from .config import RunConfig, load_config
from .pipeline import OURS, Variant, evaluate_model, prepare_data, train_segmenter, train_stage2

__all__ = [
    "ROW_NAMES",
    "AblationRow",
    "OURS",
    "RunConfig",
    "Variant",
    "evaluate_model",
    "load_config",
    "prepare_data",
    "run_ablation",
    "train_segmenter",
    "train_stage2",
]
