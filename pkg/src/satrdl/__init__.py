"""Joint surgical skill assessment and task recognition from kinematic windows."""

from .data import (
    KinematicTrial,
    SynthSpec,
    WindowedExample,
    build_loso_folds,
    load_trials,
    stack_windows,
    synth_generate,
    train_val_split,
    window,
    window_trials,
    znormalize,
)
from .estimator import SatrClassifier, SlidingWindower, TrialStandardizer
from .evaluation import (
    EvaluationReport,
    classify_windows,
    compute_metrics,
    emit_report,
    majority_vote,
    run_loso,
)
from .model import SKILL_CLASSES, TASK_CLASSES, ModelConfig, SatrParams, forward, init_params, joint_loss, predict_interval
from .ndcore import GradientTape, LayerMode, Tensor, backward
from .training import TrainSchedule, adam_step, plateau_update, train

__version__ = "0.1.0"

__all__ = [
    "EvaluationReport",
    "GradientTape",
    "KinematicTrial",
    "LayerMode",
    "ModelConfig",
    "SKILL_CLASSES",
    "SatrClassifier",
    "SatrParams",
    "SlidingWindower",
    "SynthSpec",
    "TASK_CLASSES",
    "Tensor",
    "TrainSchedule",
    "TrialStandardizer",
    "WindowedExample",
    "adam_step",
    "backward",
    "build_loso_folds",
    "classify_windows",
    "compute_metrics",
    "emit_report",
    "forward",
    "init_params",
    "joint_loss",
    "load_trials",
    "majority_vote",
    "plateau_update",
    "predict_interval",
    "run_loso",
    "stack_windows",
    "synth_generate",
    "train",
    "train_val_split",
    "window",
    "window_trials",
    "znormalize",
]
