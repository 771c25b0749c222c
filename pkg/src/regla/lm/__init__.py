from .model import LayerKind, ModelConfig, TransformerLM, build_model
from .tasks import AssocRecallTask, CharCorpusTask, CopyTask, Task, make_task
from .train import (
    MetricsRow,
    TrainConfig,
    TrainingDivergenceError,
    TrainResult,
    evaluate_ppl,
    greedy_decode,
    train,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .ablate import AblationAxis, AblationRow, run_ablation

__all__ = [
    "AblationAxis",
    "AblationRow",
    "AssocRecallTask",
    "CharCorpusTask",
    "CopyTask",
    "LayerKind",
    "MetricsRow",
    "ModelConfig",
    "Task",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergenceError",
    "TransformerLM",
    "build_model",
    "evaluate_ppl",
    "greedy_decode",
    "load_checkpoint",
    "make_task",
    "run_ablation",
    "save_checkpoint",
    "train",
]
