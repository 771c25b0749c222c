"""One-axis ablation sweeps over the desk-scale harness.

Each grid value patches a single field of the base model config, trains
one model per seed, and reports the final loss and accuracy.  Switching
the gate kind also switches the readout normalization to that kind's
defaults, because the combinations are constrained (sum normalization for
the ungated/scalar/delta rules, stable norm for the matrix-gated ones).

The scaling axis additionally reports the pre-normalization activation
std measured in the raw-exp regime of the variance theorem; the in-model
safe features subtract a max, which deliberately shrinks their scale, so
"std near 1" is only meaningful in the theorem's regime.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence

from ..block import GATE_NORM_DEFAULTS, Mode, ScalingKind
from ..features import FeatureMapKind
from ..kernels import GateKind
from ..variance import layer_activation_std
from .model import ModelConfig
from .tasks import Task
from .train import TrainConfig, train


class AblationAxis(str, Enum):
    FEATURE_DIM = "feature_dim"
    FEATURE_MAP = "feature_map"
    SCALING = "scaling"
    SUM_NORM = "sum_norm"
    STABLE_NORM = "stable_norm"
    GATE_KIND = "gate_kind"


@dataclass
class AblationRow:
    axis: str
    value: str
    seed: int
    final_loss: float
    final_accuracy: float
    pre_norm_std: Optional[float] = None


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("true", "1", "on"):
        return True
    if str(value).lower() in ("false", "0", "off"):
        return False
    raise ValueError(f"expected a boolean grid value, got {value!r}")


def apply_axis(config: ModelConfig, axis: AblationAxis, value) -> ModelConfig:
    if axis is AblationAxis.FEATURE_DIM:
        return replace(config, head_dim=int(value))
    if axis is AblationAxis.FEATURE_MAP:
        return replace(config, feature=FeatureMapKind(value))
    if axis is AblationAxis.SCALING:
        return replace(config, scaling=ScalingKind(value))
    if axis is AblationAxis.SUM_NORM:
        return replace(config, sum_norm=_parse_bool(value))
    if axis is AblationAxis.STABLE_NORM:
        return replace(config, stable_norm=_parse_bool(value))
    if axis is AblationAxis.GATE_KIND:
        gate = GateKind(value)
        return replace(config, gate=gate, **GATE_NORM_DEFAULTS[gate])
    raise ValueError(f"unknown ablation axis {axis!r}")


def run_ablation(
    axis: AblationAxis,
    grid: Sequence,
    base_config: ModelConfig,
    task: Task,
    train_cfg: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
) -> List[AblationRow]:
    """Train one model per (grid value, seed); returns one row each."""
    if not grid:
        raise ValueError("ablation grid is empty")
    if not seeds:
        raise ValueError("need at least one seed")
    rows = []
    for value in grid:
        config = apply_axis(base_config, axis, value)
        pre_norm_std = None
        if axis is AblationAxis.SCALING:
            scaling_name = (
                "inv_sqrt_d"
                if config.scaling is ScalingKind.INV_SQRT_D
                else "variance_reduction"
            )
            pre_norm_std = layer_activation_std(
                [config.head_dim], features=("exp",), scaling=scaling_name
            )[0].std
        mode = Mode.RECURRENT if config.gate is GateKind.DELTA_RULE else Mode.CHUNKED
        for seed in seeds:
            result = train(config, task, replace(train_cfg, seed=seed), mode=mode)
            last = result.metrics[-1]
            rows.append(
                AblationRow(
                    axis=axis.value,
                    value=str(getattr(value, "value", value)),
                    seed=seed,
                    final_loss=last.loss,
                    final_accuracy=last.accuracy,
                    pre_norm_std=pre_norm_std,
                )
            )
    return rows
