"""Gate diagnostics: gradient amplification curves, saturation
interventions, and forget-gate activation histograms.

The refined forget gate f = (1-r) g^2 + r (1 - (1-g)^2) keeps the vanilla
gate's fixed points but changes the slope: its pre-activation gradient
carries the factor 2(1-r)g + 2r(1-g), which approaches 2 where a plain
sigmoid gate saturates (g near 1 with r small, or g near 0 with r large).
`gradient_curves` tabulates both derivatives for plotting; the histogram
helpers measure how training moves gate activations out of a saturated
initialization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch

from .block import AttentionBlock
from .grads import refined_gate_grad, vanilla_gate_grad
from .kernels import GateKind, GateParams
from .lm.model import LayerKind, TransformerLM
from .lm.tasks import Task


@dataclass
class CurveRow:
    g: float
    r: float
    grad_refined: float
    grad_vanilla: float


def gradient_curves(
    g_values: Sequence[float], r_values: Sequence[float]
) -> List[CurveRow]:
    """Refined vs vanilla gate gradients on a grid, g in (0, 1), r in [0, 1].

    r = 0 and r = 1 are the interesting extremes (the refined gradient
    there is 2g and 2(1 - g) times the vanilla one), so the r grid is
    closed; g at 0 or 1 makes both gradients vanish and is rejected.
    """
    g_arr = np.asarray(list(g_values), dtype=np.float64)
    r_arr = np.asarray(list(r_values), dtype=np.float64)
    for name, arr in (("g", g_arr), ("r", r_arr)):
        if arr.size == 0:
            raise ValueError(f"{name} grid is empty")
    if (g_arr <= 0.0).any() or (g_arr >= 1.0).any():
        raise ValueError("g grid values must lie strictly in (0, 1)")
    if (r_arr < 0.0).any() or (r_arr > 1.0).any():
        raise ValueError("r grid values must lie in [0, 1]")
    rows = []
    for r in r_arr:
        for g in g_arr:
            rows.append(
                CurveRow(
                    g=float(g),
                    r=float(r),
                    grad_refined=float(refined_gate_grad(g, r)),
                    grad_vanilla=float(vanilla_gate_grad(g)),
                )
            )
    return rows


def extreme_bias_init(params: GateParams, bias: float) -> None:
    """Push the forget gate toward saturation by setting its bias fields.

    Sets b_g for the refined gate, b_z and b_f for the rank-1 matrix gate.
    Kinds without gate biases cannot be saturated this way.
    """
    with torch.no_grad():
        if params.kind is GateKind.REGLA_REFINED:
            params.b_g.fill_(bias)
        elif params.kind is GateKind.FAST_DECAY:
            params.b_z.fill_(bias)
            params.b_f.fill_(bias)
        else:
            raise ValueError(
                f"{params.kind.value} has no gate bias to saturate"
            )


def apply_extreme_gate_bias(model: TransformerLM, bias: float) -> int:
    """Apply extreme_bias_init to every gated linear layer; returns count."""
    touched = 0
    for layer in model.layers:
        if layer.kind is not LayerKind.LINEAR:
            continue
        block: AttentionBlock = layer.attn
        if block.config.gate in (GateKind.REGLA_REFINED, GateKind.FAST_DECAY):
            extreme_bias_init(block.params().gate, bias)
            touched += 1
    if touched == 0:
        raise ValueError("model has no gated linear layers to saturate")
    return touched


def activation_histogram(
    values: np.ndarray, n_bins: int = 50
) -> Tuple[np.ndarray, np.ndarray]:
    """Histogram of gate activations over [0, 1]; returns (counts, edges)."""
    if n_bins < 2:
        raise ValueError(f"need at least 2 bins, got {n_bins}")
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("no gate activations to histogram")
    if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
        raise ValueError("gate activations must lie in [0, 1]")
    counts, edges = np.histogram(np.clip(arr, 0.0, 1.0), bins=n_bins, range=(0.0, 1.0))
    return counts.astype(np.int64), edges


@dataclass
class LayerHistogram:
    layer: int
    counts: np.ndarray
    edges: np.ndarray


def collect_gate_histograms(
    model: TransformerLM,
    task: Task,
    n_batches: int = 2,
    batch_size: int = 8,
    seed: int = 0,
    n_bins: int = 50,
) -> List[LayerHistogram]:
    """Forget-gate activation histograms per gated layer on eval batches."""
    rng = np.random.default_rng([seed, 29])
    per_layer: dict[int, list[np.ndarray]] = {}
    model.eval()
    with torch.no_grad():
        for _ in range(n_batches):
            tokens, _ = task.sample(rng, batch_size)
            tap: list = []
            model.forward(tokens, gate_tap=tap)
            for layer_idx, values in tap:
                per_layer.setdefault(layer_idx, []).append(
                    values.to(torch.float64).numpy().ravel()
                )
    if not per_layer:
        raise ValueError("model produced no gate activations")
    out = []
    for layer_idx in sorted(per_layer):
        counts, edges = activation_histogram(
            np.concatenate(per_layer[layer_idx]), n_bins
        )
        out.append(LayerHistogram(layer=layer_idx, counts=counts, edges=edges))
    return out


def histogram_entropy(counts: np.ndarray) -> float:
    """Shannon entropy (nats) of a normalized histogram; empty bins drop out."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("histogram has no mass")
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())
