"""Decode-time benchmark: wall time and attention-state memory.

During autoregressive decoding a softmax layer's KV cache grows linearly
with the generated length,

    kv_bytes(L) = 2 * L * head_dim * n_heads * n_layers * bytes_per_element

while every linear attention kind keeps a constant-size state,

    state_bytes = (d * m + m) * n_heads * n_layers * bytes_per_element

(the d x m matrix plus the m-vector feature-sum slot).  The benchmark
decodes greedily through the O(1) recurrent path, reports the analytic
byte counts for each generation length next to the peak bytes actually
held in attention state tensors, and times the full decode with
perf_counter; medians over trials smooth scheduler noise.  Timing columns
are excluded from byte-reproducibility claims.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
import torch

from .block import GATE_NORM_DEFAULTS
from .features import FeatureMapKind
from .kernels import GateKind, RecurrentState
from .lm.model import LayerKind, ModelConfig, build_model

BYTES_PER_ELEMENT = 4  # float32 states


def kv_cache_bytes(
    gen_len: int,
    n_layers: int,
    n_heads: int,
    head_dim: int,
    bytes_per_element: int = BYTES_PER_ELEMENT,
) -> int:
    """Softmax attention cache for gen_len generated positions."""
    if gen_len < 1:
        raise ValueError(f"gen_len must be >= 1, got {gen_len}")
    return 2 * gen_len * head_dim * n_heads * n_layers * bytes_per_element


def linear_state_bytes(
    n_layers: int,
    n_heads: int,
    head_dim: int,
    feature_dim: Optional[int] = None,
    bytes_per_element: int = BYTES_PER_ELEMENT,
) -> int:
    """Constant decode state of any linear attention kind."""
    m = head_dim if feature_dim is None else feature_dim
    return (head_dim * m + m) * n_heads * n_layers * bytes_per_element


_LINEAR_KINDS = {
    "none": GateKind.NONE,
    "scalar_rfa": GateKind.SCALAR_RFA,
    "delta_rule": GateKind.DELTA_RULE,
    "fast_decay": GateKind.FAST_DECAY,
    "regla": GateKind.REGLA_REFINED,
}
KINDS = ("softmax",) + tuple(_LINEAR_KINDS)


def config_for_kind(kind: str, base: ModelConfig) -> ModelConfig:
    if kind == "softmax":
        return replace(base, hybrid_pattern=["softmax"] * base.n_layers)
    if kind not in _LINEAR_KINDS:
        raise ValueError(f"unknown kind {kind!r} (expected one of {sorted(KINDS)})")
    gate = _LINEAR_KINDS[kind]
    return replace(base, hybrid_pattern=None, gate=gate, **GATE_NORM_DEFAULTS[gate])


def _state_bytes(state: dict) -> int:
    total = 0
    for layer_state in state["layers"]:
        if isinstance(layer_state, RecurrentState):
            total += layer_state.s.numel() * layer_state.s.element_size()
            if layer_state.c is not None:
                total += layer_state.c.numel() * layer_state.c.element_size()
            if layer_state.key_max is not None:
                rm = layer_state.key_max.running_max
                total += rm.numel() * rm.element_size()
        else:
            for t in layer_state.values():
                total += t.numel() * t.element_size()
    return total


@dataclass
class BenchRow:
    kind: str
    gen_len: int
    analytic_state_bytes: int
    measured_peak_bytes: int
    median_ms: float


def decode_benchmark(
    kinds: Sequence[str],
    gen_lens: Sequence[int],
    base_config: Optional[ModelConfig] = None,
    prompt_len: int = 5,
    trials: int = 3,
    seed: int = 0,
) -> List[BenchRow]:
    """Greedy-decode each kind at each generation length; one row each."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not kinds or not gen_lens:
        raise ValueError("kinds and gen_lens must be non-empty")
    base = base_config or ModelConfig()
    rng = np.random.default_rng([seed, 31])
    rows = []
    for kind in kinds:
        config = config_for_kind(kind, base)
        model = build_model(config, seed=seed)
        model.eval()
        prompt = torch.from_numpy(
            rng.integers(0, config.vocab, size=(1, prompt_len)).astype(np.int64)
        )
        for gen_len in gen_lens:
            times = []
            peak = 0
            for _ in range(trials):
                start = time.perf_counter()
                with torch.no_grad():
                    state = model.init_decode_state(1)
                    logits = None
                    for t in range(prompt.shape[1]):
                        logits = model.decode_step(prompt[:, t], state)
                    peak = max(peak, _state_bytes(state))
                    for _ in range(gen_len):
                        token = logits.argmax(dim=-1)
                        logits = model.decode_step(token, state)
                        peak = max(peak, _state_bytes(state))
                times.append((time.perf_counter() - start) * 1000.0)
            if kind == "softmax":
                analytic = kv_cache_bytes(
                    gen_len, config.n_layers, config.n_heads, config.head_dim
                )
            else:
                m = 2 * config.head_dim if config.feature is FeatureMapKind.COS_SIN else config.head_dim
                analytic = linear_state_bytes(
                    config.n_layers, config.n_heads, config.head_dim, m
                )
            rows.append(
                BenchRow(
                    kind=kind,
                    gen_len=gen_len,
                    analytic_state_bytes=analytic,
                    measured_peak_bytes=peak,
                    median_ms=float(np.median(times)),
                )
            )
    return rows


def throughput_fit(gen_lens: Sequence[int], times_ms: Sequence[float]) -> float:
    """Log-log slope of decode time vs generation length.

    Slope near 1 means constant per-token cost; softmax decoding, whose
    per-token cost grows with the cache, fits above 1.
    """
    if len(gen_lens) != len(times_ms):
        raise ValueError("gen_lens and times_ms must have equal length")
    if len(gen_lens) < 3:
        raise ValueError("need at least 3 points to fit a slope")
    x = np.log(np.asarray(gen_lens, dtype=np.float64))
    y = np.log(np.asarray(times_ms, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])
