"""Decoder-only transformer with interchangeable attention layers.

Each layer is pre-norm residual: x + attn(norm(x)) then x + mlp(norm(x)).
Attention is either exact softmax (with rotary positions and a KV cache
for decode) or a gated linear attention block (constant-size decode state,
no positions by default; the recurrence itself encodes order).  A hybrid
pattern mixes the two per layer.

Activations flow in the (B, model_dim, L) column layout of the kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..block import (
    AttentionBlock,
    AttentionConfig,
    Mode,
    ScalingKind,
    apply_rotary,
    block_init_state,
    block_step,
    forget_gate_values,
)
from ..features import FeatureMapKind
from ..kernels import GateKind, RecurrentState, softmax_attention, stable_norm
from .rope import build_rope_tables


class LayerKind(str, Enum):
    SOFTMAX = "softmax"
    LINEAR = "linear"


@dataclass
class ModelConfig:
    """Desk-scale LM: 4 layers x 4 heads x head_dim 32, MLP 512, byte vocab."""

    vocab: int = 256
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 32
    mlp_dim: int = 512
    feature: FeatureMapKind = FeatureMapKind.SAFE_EXP
    gate: GateKind = GateKind.REGLA_REFINED
    sum_norm: bool = False
    stable_norm: bool = True
    scaling: ScalingKind = ScalingKind.VARIANCE_REDUCTION
    chunk_size: int = 16
    hybrid_pattern: Optional[List[str]] = None
    rope_softmax: bool = True
    rope_linear: bool = False

    def __post_init__(self) -> None:
        if self.vocab < 2:
            raise ValueError("vocab must be at least 2")
        if self.n_layers < 1 or self.mlp_dim < 1:
            raise ValueError("n_layers and mlp_dim must be positive")
        if self.hybrid_pattern is not None:
            if len(self.hybrid_pattern) != self.n_layers:
                raise ValueError(
                    f"hybrid_pattern has {len(self.hybrid_pattern)} entries "
                    f"for {self.n_layers} layers"
                )
            for entry in self.hybrid_pattern:
                LayerKind(entry)  # raises on unknown names
        self.attention_config()  # validate d/m/gate/norm consistency early

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    def layer_kinds(self) -> List[LayerKind]:
        if self.hybrid_pattern is None:
            return [LayerKind.LINEAR] * self.n_layers
        return [LayerKind(entry) for entry in self.hybrid_pattern]

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            d=self.head_dim,
            n_heads=self.n_heads,
            feature=self.feature,
            gate=self.gate,
            sum_norm=self.sum_norm,
            stable_norm=self.stable_norm,
            scaling=self.scaling,
            chunk_size=self.chunk_size,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["feature"] = self.feature.value
        out["gate"] = self.gate.value
        out["scaling"] = self.scaling.value
        return out

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        data = dict(data)
        if "feature" in data:
            data["feature"] = FeatureMapKind(data["feature"])
        if "gate" in data:
            data["gate"] = GateKind(data["gate"])
        if "scaling" in data:
            data["scaling"] = ScalingKind(data["scaling"])
        return ModelConfig(**data)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim, dtype=dtype))

    def forward(self, x: Tensor, dim: int = -2) -> Tensor:
        return stable_norm(x, gain=self.weight, dim=dim)


class MLPBlock(nn.Module):
    def __init__(
        self,
        dim: int,
        hidden: int,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.w1 = nn.Parameter(
            torch.randn(hidden, dim, generator=generator, dtype=dtype) / math.sqrt(dim)
        )
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=dtype))
        self.w2 = nn.Parameter(
            torch.randn(dim, hidden, generator=generator, dtype=dtype) / math.sqrt(hidden)
        )
        self.b2 = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor, p_drop: float, training: bool) -> Tensor:
        h = torch.einsum("ij,...jl->...il", self.w1, x) + self.b1.unsqueeze(-1)
        h = F.dropout(F.gelu(h), p_drop, training)
        return torch.einsum("ij,...jl->...il", self.w2, h) + self.b2.unsqueeze(-1)


class SoftmaxAttentionLayer(nn.Module):
    """Exact attention head stack with an appending KV cache for decode."""

    def __init__(
        self,
        dim: int,
        n_heads: int,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        std = 1.0 / math.sqrt(dim)

        def proj() -> nn.Parameter:
            return nn.Parameter(
                torch.randn(dim, dim, generator=generator, dtype=dtype) * std
            )

        self.proj_q, self.proj_k = proj(), proj()
        self.proj_v, self.proj_o = proj(), proj()

    def _heads(self, w: Tensor, x: Tensor) -> Tensor:
        return torch.einsum("ij,...jl->...il", w, x).unflatten(
            -2, (self.n_heads, self.head_dim)
        )

    def forward(self, x: Tensor, rope: Optional[Tuple[Tensor, Tensor]]) -> Tensor:
        q, k = self._heads(self.proj_q, x), self._heads(self.proj_k, x)
        v = self._heads(self.proj_v, x)
        if rope is not None:
            q, k = apply_rotary(q, *rope), apply_rotary(k, *rope)
        h = softmax_attention(q, k, v, causal=True)
        return torch.einsum("ij,...jl->...il", self.proj_o, h.flatten(-3, -2))

    def step(
        self,
        x_t: Tensor,
        cache: Dict[str, Tensor],
        rope: Optional[Tuple[Tensor, Tensor]],
    ) -> Tensor:
        col = x_t.unsqueeze(-1)
        q = self._heads(self.proj_q, col)
        k = self._heads(self.proj_k, col)
        v = self._heads(self.proj_v, col)
        if rope is not None:
            q, k = apply_rotary(q, *rope), apply_rotary(k, *rope)
        cache["k"] = k if "k" not in cache else torch.cat([cache["k"], k], dim=-1)
        cache["v"] = v if "v" not in cache else torch.cat([cache["v"], v], dim=-1)
        scores = torch.einsum(
            "bhd,bhdt->bht", q.squeeze(-1), cache["k"]
        ) / math.sqrt(self.head_dim)
        p = torch.softmax(scores, dim=-1)
        h = torch.einsum("bht,bhdt->bhd", p, cache["v"])
        return torch.einsum("ij,bj->bi", self.proj_o, h.flatten(-2, -1))


class LMLayer(nn.Module):
    def __init__(
        self,
        kind: LayerKind,
        config: ModelConfig,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.kind = kind
        dim = config.model_dim
        self.norm1 = RMSNorm(dim, dtype)
        self.norm2 = RMSNorm(dim, dtype)
        self.mlp = MLPBlock(dim, config.mlp_dim, generator, dtype)
        if kind is LayerKind.SOFTMAX:
            self.attn: nn.Module = SoftmaxAttentionLayer(
                dim, config.n_heads, generator, dtype
            )
        else:
            self.attn = AttentionBlock(config.attention_config(), generator, dtype)


class TransformerLM(nn.Module):
    """Decoder-only LM over the configured layer stack."""

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        super().__init__()
        self.config = config
        generator = torch.Generator().manual_seed(seed)
        dim, dtype = config.model_dim, torch.float32
        self.embed = nn.Parameter(
            torch.randn(config.vocab, dim, generator=generator, dtype=dtype) * 0.02
        )
        self.layers = nn.ModuleList(
            LMLayer(kind, config, generator, dtype) for kind in config.layer_kinds()
        )
        self.final_norm = RMSNorm(dim, dtype)
        self.head = nn.Parameter(
            torch.randn(config.vocab, dim, generator=generator, dtype=dtype) * 0.02
        )
        self.dropout_p = 0.0

    def _rope_tables(
        self, length: int, offset: int = 0
    ) -> Optional[Tuple[Tensor, Tensor]]:
        kinds = self.config.layer_kinds()
        need = (self.config.rope_softmax and LayerKind.SOFTMAX in kinds) or (
            self.config.rope_linear and LayerKind.LINEAR in kinds
        )
        if not need:
            return None
        return build_rope_tables(
            self.config.head_dim, length, dtype=self.embed.dtype, offset=offset
        )

    def _layer_rope(
        self, layer: LMLayer, rope: Optional[Tuple[Tensor, Tensor]]
    ) -> Optional[Tuple[Tensor, Tensor]]:
        if layer.kind is LayerKind.SOFTMAX:
            return rope if self.config.rope_softmax else None
        return rope if self.config.rope_linear else None

    def forward(
        self,
        tokens: Tensor,
        mode: Mode = Mode.CHUNKED,
        gate_tap: Optional[List[Tuple[int, Tensor]]] = None,
    ) -> Tensor:
        """tokens (B, T) int64 -> logits (B, vocab, T)."""
        if tokens.min() < 0 or tokens.max() >= self.config.vocab:
            raise ValueError("token id out of range")
        x = F.embedding(tokens, self.embed).transpose(-2, -1)  # (B, D, T)
        rope = self._rope_tables(tokens.shape[-1])
        p = self.dropout_p
        for idx, layer in enumerate(self.layers):
            a = layer.norm1(x)
            if gate_tap is not None and layer.kind is LayerKind.LINEAR:
                blk = layer.attn
                if blk.config.gate in (
                    GateKind.REGLA_REFINED,
                    GateKind.FAST_DECAY,
                    GateKind.SCALAR_RFA,
                ):
                    gate_tap.append(
                        (idx, forget_gate_values(blk.config, blk.params(), a).detach())
                    )
            if layer.kind is LayerKind.SOFTMAX:
                y = layer.attn(a, self._layer_rope(layer, rope))
            else:
                y = layer.attn(a, mode=mode, rope=self._layer_rope(layer, rope))
            x = x + F.dropout(y, p, self.training)
            x = x + F.dropout(layer.mlp(layer.norm2(x), p, self.training), p, self.training)
        return torch.einsum("ij,...jl->...il", self.head, self.final_norm(x))

    def loss(
        self, tokens: Tensor, mask: Tensor, mode: Mode = Mode.CHUNKED
    ) -> Tuple[Tensor, Tensor]:
        """Masked next-token cross entropy; returns (loss, logits)."""
        logits = self.forward(tokens, mode=mode)
        pred = logits[..., :-1]
        targets = tokens[:, 1:]
        nll = F.cross_entropy(pred, targets, reduction="none")
        denom = mask.sum().clamp(min=1)
        return (nll * mask).sum() / denom, logits

    def accuracy(self, tokens: Tensor, mask: Tensor, mode: Mode = Mode.CHUNKED) -> float:
        logits = self.forward(tokens, mode=mode)
        hits = logits[..., :-1].argmax(dim=-2) == tokens[:, 1:]
        return float((hits & mask).sum()) / float(mask.sum().clamp(min=1))

    # ------------------------------------------------------------------
    # O(1)-per-step decoding

    def init_decode_state(self, batch_size: int) -> dict:
        states: List[Union[RecurrentState, Dict[str, Tensor]]] = []
        for layer in self.layers:
            if layer.kind is LayerKind.SOFTMAX:
                states.append({})
            else:
                states.append(
                    block_init_state(
                        layer.attn.config, (batch_size,), dtype=self.embed.dtype
                    )
                )
        return {"layers": states, "pos": 0}

    def decode_step(self, tokens_t: Tensor, state: dict) -> Tensor:
        """tokens_t (B,) -> logits (B, vocab); advances state one position."""
        x = F.embedding(tokens_t, self.embed)  # (B, D)
        rope = self._rope_tables(1, offset=state["pos"])
        for layer, layer_state in zip(self.layers, state["layers"]):
            a = layer.norm1(x, dim=-1)
            if layer.kind is LayerKind.SOFTMAX:
                y = layer.attn.step(a, layer_state, self._layer_rope(layer, rope))
            else:
                y = block_step(
                    layer.attn.config,
                    layer.attn.params(),
                    layer_state,
                    a,
                    rope=self._layer_rope(layer, rope),
                )
            x = x + y
            x = x + layer.mlp(
                layer.norm2(x, dim=-1).unsqueeze(-1), 0.0, False
            ).squeeze(-1)
        state["pos"] += 1
        return torch.einsum("ij,bj->bi", self.head, self.final_norm(x, dim=-1))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: ModelConfig, seed: int = 0) -> TransformerLM:
    return TransformerLM(config, seed=seed)
