"""Multi-head linear attention block.

Projects a model-dim input to per-head queries, keys, and values, applies
the configured feature map and gate rule per head, and merges heads through
an output projection.  One forward pass can run in three modes:

    Parallel   closed form over the whole sequence (chunk size = L)
    Chunked    fixed-size chunks with carried state
    Recurrent  stepwise reference recurrence

plus an O(1)-memory decode path (`block_init_state` / `block_step`) whose
key max, for the safe exponential feature map, is a running max with state
re-basing instead of the full-sequence max used by the batch modes.

Input and output are (..., model_dim, L) with positions along the last
axis, model_dim = n_heads * d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import torch
from torch import Tensor, nn

from .features import (
    FeatureMapKind,
    StreamingMaxState,
    apply_feature_map,
    feature_dim,
    safe_exp_key_from_pre,
    safe_exp_key_step_from_pre,
    safe_exp_query_from_pre,
    scaling_factor,
)
from .kernels import (
    GateKind,
    GateParams,
    RecurrentState,
    UnsupportedModeError,
    _validate_norms,
    apply_state_rescale,
    delta_rule_step,
    fast_decay_gates,
    fast_decay_step,
    gated_linear_chunked,
    gated_linear_recurrent,
    init_recurrent_state,
    linear_attention_parallel,
    linear_attention_step,
    refined_forget,
    refined_gates,
    regla_step,
    rfa_gate_step,
    scalar_gate,
    stable_norm,
)


class Mode(str, Enum):
    PARALLEL = "parallel"
    RECURRENT = "recurrent"
    CHUNKED = "chunked"


# Readout normalization each gate kind is defined with: the ungated, scalar,
# and delta rules normalize by the feature sum; the matrix-gated rules have
# no gated feature-sum recurrence and use the stable norm instead.
GATE_NORM_DEFAULTS = {
    GateKind.NONE: {"sum_norm": True, "stable_norm": False},
    GateKind.SCALAR_RFA: {"sum_norm": True, "stable_norm": False},
    GateKind.DELTA_RULE: {"sum_norm": True, "stable_norm": False},
    GateKind.FAST_DECAY: {"sum_norm": False, "stable_norm": True},
    GateKind.REGLA_REFINED: {"sum_norm": False, "stable_norm": True},
}


class ScalingKind(str, Enum):
    INV_SQRT_D = "inv_sqrt_d"
    VARIANCE_REDUCTION = "variance_reduction"


@dataclass
class AttentionConfig:
    """Shape and rule selection for one attention block.

    m is derived from the feature map (2d for CosSin, d otherwise) and may
    be passed only redundantly.  Refined gating requires the stable-norm
    readout with sum normalization off; the matrix-gated kinds define no
    feature-sum recurrence, so sum_norm is rejected for them.
    """

    d: int
    n_heads: int = 1
    feature: FeatureMapKind = FeatureMapKind.SAFE_EXP
    gate: GateKind = GateKind.REGLA_REFINED
    sum_norm: bool = False
    stable_norm: bool = True
    scaling: ScalingKind = ScalingKind.VARIANCE_REDUCTION
    chunk_size: int = 16
    m: Optional[int] = None

    def __post_init__(self) -> None:
        if self.d <= 0 or self.n_heads <= 0:
            raise ValueError("d and n_heads must be positive")
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")
        expected_m = feature_dim(self.feature, self.d)
        if self.m is None:
            self.m = expected_m
        elif self.m != expected_m:
            raise ValueError(
                f"m={self.m} inconsistent with feature map "
                f"{self.feature.value} at d={self.d} (expected {expected_m})"
            )
        _validate_norms(self.gate, self.sum_norm, self.stable_norm)

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.d

    @property
    def scale(self) -> float:
        if self.scaling is ScalingKind.INV_SQRT_D:
            return 1.0 / math.sqrt(self.d)
        return scaling_factor(self.feature, self.d)


@dataclass
class BlockParams:
    """Weights of one block: four (D, D) projections, head-stacked gate
    parameters, and per-head stable-norm gains (H, d)."""

    proj_q: Tensor
    proj_k: Tensor
    proj_v: Tensor
    proj_o: Tensor
    gate: GateParams
    gain: Optional[Tensor] = None

    @staticmethod
    def init(
        config: AttentionConfig,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float64,
    ) -> "BlockParams":
        dim = config.model_dim
        std = 1.0 / math.sqrt(dim)

        def proj() -> Tensor:
            return torch.randn(dim, dim, generator=generator, dtype=dtype) * std

        gate = GateParams.init(
            config.gate,
            config.d,
            config.m,
            heads=config.n_heads,
            generator=generator,
            dtype=dtype,
        )
        gain = (
            torch.ones(config.n_heads, config.d, dtype=dtype)
            if config.stable_norm
            else None
        )
        return BlockParams(
            proj_q=proj(), proj_k=proj(), proj_v=proj(), proj_o=proj(), gate=gate, gain=gain
        )


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., D, L) -> (..., H, d, L)."""
    return x.unflatten(-2, (n_heads, x.shape[-2] // n_heads))


def _merge_heads(x: Tensor) -> Tensor:
    """(..., H, d, L) -> (..., D, L)."""
    return x.flatten(-3, -2)


def apply_rotary(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotate consecutive dim pairs of x (..., d, L) by position-dependent
    angles; cos, sin are (d/2, L) frequency tables."""
    x1, x2 = x[..., 0::2, :], x[..., 1::2, :]
    out = torch.empty_like(x)
    out[..., 0::2, :] = x1 * cos - x2 * sin
    out[..., 1::2, :] = x1 * sin + x2 * cos
    return out


def _project_heads(
    config: AttentionConfig,
    params: BlockParams,
    x: Tensor,
    rope: Optional[Tuple[Tensor, Tensor]] = None,
) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """Shared projection front end: per-head q/k pre-activations, values,
    and the per-head gate input slices."""
    if x.shape[-2] != config.model_dim:
        raise ValueError(
            f"input has dim {x.shape[-2]}, config expects {config.model_dim}"
        )
    q_pre = _split_heads(torch.einsum("ij,...jl->...il", params.proj_q, x), config.n_heads)
    k_pre = _split_heads(torch.einsum("ij,...jl->...il", params.proj_k, x), config.n_heads)
    v = _split_heads(torch.einsum("ij,...jl->...il", params.proj_v, x), config.n_heads)
    if rope is not None:
        cos, sin = rope
        q_pre = apply_rotary(q_pre, cos, sin)
        k_pre = apply_rotary(k_pre, cos, sin)
    x_heads = _split_heads(x, config.n_heads)
    return q_pre, k_pre, v, x_heads


def _features_full(
    config: AttentionConfig, q_pre: Tensor, k_pre: Tensor
) -> Tuple[Tensor, Tensor]:
    if config.feature is FeatureMapKind.SAFE_EXP:
        return safe_exp_query_from_pre(q_pre), safe_exp_key_from_pre(k_pre)
    return (
        apply_feature_map(config.feature, q_pre),
        apply_feature_map(config.feature, k_pre),
    )


def block_forward(
    config: AttentionConfig,
    params: BlockParams,
    x: Tensor,
    mode: Mode = Mode.CHUNKED,
    rope: Optional[Tuple[Tensor, Tensor]] = None,
    chunk_size: Optional[int] = None,
) -> Tensor:
    """Full multi-head block over a sequence x (..., D, L) -> (..., D, L).

    The three modes compute the same function up to float roundoff; the
    delta rule only supports Recurrent.  Safe-exp key features use the
    full-sequence max here (decode uses the running max instead).
    """
    q_pre, k_pre, v, x_heads = _project_heads(config, params, x, rope)
    phi_q, phi_k = _features_full(config, q_pre, k_pre)
    kind, scale = config.gate, config.scale

    if mode is Mode.RECURRENT:
        h = gated_linear_recurrent(
            kind,
            phi_q,
            phi_k,
            v,
            x=x_heads,
            params=params.gate,
            sum_norm=config.sum_norm,
            stable=config.stable_norm,
            gain=params.gain,
            scale=scale,
        )
    elif mode in (Mode.PARALLEL, Mode.CHUNKED):
        length = x.shape[-1]
        size = length if mode is Mode.PARALLEL else (chunk_size or config.chunk_size)
        if kind is GateKind.NONE:
            if mode is Mode.PARALLEL:
                h = linear_attention_parallel(
                    phi_q, phi_k, v, sum_norm=config.sum_norm, scale=scale
                )
                if config.stable_norm:
                    h = stable_norm(h, gain=params.gain, dim=-2)
            else:
                h, _ = gated_linear_chunked(
                    kind,
                    phi_q,
                    phi_k,
                    v,
                    chunk_size=size,
                    sum_norm=config.sum_norm,
                    stable=config.stable_norm,
                    gain=params.gain,
                    scale=scale,
                )
        else:
            h, _ = gated_linear_chunked(
                kind,
                phi_q,
                phi_k,
                v,
                x=x_heads,
                params=params.gate,
                chunk_size=size,
                sum_norm=config.sum_norm,
                stable=config.stable_norm,
                gain=params.gain,
                scale=scale,
            )
    else:
        raise UnsupportedModeError(f"unknown mode {mode!r}")

    return torch.einsum("ij,...jl->...il", params.proj_o, _merge_heads(h))


def block_init_state(
    config: AttentionConfig,
    batch_shape: Tuple[int, ...] = (),
    dtype: torch.dtype = torch.float64,
) -> RecurrentState:
    """Fresh decode state: (batch..., H, d, m) state matrix plus feature-sum
    and running-max accumulators as the config requires.

    The delta rule sum-normalizes its write key, which cancels any uniform
    feature rescaling, so it tracks no running key max."""
    needs_c = config.sum_norm or config.gate is GateKind.DELTA_RULE
    streaming = (
        config.feature is FeatureMapKind.SAFE_EXP
        and config.gate is not GateKind.DELTA_RULE
    )
    return init_recurrent_state(
        config.d,
        config.m,
        batch_shape + (config.n_heads,),
        sum_norm=needs_c,
        streaming_key_max=streaming,
        dtype=dtype,
    )


def block_step(
    config: AttentionConfig,
    params: BlockParams,
    state: RecurrentState,
    x_t: Tensor,
    rope: Optional[Tuple[Tensor, Tensor]] = None,
) -> Tensor:
    """One decode step x_t (..., D) -> y_t (..., D), state updated in place.

    rope, when given, is the (cos, sin) column pair for this position.
    """
    x_col = x_t.unsqueeze(-1)
    q_pre, k_pre, v, x_heads = _project_heads(config, params, x_col, rope)
    q_pre, k_pre = q_pre.squeeze(-1), k_pre.squeeze(-1)
    v, x_h = v.squeeze(-1), x_heads.squeeze(-1)

    if config.feature is FeatureMapKind.SAFE_EXP:
        phi_q = torch.exp(q_pre - q_pre.amax(dim=-1, keepdim=True))
        if state.key_max is None:  # delta rule: normalized key cancels the max
            phi_k = torch.exp(k_pre - k_pre.amax(dim=-1, keepdim=True))
        else:
            phi_k, rescale = safe_exp_key_step_from_pre(k_pre, state.key_max)
            apply_state_rescale(state, rescale)
    else:
        phi_q = apply_feature_map(config.feature, q_pre.unsqueeze(-1)).squeeze(-1)
        phi_k = apply_feature_map(config.feature, k_pre.unsqueeze(-1)).squeeze(-1)

    kind, scale = config.gate, config.scale
    args = (state, phi_q, phi_k, v)
    if kind is GateKind.NONE:
        state, h = linear_attention_step(*args, sum_norm=config.sum_norm, scale=scale)
        if config.stable_norm:
            h = stable_norm(h, gain=params.gain, dim=-1)
    elif kind is GateKind.SCALAR_RFA:
        state, h = rfa_gate_step(*args, x_h, params.gate, scale=scale)
    elif kind is GateKind.DELTA_RULE:
        state, h = delta_rule_step(*args, x_h, params.gate, scale=scale)
    elif kind is GateKind.FAST_DECAY:
        state, h = fast_decay_step(*args, x_h, params.gate, scale=scale, gain=params.gain)
    elif kind is GateKind.REGLA_REFINED:
        state, h = regla_step(*args, x_h, params.gate, scale=scale, gain=params.gain)
    else:
        raise ValueError(f"unknown gate kind {kind!r}")

    return torch.einsum("ij,...j->...i", params.proj_o, _merge_heads(h.unsqueeze(-1)).squeeze(-1))


def forget_gate_values(
    config: AttentionConfig, params: BlockParams, x: Tensor
) -> Tensor:
    """Forget-gate activations the block would apply on input x (..., D, L).

    ReglaRefined returns the refined f (..., H, d, L); FastDecay returns the
    rank-1 gate matrix entries flattened to (..., H, d * m, L); ScalarRFA
    the scalar gate (..., H, 1, L).
    """
    x_heads = _split_heads(x, config.n_heads)
    if config.gate is GateKind.REGLA_REFINED:
        g, r = refined_gates(params.gate, x_heads)
        return refined_forget(g, r)
    if config.gate is GateKind.FAST_DECAY:
        z, f = fast_decay_gates(params.gate, x_heads)
        gate = torch.einsum("...dl,...ml->...dml", z, f)
        return gate.flatten(-3, -2)
    if config.gate is GateKind.SCALAR_RFA:
        return scalar_gate(params.gate, x_heads).unsqueeze(-2)
    raise ValueError(f"{config.gate.value} has no forget gate to inspect")


class AttentionBlock(nn.Module):
    """Trainable wrapper around block_forward with registered parameters."""

    def __init__(
        self,
        config: AttentionConfig,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.config = config
        init = BlockParams.init(config, generator=generator, dtype=dtype)
        self.proj_q = nn.Parameter(init.proj_q)
        self.proj_k = nn.Parameter(init.proj_k)
        self.proj_v = nn.Parameter(init.proj_v)
        self.proj_o = nn.Parameter(init.proj_o)
        self.gain = nn.Parameter(init.gain) if init.gain is not None else None
        self._gate_fields = []
        for name, tensor in init.gate.tensors():
            param = nn.Parameter(tensor)
            setattr(self, f"gate_{name}", param)
            self._gate_fields.append(name)

    def params(self) -> BlockParams:
        gate = GateParams(
            kind=self.config.gate,
            **{name: getattr(self, f"gate_{name}") for name in self._gate_fields},
        )
        return BlockParams(
            proj_q=self.proj_q,
            proj_k=self.proj_k,
            proj_v=self.proj_v,
            proj_o=self.proj_o,
            gate=gate,
            gain=self.gain,
        )

    def forward(
        self,
        x: Tensor,
        mode: Mode = Mode.CHUNKED,
        rope: Optional[Tuple[Tensor, Tensor]] = None,
    ) -> Tensor:
        return block_forward(self.config, self.params(), x, mode=mode, rope=rope)
