"""Feature maps for linear attention.

A feature map phi turns queries and keys into non-negative (or at least
well-scaled) vectors so that softmax attention's exp(q.k) can be replaced
by the factorized inner product phi(q).phi(k).

The safe exponential map subtracts a max before exponentiating so the
features stay in (0, 1] and their inner products in (0, d]:

    phi_q(x_t) = exp(W_q x_t - max_i (W_q x_t)_i)        per-column max
    phi_k(x_t) = exp(W_k x_t - M),  M = max over dims and positions

Queries use a per-position max (each output column is normalized on its
own); keys share a single max across the sequence so that key features
remain comparable across time.  In streaming decode the key max is a
running max: whenever it increases from M_old to M_new, previously
accumulated state built from exp(. - M_old) features must be multiplied
by exp(M_old - M_new) to re-base it.  `safe_exp_key` returns that factor.

Tensors are laid out with positions along the last axis: x is (..., d, L)
and features are (..., m, L).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import torch
from torch import Tensor

E_SQ_MINUS_1 = math.e**2 - 1.0


class FeatureMapKind(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    ELU_PLUS_ONE = "elu1"
    COS_SIN = "cossin"
    SAFE_EXP = "exp"


class KeyMaxMode(str, Enum):
    """How the key-side max is computed for the safe exponential map."""

    FULL_SEQUENCE = "full_sequence"
    STREAMING = "streaming"


def feature_dim(kind: FeatureMapKind, d: int) -> int:
    """Output dimension m of the feature map for head dimension d."""
    if d <= 0:
        raise ValueError(f"head dimension must be positive, got {d}")
    return 2 * d if kind is FeatureMapKind.COS_SIN else d


def apply_feature_map(kind: FeatureMapKind, z: Tensor) -> Tensor:
    """Apply an elementwise feature map to pre-activations z (..., d, L).

    SafeExp is not an elementwise map (it couples dims and positions through
    the max), so it must go through safe_exp_query / safe_exp_key instead.
    """
    if kind is FeatureMapKind.SAFE_EXP:
        raise ValueError(
            "SafeExp couples columns through the max subtraction; "
            "use safe_exp_query / safe_exp_key"
        )
    if not torch.isfinite(z).all():
        raise ValueError("feature map input contains non-finite values")
    if kind is FeatureMapKind.IDENTITY:
        return z
    if kind is FeatureMapKind.RELU:
        return torch.clamp(z, min=0.0)
    if kind is FeatureMapKind.ELU_PLUS_ONE:
        return torch.nn.functional.elu(z) + 1.0
    if kind is FeatureMapKind.COS_SIN:
        return torch.cat([torch.cos(z), torch.sin(z)], dim=-2)
    raise ValueError(f"unknown feature map kind {kind!r}")


@dataclass
class FeatureParams:
    """Learned projections feeding the safe exponential map.

    w_q, w_k: (d, d), entries drawn N(0, 1/d) so that unit-variance inputs
    give unit-variance pre-activations.
    """

    w_q: Tensor
    w_k: Tensor

    @staticmethod
    def init(
        d: int,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float64,
    ) -> "FeatureParams":
        std = 1.0 / math.sqrt(d)
        w_q = torch.randn(d, d, generator=generator, dtype=dtype) * std
        w_k = torch.randn(d, d, generator=generator, dtype=dtype) * std
        return FeatureParams(w_q=w_q, w_k=w_k)


@dataclass
class StreamingMaxState:
    """Running key max for streaming safe-exp features.

    running_max has one entry per independent stream (shape () for a single
    sequence, (B, H) per batch element and head inside a model).
    """

    running_max: Tensor
    initialized: bool = False

    @staticmethod
    def fresh(shape: Tuple[int, ...] = (), dtype: torch.dtype = torch.float64) -> "StreamingMaxState":
        return StreamingMaxState(
            running_max=torch.full(shape, -math.inf, dtype=dtype), initialized=False
        )


def safe_exp_query_from_pre(z: Tensor) -> Tensor:
    """exp(z - per-column max) on pre-activations z (..., d, L)."""
    return torch.exp(z - z.amax(dim=-2, keepdim=True))


def safe_exp_key_from_pre(z: Tensor) -> Tensor:
    """exp(z - max over dims and positions) on pre-activations z (..., d, L)."""
    return torch.exp(z - z.amax(dim=(-2, -1), keepdim=True))


def safe_exp_key_step_from_pre(
    z: Tensor, state: StreamingMaxState
) -> Tuple[Tensor, Tensor]:
    """Streaming key features for one column z (..., d); updates `state`.

    Returns (features, rescale): multiply state accumulated from earlier
    keys by rescale = exp(M_old - M_new) before adding the new outer
    product, so everything stays based at the current running max.
    """
    col_max = z.amax(dim=-1)
    if state.initialized:
        new_max = torch.maximum(state.running_max, col_max)
        rescale = torch.exp(state.running_max - new_max)
    else:
        new_max = col_max
        rescale = torch.ones_like(col_max)
    state.running_max = new_max
    state.initialized = True
    return torch.exp(z - new_max.unsqueeze(-1)), rescale


def safe_exp_query(w_q: Tensor, x: Tensor) -> Tensor:
    """exp(W_q x - per-column max), columns of x being positions.

    x: (..., d, L) -> features (..., d, L), entries in (0, 1] with at least
    one exact 1 per column.
    """
    if not torch.isfinite(x).all():
        raise ValueError("safe_exp_query input contains non-finite values")
    z = torch.einsum("ij,...jl->...il", w_q, x)
    return safe_exp_query_from_pre(z)


def safe_exp_key(
    w_k: Tensor,
    x: Tensor,
    mode: KeyMaxMode = KeyMaxMode.FULL_SEQUENCE,
    state: Optional[StreamingMaxState] = None,
) -> Tuple[Tensor, Optional[Tensor]]:
    """Safe-exp key features plus the state rescale factor.

    FULL_SEQUENCE: x is (..., d, L); the max is taken jointly over the dim
    and position axes of each stream.  Returns (features, None).

    STREAMING: x is a single column (..., d); `state` carries the running
    max across calls and is updated in place.  Returns (features, rescale)
    where rescale = exp(M_old - M_new) must multiply any state accumulated
    from earlier key features before the new outer product is added.
    """
    if not torch.isfinite(x).all():
        raise ValueError("safe_exp_key input contains non-finite values")
    if mode is KeyMaxMode.FULL_SEQUENCE:
        z = torch.einsum("ij,...jl->...il", w_k, x)
        return safe_exp_key_from_pre(z), None
    if mode is KeyMaxMode.STREAMING:
        if state is None:
            raise ValueError("streaming key features require a StreamingMaxState")
        z = torch.einsum("ij,...j->...i", w_k, x)
        return safe_exp_key_step_from_pre(z, state)
    raise ValueError(f"unknown key max mode {mode!r}")


def scaling_factor(kind: FeatureMapKind, d: int) -> float:
    """Variance-reduction scale applied to query features.

    For standard normal q, k entries the inner product of raw exp features
    has variance e^2 (e^2 - 1) d, so SafeExp divides by e sqrt(d (e^2 - 1)).
    Identity features give variance d, hence 1/sqrt(d).  The remaining maps
    fall back to 1/sqrt(m).
    """
    if d <= 0:
        raise ValueError(f"head dimension must be positive, got {d}")
    if kind is FeatureMapKind.SAFE_EXP:
        return 1.0 / (math.e * math.sqrt(d * E_SQ_MINUS_1))
    return 1.0 / math.sqrt(feature_dim(kind, d))
