"""Rotary position tables.

Consecutive dimension pairs (2i, 2i+1) of a head vector rotate by angle
pos * base^(-2i/d).  Tables are (d/2, L) so they broadcast against the
(..., d, L) column layout used throughout; a single decode position gets a
one-column slice.
"""

from __future__ import annotations

from typing import Tuple

import torch
from torch import Tensor


def build_rope_tables(
    head_dim: int,
    length: int,
    base: float = 10000.0,
    dtype: torch.dtype = torch.float32,
    offset: int = 0,
) -> Tuple[Tensor, Tensor]:
    """(cos, sin) tables of shape (head_dim / 2, length) for positions
    offset .. offset + length - 1."""
    if head_dim % 2 != 0:
        raise ValueError(f"rotary embedding needs an even head dim, got {head_dim}")
    inv_freq = base ** (
        -torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim
    )  # (d/2,)
    pos = torch.arange(offset, offset + length, dtype=torch.float64)
    angles = inv_freq.unsqueeze(-1) * pos.unsqueeze(0)  # (d/2, L)
    return angles.cos().to(dtype), angles.sin().to(dtype)
