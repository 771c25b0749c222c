"""Linear attention update rules: ungated, scalar-gated, delta rule,
rank-1 matrix gates, and refined d-dimensional gates.

All rules maintain a state matrix S in R^{d x m} (value dim x feature dim)
and differ in how S is decayed before each rank-1 write v_t phi(k_t)^T:

    ungated        S_t = S_{t-1} + v_t phi(k_t)^T
    scalar gate    S_t = g_t S_{t-1} + (1 - g_t) v_t phi(k_t)^T
    delta rule     S_t = S_{t-1} - b_t S_{t-1} phi'(k_t) phi'(k_t)^T
                         + b_t v_t phi'(k_t)^T
    fast decay     S_t = (z_t f_t^T) . S_{t-1} + v_t phi(k_t)^T
    refined gate   S_t = (f_t 1^T) . S_{t-1} + v_t phi(k_t)^T

where phi'(k) = phi(k) / sum(phi(k)) is the sum-normalized write key of
the delta rule (see delta_rule_step for why the raw key is unusable).

where the refined forget vector is built from a raw gate g and a refining
gate r, both sigmoid outputs of the step input x_t:

    f = (1 - r) . g^2 + r . (1 - (1 - g)^2)

g^2 < f < 1 - (1 - g)^2 holds elementwise for r in (0, 1), and f = g at
r = 0.5.  Squaring pushes g away from 1 (stronger forgetting) while the
mirrored branch pushes it toward 1; r interpolates between the two.

Outputs are read out as h_t = S_t phi(q_t), normalized either by a running
feature sum (sum_norm, the c_t accumulator) or by an RMS-style stable norm.

Layout convention: positions run along the last axis.  Sequence tensors are
(..., m, L) for features, (..., d, L) for values and outputs; step tensors
drop the L axis.  Leading axes (batch, heads) broadcast against parameter
shapes documented in GateParams.

Sequence ops come in three forms that agree to float precision: a stepwise
recurrence, a single-pass parallel form, and a chunked form that carries
state between fixed-size blocks using cumulative log gates (all pairwise
decay ratios live in log space, where every exponent is <= 0, so the
chunked path never overflows however saturated the gates are).

Functions are pure except for explicit RecurrentState mutation in the
*_step ops; callers serialize access to a state instance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from .features import StreamingMaxState

SUM_NORM_EPS = 1e-6
STABLE_NORM_EPS = 1e-6
# Floor for the log of the refined-gate product term; only reachable when
# both sigmoids underflow simultaneously in float32.
_LOG_FLOOR = 1e-24


class NumericalDegeneracyError(RuntimeError):
    """Sum-normalization denominator fell below the safe threshold."""


class UnsupportedModeError(ValueError):
    """Requested execution mode is undefined for the gate kind."""


class GateKind(str, Enum):
    NONE = "none"
    SCALAR_RFA = "scalar_rfa"
    DELTA_RULE = "delta_rule"
    FAST_DECAY = "fast_decay"
    REGLA_REFINED = "regla_refined"


@dataclass
class GateParams:
    """Parameters of the configured gate kind; unused fields stay None.

    Shapes for a single head (leading head/batch axes broadcast):
      ScalarRFA     w_g: (d,)
      DeltaRule     w_beta: (d,)
      FastDecay     w_z: (d, d), b_z: (d,), w_f: (m, d), b_f: (m,)
      ReglaRefined  w_g: (d, d), b_g: (d,), w_r: (d, d), b_r: (d,)
    """

    kind: GateKind
    w_g: Optional[Tensor] = None
    b_g: Optional[Tensor] = None
    w_r: Optional[Tensor] = None
    b_r: Optional[Tensor] = None
    w_z: Optional[Tensor] = None
    b_z: Optional[Tensor] = None
    w_f: Optional[Tensor] = None
    b_f: Optional[Tensor] = None
    w_beta: Optional[Tensor] = None

    @staticmethod
    def init(
        kind: GateKind,
        d: int,
        m: Optional[int] = None,
        heads: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float64,
    ) -> "GateParams":
        """Gaussian weights with std 1/sqrt(d); b_g = 1 (moderate retention),
        b_r = 0 (balanced refinement), b_z = b_f = 1."""
        m = d if m is None else m
        lead: Tuple[int, ...] = () if heads is None else (heads,)
        std = 1.0 / math.sqrt(d)

        def w(*shape: int) -> Tensor:
            return torch.randn(*lead, *shape, generator=generator, dtype=dtype) * std

        def b(size: int, value: float) -> Tensor:
            return torch.full(lead + (size,), value, dtype=dtype)

        if kind is GateKind.NONE:
            return GateParams(kind=kind)
        if kind is GateKind.SCALAR_RFA:
            return GateParams(kind=kind, w_g=w(d))
        if kind is GateKind.DELTA_RULE:
            return GateParams(kind=kind, w_beta=w(d))
        if kind is GateKind.FAST_DECAY:
            return GateParams(
                kind=kind, w_z=w(d, d), b_z=b(d, 1.0), w_f=w(m, d), b_f=b(m, 1.0)
            )
        if kind is GateKind.REGLA_REFINED:
            return GateParams(
                kind=kind, w_g=w(d, d), b_g=b(d, 1.0), w_r=w(d, d), b_r=b(d, 0.0)
            )
        raise ValueError(f"unknown gate kind {kind!r}")

    def tensors(self) -> List[Tuple[str, Tensor]]:
        return [
            (name, t)
            for name, t in vars(self).items()
            if isinstance(t, Tensor)
        ]


@dataclass
class RecurrentState:
    """Mutable per-stream decode state.

    s: (..., d, m) state matrix; c: (..., m) feature-sum accumulator, only
    kept under sum normalization; key_max: running key max for streaming
    safe-exp features; t: steps consumed.
    """

    s: Tensor
    c: Optional[Tensor] = None
    key_max: Optional[StreamingMaxState] = None
    t: int = 0


def init_recurrent_state(
    d: int,
    m: int,
    batch_shape: Tuple[int, ...] = (),
    sum_norm: bool = False,
    streaming_key_max: bool = False,
    dtype: torch.dtype = torch.float64,
) -> RecurrentState:
    s = torch.zeros(*batch_shape, d, m, dtype=dtype)
    c = torch.zeros(*batch_shape, m, dtype=dtype) if sum_norm else None
    key_max = StreamingMaxState.fresh(batch_shape, dtype) if streaming_key_max else None
    return RecurrentState(s=s, c=c, key_max=key_max)


def apply_state_rescale(state: RecurrentState, rescale: Tensor) -> None:
    """Re-base accumulated state when the streaming key max increases."""
    state.s = state.s * rescale[..., None, None]
    if state.c is not None:
        state.c = state.c * rescale[..., None]


def stable_norm(
    h: Tensor,
    gain: Optional[Tensor] = None,
    dim: int = -1,
    eps: float = STABLE_NORM_EPS,
) -> Tensor:
    """RMS normalization h / sqrt(mean(h^2) + eps), optionally gained.

    Invariant to positive rescaling of h up to eps effects (exact in the
    limit ||h|| >> eps).  `dim` must be the feature axis: -1 for step
    vectors (..., d), -2 for sequences (..., d, L).
    """
    if dim not in (-1, -2):
        raise ValueError(f"dim must be -1 or -2, got {dim}")
    ms = h.pow(2).mean(dim=dim, keepdim=True)
    out = h / torch.sqrt(ms + eps)
    if gain is not None:
        out = out * (gain if dim == -1 else gain.unsqueeze(-1))
    return out


# ---------------------------------------------------------------------------
# gate activations


def _affine_seq(w: Tensor, b: Optional[Tensor], x: Tensor) -> Tensor:
    """w x + b per column: w (..., o, d), x (..., d, L) -> (..., o, L)."""
    out = torch.einsum("...ij,...jl->...il", w, x)
    if b is not None:
        out = out + b.unsqueeze(-1)
    return out


def _dot_seq(w: Tensor, x: Tensor) -> Tensor:
    """w . x per column: w (..., d), x (..., d, L) -> (..., L)."""
    return torch.einsum("...j,...jl->...l", w, x)


def scalar_gate(params: GateParams, x: Tensor) -> Tensor:
    """sigmoid(w_g . x_t) per position; x (..., d, L) -> (..., L)."""
    return torch.sigmoid(_dot_seq(params.w_g, x))


def write_strength(params: GateParams, x: Tensor) -> Tensor:
    """Delta-rule write strength sigmoid(w_beta . x_t); x (..., d, L) -> (..., L)."""
    return torch.sigmoid(_dot_seq(params.w_beta, x))


def fast_decay_gates(params: GateParams, x: Tensor) -> Tuple[Tensor, Tensor]:
    """Rank-1 gate factors (z, f): value-axis (..., d, L), feature-axis (..., m, L)."""
    z = torch.sigmoid(_affine_seq(params.w_z, params.b_z, x))
    f = torch.sigmoid(_affine_seq(params.w_f, params.b_f, x))
    return z, f


def refined_gates(params: GateParams, x: Tensor) -> Tuple[Tensor, Tensor]:
    """Raw gate g and refining gate r, both (..., d, L)."""
    g = torch.sigmoid(_affine_seq(params.w_g, params.b_g, x))
    r = torch.sigmoid(_affine_seq(params.w_r, params.b_r, x))
    return g, r


def refined_forget(g: Tensor, r: Tensor) -> Tensor:
    """f = (1 - r) g^2 + r (1 - (1 - g)^2), elementwise in (0, 1)."""
    return (1.0 - r) * g.pow(2) + r * (1.0 - (1.0 - g).pow(2))


# ---------------------------------------------------------------------------
# reference attention and ungated linear attention


def softmax_attention(
    q: Tensor, k: Tensor, v: Tensor, causal: bool = True, scale: Optional[float] = None
) -> Tensor:
    """Exact softmax attention; q, k (..., d, L), v (..., d, L) -> (..., d, L)."""
    d = q.shape[-2]
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    scores = torch.einsum("...dt,...ds->...ts", q, k) * scale  # [query t, key s]
    if causal:
        l_q, l_k = scores.shape[-2], scores.shape[-1]
        mask = torch.ones(l_q, l_k, dtype=torch.bool, device=scores.device).tril()
        scores = scores.masked_fill(~mask, -math.inf)
    p = torch.softmax(scores, dim=-1)
    return torch.einsum("...ts,...ds->...dt", p, v)


def _check_denominator(den: Tensor) -> None:
    if (den.abs() < SUM_NORM_EPS).any():
        bad = int((den.abs() < SUM_NORM_EPS).sum())
        raise NumericalDegeneracyError(
            f"sum-norm denominator below {SUM_NORM_EPS:g} at {bad} position(s); "
            "features too close to zero or cancelling"
        )


def linear_attention_parallel(
    phi_q: Tensor,
    phi_k: Tensor,
    v: Tensor,
    sum_norm: bool = True,
    causal: bool = True,
    scale: float = 1.0,
) -> Tensor:
    """Ungated linear attention, full-sequence closed form.

    h_t = (sum_{s<=t} v_s phi_k_s^T) phi_q_t, divided by
    (sum_{s<=t} phi_k_s) . phi_q_t under sum normalization.
    """
    length = phi_q.shape[-1]
    qs = phi_q * scale
    scores = torch.einsum("...ms,...mt->...st", phi_k, qs)  # [key s, query t]
    if causal:
        mask = torch.ones(length, length, dtype=phi_q.dtype, device=phi_q.device).triu()
        scores = scores * mask
    num = torch.einsum("...ds,...st->...dt", v, scores)
    if not sum_norm:
        return num
    den = scores.sum(dim=-2)
    _check_denominator(den)
    return num / den.unsqueeze(-2)


def linear_attention_step(
    state: RecurrentState,
    phi_q_t: Tensor,
    phi_k_t: Tensor,
    v_t: Tensor,
    sum_norm: bool = True,
    scale: float = 1.0,
) -> Tuple[RecurrentState, Tensor]:
    """One ungated update; phi_* (..., m), v_t (..., d) -> h_t (..., d)."""
    state.s = state.s + torch.einsum("...d,...m->...dm", v_t, phi_k_t)
    qs = phi_q_t * scale
    num = torch.einsum("...dm,...m->...d", state.s, qs)
    if sum_norm:
        state.c = state.c + phi_k_t
        den = torch.einsum("...m,...m->...", state.c, qs)
        _check_denominator(den)
        h = num / den.unsqueeze(-1)
    else:
        h = num
    state.t += 1
    return state, h


# ---------------------------------------------------------------------------
# gated steps


def rfa_gate_step(
    state: RecurrentState,
    phi_q_t: Tensor,
    phi_k_t: Tensor,
    v_t: Tensor,
    x_t: Tensor,
    params: GateParams,
    scale: float = 1.0,
) -> Tuple[RecurrentState, Tensor]:
    """Scalar-gate update: S <- g S + (1-g) v phi_k^T, c <- g c + (1-g) phi_k."""
    g = scalar_gate(params, x_t.unsqueeze(-1)).squeeze(-1)  # (...,)
    write = torch.einsum("...d,...m->...dm", v_t, phi_k_t)
    state.s = g[..., None, None] * state.s + (1.0 - g)[..., None, None] * write
    state.c = g[..., None] * state.c + (1.0 - g)[..., None] * phi_k_t
    qs = phi_q_t * scale
    num = torch.einsum("...dm,...m->...d", state.s, qs)
    den = torch.einsum("...m,...m->...", state.c, qs)
    _check_denominator(den)
    state.t += 1
    return state, num / den.unsqueeze(-1)


def delta_rule_step(
    state: RecurrentState,
    phi_q_t: Tensor,
    phi_k_t: Tensor,
    v_t: Tensor,
    x_t: Tensor,
    params: GateParams,
    scale: float = 1.0,
) -> Tuple[RecurrentState, Tensor]:
    """Delta-rule update: replace the stored value for the write key by a
    blend, using the sum-normalized key feature phi' = phi / sum(phi).

    S <- S + b (v - S phi') phi'^T with b = sigmoid(w_beta . x); the
    feature sum c accumulates phi' ungated for the readout normalizer.
    Normalizing the write key keeps ||phi'||^2 <= 1, so the correction is
    non-expansive and the state stays bounded; with raw keys the map
    S -> S (I - b phi phi^T) amplifies by ||phi||^2 per step.
    """
    total = phi_k_t.sum(dim=-1, keepdim=True)
    _check_denominator(total)
    key = phi_k_t / total
    beta = write_strength(params, x_t.unsqueeze(-1)).squeeze(-1)  # (...,)
    pred = torch.einsum("...dm,...m->...d", state.s, key)
    corr = torch.einsum("...d,...m->...dm", v_t - pred, key)
    state.s = state.s + beta[..., None, None] * corr
    state.c = state.c + key
    qs = phi_q_t * scale
    num = torch.einsum("...dm,...m->...d", state.s, qs)
    den = torch.einsum("...m,...m->...", state.c, qs)
    _check_denominator(den)
    state.t += 1
    return state, num / den.unsqueeze(-1)


def fast_decay_step(
    state: RecurrentState,
    phi_q_t: Tensor,
    phi_k_t: Tensor,
    v_t: Tensor,
    x_t: Tensor,
    params: GateParams,
    scale: float = 1.0,
    gain: Optional[Tensor] = None,
) -> Tuple[RecurrentState, Tensor]:
    """Rank-1 matrix gate: S <- (z f^T) . S + v phi_k^T, stable-norm readout."""
    z, f = fast_decay_gates(params, x_t.unsqueeze(-1))
    z, f = z.squeeze(-1), f.squeeze(-1)  # (..., d), (..., m)
    gate = torch.einsum("...d,...m->...dm", z, f)
    state.s = gate * state.s + torch.einsum("...d,...m->...dm", v_t, phi_k_t)
    h = torch.einsum("...dm,...m->...d", state.s, phi_q_t * scale)
    state.t += 1
    return state, stable_norm(h, gain=gain, dim=-1)


def regla_step(
    state: RecurrentState,
    phi_q_t: Tensor,
    phi_k_t: Tensor,
    v_t: Tensor,
    x_t: Tensor,
    params: GateParams,
    scale: float = 1.0,
    gain: Optional[Tensor] = None,
) -> Tuple[RecurrentState, Tensor]:
    """Refined-gate update: S <- (f 1^T) . S + v phi_k^T, stable-norm readout.

    The forget vector f lives on the value axis and broadcasts across
    features, so each output dimension carries its own decay rate.
    """
    g, r = refined_gates(params, x_t.unsqueeze(-1))
    f = refined_forget(g, r).squeeze(-1)  # (..., d)
    state.s = f.unsqueeze(-1) * state.s + torch.einsum(
        "...d,...m->...dm", v_t, phi_k_t
    )
    h = torch.einsum("...dm,...m->...d", state.s, phi_q_t * scale)
    state.t += 1
    return state, stable_norm(h, gain=gain, dim=-1)


# ---------------------------------------------------------------------------
# sequence forms (recurrent driver, parallel, chunked)


def gated_linear_recurrent(
    kind: GateKind,
    phi_q: Tensor,
    phi_k: Tensor,
    v: Tensor,
    x: Optional[Tensor] = None,
    params: Optional[GateParams] = None,
    sum_norm: bool = False,
    stable: bool = False,
    gain: Optional[Tensor] = None,
    scale: float = 1.0,
) -> Tensor:
    """Stepwise reference over a full sequence; features already computed."""
    _validate_norms(kind, sum_norm, stable)
    d, m = v.shape[-2], phi_k.shape[-2]
    length = v.shape[-1]
    batch_shape = tuple(v.shape[:-2])
    needs_c = sum_norm or kind is GateKind.DELTA_RULE
    state = init_recurrent_state(
        d, m, batch_shape, sum_norm=needs_c, dtype=v.dtype
    )
    outs = []
    for t in range(length):
        args = (state, phi_q[..., t], phi_k[..., t], v[..., t])
        if kind is GateKind.NONE:
            state, h = linear_attention_step(*args, sum_norm=sum_norm, scale=scale)
            if stable:
                h = stable_norm(h, gain=gain, dim=-1)
        elif kind is GateKind.SCALAR_RFA:
            state, h = rfa_gate_step(*args, x[..., t], params, scale=scale)
        elif kind is GateKind.DELTA_RULE:
            state, h = delta_rule_step(*args, x[..., t], params, scale=scale)
        elif kind is GateKind.FAST_DECAY:
            state, h = fast_decay_step(*args, x[..., t], params, scale=scale, gain=gain)
        elif kind is GateKind.REGLA_REFINED:
            state, h = regla_step(*args, x[..., t], params, scale=scale, gain=gain)
        else:
            raise ValueError(f"unknown gate kind {kind!r}")
        outs.append(h)
    return torch.stack(outs, dim=-1)


def _validate_norms(kind: GateKind, sum_norm: bool, stable: bool) -> None:
    if sum_norm and stable:
        raise ValueError("sum_norm and stable norm are mutually exclusive")
    if kind in (GateKind.FAST_DECAY, GateKind.REGLA_REFINED) and sum_norm:
        raise ValueError(
            f"{kind.value} defines no gated feature-sum recurrence; use stable norm"
        )
    if kind is GateKind.REGLA_REFINED and not stable:
        raise ValueError("refined gating requires the stable norm readout")
    if kind in (GateKind.SCALAR_RFA, GateKind.DELTA_RULE) and not sum_norm:
        raise ValueError(f"{kind.value} output is defined with sum normalization")


def _log_gate_factors(
    kind: GateKind, x: Tensor, params: GateParams
) -> Tuple[Optional[Tensor], Optional[Tensor], Optional[Tensor]]:
    """Per-step log decays and write scales for the chunked form.

    Returns (log_a, log_b, u): value-axis log gate (..., d, L) or scalar
    (..., 1, L), feature-axis log gate (..., m, L), write scale (..., L).
    None marks a factor that is identically 1.
    """
    if kind is GateKind.NONE:
        return None, None, None
    if kind is GateKind.SCALAR_RFA:
        pre = _dot_seq(params.w_g, x)  # (..., L)
        log_a = F.logsigmoid(pre).unsqueeze(-2)  # scalar decay on the value axis
        u = torch.sigmoid(-pre)  # 1 - g, computed without cancellation
        return log_a, None, u
    if kind is GateKind.FAST_DECAY:
        log_a = F.logsigmoid(_affine_seq(params.w_z, params.b_z, x))
        log_b = F.logsigmoid(_affine_seq(params.w_f, params.b_f, x))
        return log_a, log_b, None
    if kind is GateKind.REGLA_REFINED:
        pre_g = _affine_seq(params.w_g, params.b_g, x)
        r = torch.sigmoid(_affine_seq(params.w_r, params.b_r, x))
        g = torch.sigmoid(pre_g)
        # f = g (g + 2 r (1 - g)); the second factor only underflows when
        # g and r underflow together, hence the floor.
        inner = torch.clamp(g + 2.0 * r * (1.0 - g), min=_LOG_FLOOR)
        log_a = F.logsigmoid(pre_g) + torch.log(inner)
        return log_a, None, None
    raise UnsupportedModeError(
        f"{kind.value} has no chunked or parallel form; run it recurrently"
    )


def _pairwise_decay(log_cum: Tensor, tri: Tensor) -> Tensor:
    """exp(L[.., t] - L[.., s]) for s <= t, 0 elsewhere; exponents <= 0."""
    diff = log_cum.unsqueeze(-2) - log_cum.unsqueeze(-1)  # (..., s, t)
    return torch.exp(diff.masked_fill(~tri, -math.inf))


def gated_linear_chunked(
    kind: GateKind,
    phi_q: Tensor,
    phi_k: Tensor,
    v: Tensor,
    x: Optional[Tensor] = None,
    params: Optional[GateParams] = None,
    chunk_size: int = 16,
    sum_norm: bool = False,
    stable: bool = False,
    gain: Optional[Tensor] = None,
    scale: float = 1.0,
    initial: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """Chunk-parallel causal form of every gate kind except the delta rule.

    Processes the sequence in blocks of `chunk_size`: contributions from
    earlier chunks enter through the carried state, contributions within a
    chunk through pairwise decay ratios formed in log space.  chunk_size = L
    is the single-chunk parallel form.  Returns (outputs, final state
    matrix); under sum normalization the feature-sum row rides along as an
    extra state row so numerator and denominator see identical arithmetic.
    """
    _validate_norms(kind, sum_norm, stable)
    if kind is GateKind.DELTA_RULE:
        raise UnsupportedModeError(
            "delta rule is recurrent-only: the rank-1 correction term "
            "depends on the running state and does not chunk-factorize"
        )
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    length = v.shape[-1]
    d, m = v.shape[-2], phi_k.shape[-2]

    if kind is GateKind.NONE:
        log_a = log_b = u = None
    else:
        log_a, log_b, u = _log_gate_factors(kind, x, params)

    if sum_norm:
        # Ride the feature-sum accumulator as state row d: its recurrence
        # matches S row-wise for the kinds that allow sum normalization.
        ones = torch.ones_like(v[..., :1, :])
        v = torch.cat([v, ones], dim=-2)
        d_out = d + 1
    else:
        d_out = d

    s = torch.zeros(*v.shape[:-2], d_out, m, dtype=v.dtype, device=v.device)
    if initial is not None:
        if initial.shape[-2] != d_out:
            raise ValueError(
                f"initial state has {initial.shape[-2]} rows, expected {d_out}"
            )
        s = s + initial

    outs = []
    for start in range(0, length, chunk_size):
        end = min(start + chunk_size, length)
        sl = slice(start, end)
        c = end - start
        qc = phi_q[..., sl] * scale
        kc = phi_k[..., sl]
        vc = v[..., sl]
        tri = torch.ones(c, c, dtype=torch.bool, device=v.device).triu()  # s <= t

        la = log_a[..., sl].cumsum(dim=-1) if log_a is not None else None
        lb = log_b[..., sl].cumsum(dim=-1) if log_b is not None else None
        uc = u[..., sl] if u is not None else None

        # inter-chunk: carried state decayed to each position t
        q_eff = qc * torch.exp(lb) if lb is not None else qc
        o_inter = torch.einsum("...dm,...mt->...dt", s, q_eff)
        if la is not None:
            o_inter = torch.exp(la) * o_inter

        # intra-chunk: pairwise decays between write s and read t
        if lb is not None:
            u_feat = torch.einsum(
                "...ms,...mst,...mt->...st", kc, _pairwise_decay(lb, tri), qc
            )
        else:
            u_feat = torch.einsum("...ms,...mt->...st", kc, qc)
            u_feat = u_feat * tri.to(v.dtype)
        if uc is not None:
            u_feat = u_feat * uc.unsqueeze(-1)  # write scale on the s axis
        if la is not None and la.shape[-2] > 1:
            o_intra = torch.einsum(
                "...dst,...st,...ds->...dt", _pairwise_decay(la, tri), u_feat, vc
            )
        elif la is not None:
            w = _pairwise_decay(la.squeeze(-2), tri)
            o_intra = torch.einsum("...ds,...st->...dt", vc, u_feat * w)
        else:
            o_intra = torch.einsum("...ds,...st->...dt", vc, u_feat)
        outs.append(o_inter + o_intra)

        # carry state to the chunk end
        v_eff = vc * uc.unsqueeze(-2) if uc is not None else vc
        if la is not None:
            v_eff = v_eff * torch.exp(la[..., -1:] - la)
        k_eff = kc * torch.exp(lb[..., -1:] - lb) if lb is not None else kc
        s_new = torch.einsum("...ds,...ms->...dm", v_eff, k_eff)
        if la is not None:
            s = s * torch.exp(la[..., -1]).unsqueeze(-1)
        if lb is not None:
            s = s * torch.exp(lb[..., -1]).unsqueeze(-2)
        s = s + s_new

    out = torch.cat(outs, dim=-1)
    if sum_norm:
        num, den = out[..., :d, :], out[..., d, :]
        _check_denominator(den)
        return num / den.unsqueeze(-2), s
    if stable:
        return stable_norm(out, gain=gain, dim=-2), s
    return out, s


def regla_chunked(
    phi_q: Tensor,
    phi_k: Tensor,
    v: Tensor,
    x: Tensor,
    params: GateParams,
    chunk_size: int = 16,
    gain: Optional[Tensor] = None,
    scale: float = 1.0,
    initial: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """Chunked refined-gate attention; chunk_size = L gives the parallel form."""
    return gated_linear_chunked(
        GateKind.REGLA_REFINED,
        phi_q,
        phi_k,
        v,
        x=x,
        params=params,
        chunk_size=chunk_size,
        stable=True,
        gain=gain,
        scale=scale,
        initial=initial,
    )
