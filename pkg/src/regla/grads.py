"""Gradient verification: reverse-mode gradients of the attention rules
checked against an independent finite-difference oracle.

The analytic side is reverse-mode autodiff through the same forward code
the kernels run.  The numeric side is a hand-rolled central difference

    df/dtheta_i ~ (f(theta + eps e_i) - f(theta - eps e_i)) / (2 eps)

evaluated one parameter element at a time in float64, sharing nothing with
the reverse-mode path.  Relative error uses max(|analytic|, |numeric|,
floor) in the denominator so exact zeros on both sides compare clean.

Also here: the closed-form derivative of the refined forget gate with
respect to its pre-activation, used by the gate diagnostics.  With
g = sigmoid(a) and refining gate r held fixed,

    df/da = [2 (1 - r) g + 2 r (1 - g)] . g (1 - g)

against the vanilla sigmoid derivative g (1 - g).  The bracket tends to 2
as g saturates at either end, so refined gating roughly doubles the
gradient exactly where a plain sigmoid gate stalls.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import torch
from torch import Tensor

from .block import AttentionConfig, BlockParams, Mode, block_forward
from .kernels import GateKind, GateParams

DEFAULT_EPSILON = 1e-5
DEFAULT_FLOOR = 1e-8

LossFn = Callable[[Dict[str, Tensor]], Tensor]


def finite_difference_grad(
    loss_fn: LossFn,
    params: Dict[str, Tensor],
    epsilon: float = DEFAULT_EPSILON,
) -> Dict[str, Tensor]:
    """Central-difference gradient of a scalar loss over named tensors.

    Perturbs every element of every tensor twice; cost is 2 * (total
    elements) forward passes, so keep the instances small.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    grads: Dict[str, Tensor] = {}
    for name, base in params.items():
        grad = torch.zeros_like(base)
        flat_grad = grad.view(-1)
        flat_base = base.view(-1)
        for i in range(flat_base.numel()):
            orig = flat_base[i].item()
            flat_base[i] = orig + epsilon
            up = float(loss_fn(params))
            flat_base[i] = orig - epsilon
            down = float(loss_fn(params))
            flat_base[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise ValueError(
                    f"loss is non-finite when perturbing {name}[{i}]"
                )
            flat_grad[i] = (up - down) / (2.0 * epsilon)
        grads[name] = grad
    return grads


def analytic_grad(
    loss_fn: LossFn, params: Dict[str, Tensor]
) -> Tuple[float, Dict[str, Tensor]]:
    """Reverse-mode gradient of the same loss; returns (loss, grads)."""
    tracked = {name: t.detach().clone().requires_grad_(True) for name, t in params.items()}
    loss = loss_fn(tracked)
    if loss.dim() != 0:
        raise ValueError("loss_fn must return a scalar")
    loss.backward()
    grads = {
        name: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t))
        for name, t in tracked.items()
    }
    return float(loss.detach()), grads


@dataclass
class GradReport:
    """Outcome of an analytic-vs-numeric comparison."""

    max_rel_err: float
    worst_param: str
    per_param: Dict[str, float]
    epsilon: float
    floor: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol

    def to_json(self) -> str:
        return json.dumps(
            {
                "max_rel_err": self.max_rel_err,
                "worst_param": self.worst_param,
                "per_param": self.per_param,
                "epsilon": self.epsilon,
                "floor": self.floor,
            },
            indent=2,
            sort_keys=True,
        )


def compare_grads(
    analytic: Dict[str, Tensor],
    numeric: Dict[str, Tensor],
    epsilon: float = DEFAULT_EPSILON,
    floor: float = DEFAULT_FLOOR,
) -> GradReport:
    """Elementwise relative error with a floor guarding near-zero entries."""
    if set(analytic) != set(numeric):
        raise ValueError("analytic and numeric gradients cover different parameters")
    per_param: Dict[str, float] = {}
    worst, worst_name = 0.0, ""
    for name in sorted(analytic):
        a, n = analytic[name], numeric[name]
        denom = torch.maximum(
            torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor)
        )
        err = float(((a - n).abs() / denom).max()) if a.numel() else 0.0
        per_param[name] = err
        if err >= worst:
            worst, worst_name = err, name
    return GradReport(
        max_rel_err=worst,
        worst_param=worst_name,
        per_param=per_param,
        epsilon=epsilon,
        floor=floor,
    )


def refined_gate_grad(g, r):
    """d(refined forget)/d(gate pre-activation) at gate value g, refine r."""
    return (2.0 * (1.0 - r) * g + 2.0 * r * (1.0 - g)) * g * (1.0 - g)


def vanilla_gate_grad(g):
    """d(sigmoid)/d(pre-activation) expressed through the gate value."""
    return g * (1.0 - g)


# ---------------------------------------------------------------------------
# block-level gradient checking


def params_to_dict(params: BlockParams) -> Dict[str, Tensor]:
    out = {
        "proj_q": params.proj_q,
        "proj_k": params.proj_k,
        "proj_v": params.proj_v,
        "proj_o": params.proj_o,
    }
    if params.gain is not None:
        out["gain"] = params.gain
    for name, tensor in params.gate.tensors():
        out[f"gate_{name}"] = tensor
    return out


def dict_to_params(kind: GateKind, flat: Dict[str, Tensor]) -> BlockParams:
    gate_fields = {
        name[len("gate_"):]: t for name, t in flat.items() if name.startswith("gate_")
    }
    return BlockParams(
        proj_q=flat["proj_q"],
        proj_k=flat["proj_k"],
        proj_v=flat["proj_v"],
        proj_o=flat["proj_o"],
        gate=GateParams(kind=kind, **gate_fields),
        gain=flat.get("gain"),
    )


def block_loss_fn(
    config: AttentionConfig, x: Tensor, upstream: Tensor, mode: Mode
) -> LossFn:
    """Scalar probe loss sum(upstream . block_forward(x)); a random upstream
    weighting exercises every output entry's adjoint."""

    def loss(flat: Dict[str, Tensor]) -> Tensor:
        params = dict_to_params(config.gate, flat)
        return (block_forward(config, params, x, mode=mode) * upstream).sum()

    return loss


def input_gradient(
    config: AttentionConfig,
    params: BlockParams,
    x: Tensor,
    upstream: Tensor,
    mode: Mode = Mode.CHUNKED,
) -> Tensor:
    """Gradient of the probe loss with respect to the block input."""
    x = x.detach().clone().requires_grad_(True)
    (block_forward(config, params, x, mode=mode) * upstream).sum().backward()
    return x.grad.detach().clone()


def gradcheck_block(
    config: AttentionConfig,
    length: int = 12,
    seed: int = 0,
    mode: Mode = Mode.CHUNKED,
    epsilon: float = DEFAULT_EPSILON,
    floor: float = DEFAULT_FLOOR,
) -> GradReport:
    """End-to-end check of one block: autodiff vs central differences.

    Builds a float64 block from the seed, probes with unit-variance input
    and upstream, and compares gradients for every parameter tensor.
    """
    generator = torch.Generator().manual_seed(seed)
    params = BlockParams.init(config, generator=generator, dtype=torch.float64)
    x = torch.randn(config.model_dim, length, generator=generator, dtype=torch.float64)
    upstream = torch.randn(
        config.model_dim, length, generator=generator, dtype=torch.float64
    )
    loss_fn = block_loss_fn(config, x, upstream, mode)
    flat = params_to_dict(params)
    _, ana = analytic_grad(loss_fn, flat)
    num = finite_difference_grad(loss_fn, flat, epsilon=epsilon)
    return compare_grads(ana, num, epsilon=epsilon, floor=floor)
