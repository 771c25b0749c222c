"""Training harness: AdamW with linear warmup, masked cross entropy,
deterministic data streams, and divergence diagnostics.

A fixed seed fully determines the run: model init, data order, dropout
masks, and therefore every logged metric.  Evaluation draws from a
stateless per-step stream so that resuming from a checkpoint replays the
exact metric sequence of an uninterrupted run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from ..block import Mode
from .model import ModelConfig, TransformerLM, build_model
from .tasks import CharCorpusTask, Task

_DATA_STREAM = 17
_EVAL_STREAM = 23


class TrainingDivergenceError(RuntimeError):
    """Loss became non-finite; carries a diagnostics dict."""

    def __init__(self, message: str, diagnostics: dict) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup: int = 100
    grad_clip: float = 1.0
    dropout: float = 0.0
    seed: int = 0
    eval_every: int = 50
    eval_batches: int = 4
    stop_at_accuracy: Optional[float] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("lr must be positive, batch_size >= 1, steps >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class MetricsRow:
    step: int
    loss: float
    accuracy: float
    ppl: float


@dataclass
class TrainResult:
    metrics: List[MetricsRow]
    model: TransformerLM
    optimizer: torch.optim.AdamW
    final_step: int
    data_rng: np.random.Generator


def _make_optimizer(model: TransformerLM, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )


def _evaluate(
    model: TransformerLM, task: Task, cfg: TrainConfig, step: int, mode: Mode
) -> Tuple[float, float, float]:
    """(mean loss, accuracy, ppl) over a stateless eval stream for `step`."""
    rng = np.random.default_rng([cfg.seed, _EVAL_STREAM, step])
    was_training = model.training
    model.eval()
    nll_sum, hit_sum, count = 0.0, 0.0, 0
    with torch.no_grad():
        for _ in range(cfg.eval_batches):
            tokens, mask = task.sample(rng, cfg.batch_size)
            loss, logits = model.loss(tokens, mask, mode=mode)
            n = int(mask.sum())
            nll_sum += float(loss) * n
            hits = logits[..., :-1].argmax(dim=-2) == tokens[:, 1:]
            hit_sum += float((hits & mask).sum())
            count += n
    if was_training:
        model.train()
    mean_nll = nll_sum / max(count, 1)
    return mean_nll, hit_sum / max(count, 1), math.exp(mean_nll)


def _divergence_diagnostics(
    model: TransformerLM,
    tokens: torch.Tensor,
    mode: Mode,
    step: int,
    lr: float,
    recent: List[float],
) -> dict:
    """Dump for a non-finite loss: the offending batch, per-layer activation
    stats from a no-grad replay, and per-parameter magnitudes."""
    activations: dict = {}

    def tap(name: str):
        def hook(_module, _inputs, output) -> None:
            out = output if isinstance(output, torch.Tensor) else output[0]
            finite = torch.isfinite(out)
            activations[name] = {
                "rms": (
                    float(out[finite].pow(2).mean().sqrt()) if finite.any() else None
                ),
                "nonfinite": int((~finite).sum()),
            }

        return hook

    handles = []
    for idx, layer in enumerate(model.layers):
        handles.append(layer.attn.register_forward_hook(tap(f"layer{idx}.attn")))
        handles.append(layer.mlp.register_forward_hook(tap(f"layer{idx}.mlp")))
    try:
        with torch.no_grad():
            model.forward(tokens, mode=mode)
    except Exception:
        pass  # partial stats are still useful
    finally:
        for handle in handles:
            handle.remove()

    parameters = {}
    for name, p in model.named_parameters():
        parameters[name] = {
            "rms": float(p.detach().pow(2).mean().sqrt()),
            "grad_rms": (
                float(p.grad.detach().pow(2).mean().sqrt())
                if p.grad is not None
                else None
            ),
        }
    return {
        "step": step,
        "lr": lr,
        "recent_losses": recent[-10:],
        "batch_tokens": tokens.tolist(),
        "activations": activations,
        "parameters": parameters,
    }


def train(
    model_config: ModelConfig,
    task: Task,
    cfg: TrainConfig,
    mode: Mode = Mode.CHUNKED,
    model: Optional[TransformerLM] = None,
    resume_from: Optional[str] = None,
    checkpoint_at: Optional[int] = None,
    checkpoint_path: Optional[str] = None,
) -> TrainResult:
    """Train a fresh (or resumed) model; returns metrics and the live model.

    Pass `model` to train an already-built (possibly modified) instance
    instead of a fresh one.  Metrics start with a step-0 evaluation row
    (so steps=0 reports just the initial loss, about ln(vocab) for an
    untrained head) and then one row per eval_every steps using the
    training-batch loss of that step.
    """
    from .checkpoint import load_checkpoint, save_checkpoint

    if task.vocab > model_config.vocab:
        raise ValueError(
            f"task needs vocab {task.vocab}, model has {model_config.vocab}"
        )
    if model is not None and resume_from is not None:
        raise ValueError("pass either a prebuilt model or resume_from, not both")

    torch.manual_seed(cfg.seed)
    start_step = 0
    if resume_from is not None:
        snap = load_checkpoint(resume_from)
        model = snap["model"]
        optimizer = _make_optimizer(model, cfg)
        if snap["optimizer_state"] is not None:
            optimizer.load_state_dict(snap["optimizer_state"])
        data_rng = np.random.default_rng()
        data_rng.bit_generator.state = snap["data_rng_state"]
        if snap["torch_rng"] is not None:
            torch.set_rng_state(snap["torch_rng"])
        start_step = snap["step"]
        metrics: List[MetricsRow] = []
    else:
        if model is None:
            model = build_model(model_config, seed=cfg.seed)
        optimizer = _make_optimizer(model, cfg)
        data_rng = np.random.default_rng([cfg.seed, _DATA_STREAM])
        loss0, acc0, ppl0 = _evaluate(model, task, cfg, 0, mode)
        metrics = [MetricsRow(0, loss0, acc0, ppl0)]

    model.dropout_p = cfg.dropout
    model.train()
    recent: List[float] = []
    step = start_step
    for step in range(start_step + 1, cfg.steps + 1):
        warm = min(1.0, step / cfg.warmup) if cfg.warmup > 0 else 1.0
        for group in optimizer.param_groups:
            group["lr"] = cfg.lr * warm
        tokens, mask = task.sample(data_rng, cfg.batch_size)
        loss, _ = model.loss(tokens, mask, mode=mode)
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            raise TrainingDivergenceError(
                f"non-finite loss at step {step}",
                _divergence_diagnostics(model, tokens, mode, step, cfg.lr * warm, recent),
            )
        recent.append(loss_val)
        optimizer.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()

        if checkpoint_at == step and checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path,
                model,
                optimizer=optimizer,
                step=step,
                data_rng_state=data_rng.bit_generator.state,
            )

        if step % cfg.eval_every == 0 or step == cfg.steps:
            _, acc, ppl = _evaluate(model, task, cfg, step, mode)
            metrics.append(MetricsRow(step, loss_val, acc, ppl))
            if cfg.stop_at_accuracy is not None and acc >= cfg.stop_at_accuracy:
                break

    model.eval()
    return TrainResult(
        metrics=metrics,
        model=model,
        optimizer=optimizer,
        final_step=step,
        data_rng=data_rng,
    )


def evaluate_ppl(
    model: TransformerLM,
    task: Task,
    n_batches: int = 8,
    batch_size: int = 8,
    mode: Mode = Mode.CHUNKED,
    seed: int = 0,
) -> float:
    """Perplexity over masked positions; char corpora use non-overlapping
    windows, synthetic tasks a fixed eval stream."""
    model.eval()
    nll_sum, count = 0.0, 0
    with torch.no_grad():
        if isinstance(task, CharCorpusTask):
            windows = task.windows(n_batches * batch_size)
            for i in range(0, windows.shape[0], batch_size):
                tokens = windows[i : i + batch_size]
                mask = torch.ones(
                    tokens.shape[0], tokens.shape[1] - 1, dtype=torch.bool
                )
                loss, _ = model.loss(tokens, mask, mode=mode)
                n = int(mask.sum())
                nll_sum += float(loss) * n
                count += n
        else:
            rng = np.random.default_rng([seed, _EVAL_STREAM])
            for _ in range(n_batches):
                tokens, mask = task.sample(rng, batch_size)
                loss, _ = model.loss(tokens, mask, mode=mode)
                n = int(mask.sum())
                nll_sum += float(loss) * n
                count += n
    return math.exp(nll_sum / max(count, 1))


def greedy_decode(
    model: TransformerLM,
    prompt: torch.Tensor,
    n_new: int,
    return_logits: bool = False,
):
    """Argmax decoding with the O(1) recurrent path.

    prompt (B, P) int64 -> tokens (B, P + n_new); optionally also the list
    of per-step logits for the generated positions.
    """
    if n_new < 0:
        raise ValueError("n_new must be non-negative")
    if prompt.ndim != 2 or prompt.shape[1] < 1:
        raise ValueError("prompt must be (batch, length) with length >= 1")
    model.eval()
    batch = prompt.shape[0]
    state = model.init_decode_state(batch)
    logits = None
    with torch.no_grad():
        for t in range(prompt.shape[1]):
            logits = model.decode_step(prompt[:, t], state)
        out = [prompt]
        step_logits = []
        for _ in range(n_new):
            token = logits.argmax(dim=-1)
            step_logits.append(logits)
            out.append(token.unsqueeze(1))
            logits = model.decode_step(token, state)
    tokens = torch.cat(out, dim=1)
    if return_logits:
        return tokens, step_logits
    return tokens
