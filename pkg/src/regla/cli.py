"""Command-line entry point for the labs, the harness, and the benchmark.

Every subcommand writes one artifact per invocation: numeric experiment
output as CSV with a header row, structured reports as JSON.  Output goes
to --out when given, stdout otherwise.  With a fixed --seed the bytes are
reproducible run to run; timing lives in clearly named *_ms columns so
consumers can exclude it.

Exit codes: 0 success, 1 a requested check failed (equivalence or
gradient tolerance exceeded, training diverged), 2 usage error.

Precision: --precision picks the floating dtype where a command supports
both.  Oracles and labs default to f64, training and measurement to f32.
The Monte Carlo, curve, and finite-difference commands are defined in
f64 (central differences drown in f32 roundoff) and reject f32; the
benchmark counts 4-byte state elements and rejects f64; ablations train
f32 models internally.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .block import (
    GATE_NORM_DEFAULTS,
    AttentionConfig,
    BlockParams,
    Mode,
    ScalingKind,
    block_forward,
)
from .features import (
    FeatureMapKind,
    apply_feature_map,
    feature_dim,
    safe_exp_key_from_pre,
    safe_exp_query_from_pre,
    scaling_factor,
)
from .gates import (
    apply_extreme_gate_bias,
    collect_gate_histograms,
    gradient_curves,
)
from .grads import gradcheck_block
from .kernels import (
    GateKind,
    GateParams,
    NumericalDegeneracyError,
    gated_linear_recurrent,
)
from .lm.ablate import AblationAxis, run_ablation
from .lm.checkpoint import load_checkpoint, save_checkpoint
from .lm.model import ModelConfig, build_model
from .lm.tasks import make_task
from .lm.train import (
    TrainConfig,
    TrainingDivergenceError,
    evaluate_ppl,
    train,
)
from .bench import KINDS, decode_benchmark
from .variance import variance_sweep

_GATES = {
    "none": GateKind.NONE,
    "scalar_rfa": GateKind.SCALAR_RFA,
    "delta_rule": GateKind.DELTA_RULE,
    "fast_decay": GateKind.FAST_DECAY,
    "regla": GateKind.REGLA_REFINED,
}
_MODES = {
    "parallel": Mode.PARALLEL,
    "recurrent": Mode.RECURRENT,
    "chunked": Mode.CHUNKED,
}
_DTYPES = {"f32": torch.float32, "f64": torch.float64}
# oracles and labs default to f64, training and measurement to f32
_DEFAULT_PRECISION = {
    "variance": "f64",
    "gates": "f64",
    "equiv": "f64",
    "gradcheck": "f64",
    "train": "f32",
    "eval": "f32",
    "ablate": "f32",
    "bench": "f32",
}
# positive feature maps keep sum-norm denominators away from zero on
# random instances; the gated kinds get the safe exponential they pair with
_EQUIV_FEATURES = {
    GateKind.NONE: "elu1",
    GateKind.SCALAR_RFA: "elu1",
    GateKind.DELTA_RULE: "elu1",
    GateKind.FAST_DECAY: "exp",
    GateKind.REGLA_REFINED: "exp",
}


class UsageError(ValueError):
    """Bad flag combination or value; maps to exit code 2."""


@dataclass
class RunSpec:
    """Global run parameters shared by every subcommand."""

    seed: int
    out: Optional[str]
    precision: str
    config_path: Optional[str]


# ---------------------------------------------------------------------------
# output helpers


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _emit(out: Optional[str], text: str) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _emit_csv(out: Optional[str], header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_cell(v) for v in row) for row in rows)
    _emit(out, "\n".join(lines) + "\n")


def _emit_json(out: Optional[str], report: dict) -> None:
    _emit(out, json.dumps(report, indent=2, sort_keys=True) + "\n")


def _int_list(text: str, flag: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}")


def _float_list(text: str, flag: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated numbers, got {text!r}")


def _require_precision(spec: RunSpec, needed: str, why: str) -> None:
    if spec.precision != needed:
        raise UsageError(f"this command computes in {needed} ({why})")


# ---------------------------------------------------------------------------
# shared config plumbing


def _model_config(spec: RunSpec, args: argparse.Namespace) -> ModelConfig:
    if spec.config_path is not None:
        with open(spec.config_path) as fh:
            config = ModelConfig.from_dict(json.load(fh))
    else:
        config = ModelConfig()
    overrides: dict = {}
    for flag, field in (
        ("layers", "n_layers"),
        ("heads", "n_heads"),
        ("head_dim", "head_dim"),
        ("mlp_dim", "mlp_dim"),
        ("vocab", "vocab"),
        ("chunk_size", "chunk_size"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "feature", None) is not None:
        overrides["feature"] = FeatureMapKind(args.feature)
    if getattr(args, "gate", None) is not None:
        gate = _GATES[args.gate]
        overrides["gate"] = gate
        overrides.update(GATE_NORM_DEFAULTS[gate])
    if getattr(args, "scaling", None) is not None:
        overrides["scaling"] = ScalingKind(args.scaling)
    if getattr(args, "hybrid", None) is not None:
        overrides["hybrid_pattern"] = args.hybrid.split(",")
    return replace(config, **overrides)


def _task(args: argparse.Namespace):
    kwargs: dict = {}
    if args.task == "assoc_recall":
        for flag, key in (("pairs", "n_pairs"), ("keys", "n_keys"), ("values", "n_values")):
            value = getattr(args, flag, None)
            if value is not None:
                kwargs[key] = value
    elif args.task == "copy":
        for flag, key in (("seg_len", "seg_len"), ("symbols", "n_symbols")):
            value = getattr(args, flag, None)
            if value is not None:
                kwargs[key] = value
    elif args.task == "char":
        if getattr(args, "seq_len", None) is not None:
            kwargs["seq_len"] = args.seq_len
    return make_task(args.task, char_path=getattr(args, "char_path", None), **kwargs)


def _train_config(spec: RunSpec, args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        steps=args.steps,
        batch_size=args.batch,
        lr=args.lr,
        weight_decay=args.weight_decay,
        warmup=args.warmup,
        grad_clip=args.grad_clip,
        dropout=args.dropout,
        seed=spec.seed,
        eval_every=args.eval_every,
        eval_batches=args.eval_batches,
        stop_at_accuracy=args.stop_at_accuracy,
    )


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument("--layers", type=int, help="number of layers")
    group.add_argument("--heads", type=int, help="attention heads per layer")
    group.add_argument("--head-dim", dest="head_dim", type=int, help="per-head dim")
    group.add_argument("--mlp-dim", dest="mlp_dim", type=int, help="MLP hidden dim")
    group.add_argument("--vocab", type=int, help="vocabulary size")
    group.add_argument("--gate", choices=sorted(_GATES), help="update rule")
    group.add_argument(
        "--feature", choices=[k.value for k in FeatureMapKind], help="feature map"
    )
    group.add_argument(
        "--scaling", choices=[k.value for k in ScalingKind], help="query scaling"
    )
    group.add_argument("--chunk-size", dest="chunk_size", type=int, help="chunk length")
    group.add_argument("--hybrid", help="comma list of layer kinds (softmax|linear)")


def _add_task_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("task")
    group.add_argument(
        "--task",
        choices=("assoc_recall", "copy", "char"),
        default="assoc_recall",
        help="training/eval task",
    )
    group.add_argument("--pairs", type=int, help="assoc_recall: key/value pairs")
    group.add_argument("--keys", type=int, help="assoc_recall: key alphabet size")
    group.add_argument("--values", type=int, help="assoc_recall: value alphabet size")
    group.add_argument("--seg-len", dest="seg_len", type=int, help="copy: segment length")
    group.add_argument("--symbols", type=int, help="copy: symbol alphabet size")
    group.add_argument("--char-path", dest="char_path", help="char: corpus file")
    group.add_argument("--seq-len", dest="seq_len", type=int, help="char: window length")


def _add_train_flags(parser: argparse.ArgumentParser, steps: int) -> None:
    group = parser.add_argument_group("training")
    group.add_argument("--steps", type=int, default=steps, help="optimizer steps")
    group.add_argument("--batch", type=int, default=8, help="batch size")
    group.add_argument("--lr", type=float, default=2e-4, help="peak learning rate")
    group.add_argument(
        "--weight-decay", dest="weight_decay", type=float, default=0.01
    )
    group.add_argument("--warmup", type=int, default=100, help="linear warmup steps (0 disables)")
    group.add_argument(
        "--grad-clip", dest="grad_clip", type=float, default=1.0, help="0 disables"
    )
    group.add_argument("--dropout", type=float, default=0.0)
    group.add_argument("--eval-every", dest="eval_every", type=int, default=50)
    group.add_argument("--eval-batches", dest="eval_batches", type=int, default=4)
    group.add_argument(
        "--stop-at-accuracy",
        dest="stop_at_accuracy",
        type=float,
        default=None,
        help="early-stop once eval accuracy reaches this",
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_variance(spec: RunSpec, args: argparse.Namespace) -> int:
    _require_precision(spec, "f64", "Monte Carlo sums need f64 accumulation")
    dims = _int_list(args.d, "--d")
    features = [part for part in args.feature.split(",") if part]
    rows = []
    for feature in features:
        rows.extend(
            variance_sweep(dims, feature, n_samples=args.n, seed=spec.seed, shifted=args.shifted)
        )
    _emit_csv(
        spec.out,
        ("d", "feature", "n", "empirical_std", "theoretical_std", "ratio"),
        [(r.d, r.feature, r.n, r.empirical_std, r.theoretical_std, r.ratio) for r in rows],
    )
    return 0


def cmd_gates(spec: RunSpec, args: argparse.Namespace) -> int:
    if args.curves:
        _require_precision(spec, "f64", "closed-form curves are computed in f64")
        g_grid = _float_list(args.g_grid, "--g-grid")
        r_grid = _float_list(args.r_grid, "--r-grid")
        rows = gradient_curves(g_grid, r_grid)
        _emit_csv(
            spec.out,
            ("g", "r", "grad_refined", "grad_vanilla"),
            [(r.g, r.r, r.grad_refined, r.grad_vanilla) for r in rows],
        )
        return 0

    # --hist: saturate the forget gate, snapshot, train, snapshot again
    config = _model_config(spec, args)
    task = _task(args)
    model = build_model(config, seed=spec.seed)
    if spec.precision == "f64":
        model.double()
    apply_extreme_gate_bias(model, args.bias)
    snapshots = []
    for phase in ("pre", "post"):
        hists = collect_gate_histograms(
            model, task, batch_size=args.batch, seed=spec.seed, n_bins=args.bins
        )
        snapshots.append((phase, hists))
        if phase == "pre":
            result = train(
                config, task, _train_config(spec, args), mode=_MODES[args.mode], model=model
            )
            model = result.model
    rows = []
    for phase, hists in snapshots:
        for hist in hists:
            for i in range(len(hist.counts)):
                rows.append(
                    (hist.layer, hist.edges[i], hist.edges[i + 1], hist.counts[i], phase)
                )
    _emit_csv(spec.out, ("layer", "bin_lo", "bin_hi", "count", "phase"), rows)
    return 0


def _delta_rule_reference(
    phi_q: torch.Tensor,
    phi_k: torch.Tensor,
    v: torch.Tensor,
    x: torch.Tensor,
    params: GateParams,
    scale: float,
) -> torch.Tensor:
    """Literal delta-rule loop, written from the update equations with
    plain matrix/vector products as an independent oracle."""
    d, m, length = v.shape[-2], phi_k.shape[-2], v.shape[-1]
    s = torch.zeros(d, m, dtype=v.dtype)
    c = torch.zeros(m, dtype=v.dtype)
    outs = []
    for t in range(length):
        key = phi_k[:, t] / phi_k[:, t].sum()
        beta = torch.sigmoid(params.w_beta @ x[:, t])
        pred = s @ key
        s = s + beta * torch.outer(v[:, t] - pred, key)
        c = c + key
        q_t = phi_q[:, t] * scale
        outs.append((s @ q_t) / torch.dot(c, q_t))
    return torch.stack(outs, dim=-1)


def cmd_equiv(spec: RunSpec, args: argparse.Namespace) -> int:
    dtype = _DTYPES[spec.precision]
    gate = _GATES[args.gate]
    feature = FeatureMapKind(args.feature or _EQUIV_FEATURES[gate])
    tol = args.tol if args.tol is not None else (1e-12 if gate is GateKind.DELTA_RULE else 1e-8)
    report: dict = {
        "gate": args.gate,
        "feature": feature.value,
        "len": args.len,
        "instances": args.instances,
        "precision": spec.precision,
        "tol": tol,
    }

    if gate is GateKind.DELTA_RULE:
        # recurrent-only rule: check the kernel against a literal loop
        d = args.d
        m = feature_dim(feature, d)
        scale = scaling_factor(feature, d)
        max_diff = 0.0
        for i in range(args.instances):
            gen = torch.Generator().manual_seed(spec.seed * 1_000_003 + i)
            x = torch.randn(d, args.len, generator=gen, dtype=dtype)
            v = torch.randn(d, args.len, generator=gen, dtype=dtype)
            pre_q = torch.randn(d, args.len, generator=gen, dtype=dtype)
            pre_k = torch.randn(d, args.len, generator=gen, dtype=dtype)
            if feature is FeatureMapKind.SAFE_EXP:
                phi_q = safe_exp_query_from_pre(pre_q)
                phi_k = safe_exp_key_from_pre(pre_k)
            else:
                phi_q = apply_feature_map(feature, pre_q)
                phi_k = apply_feature_map(feature, pre_k)
            params = GateParams.init(gate, d, m, generator=gen, dtype=dtype)
            got = gated_linear_recurrent(
                gate, phi_q, phi_k, v, x=x, params=params, sum_norm=True, scale=scale
            )
            want = _delta_rule_reference(phi_q, phi_k, v, x, params, scale)
            max_diff = max(max_diff, float((got - want).abs().max()))
        report.update(
            {
                "head_dim": d,
                "oracle": "literal_loop",
                "max_abs_diff": max_diff,
                "passed": max_diff <= tol,
            }
        )
        _emit_json(spec.out, report)
        return 0 if report["passed"] else 1

    chunks = _int_list(args.chunk, "--chunk")
    config = AttentionConfig(
        d=args.d, n_heads=args.heads, feature=feature, gate=gate, **GATE_NORM_DEFAULTS[gate]
    )
    diffs: Dict[str, float] = {"parallel_vs_recurrent": 0.0}
    for size in chunks:
        diffs[f"chunked_{size}_vs_recurrent"] = 0.0
    for i in range(args.instances):
        gen = torch.Generator().manual_seed(spec.seed * 1_000_003 + i)
        params = BlockParams.init(config, generator=gen, dtype=dtype)
        x = torch.randn(args.batch, config.model_dim, args.len, generator=gen, dtype=dtype)
        ref = block_forward(config, params, x, mode=Mode.RECURRENT)
        par = block_forward(config, params, x, mode=Mode.PARALLEL)
        diffs["parallel_vs_recurrent"] = max(
            diffs["parallel_vs_recurrent"], float((par - ref).abs().max())
        )
        for size in chunks:
            out = block_forward(config, params, x, mode=Mode.CHUNKED, chunk_size=size)
            key = f"chunked_{size}_vs_recurrent"
            diffs[key] = max(diffs[key], float((out - ref).abs().max()))
    max_diff = max(diffs.values())
    report.update(
        {
            "head_dim": args.d,
            "n_heads": args.heads,
            "batch": args.batch,
            "chunks": chunks,
            "max_diffs": diffs,
            "max_abs_diff": max_diff,
            "passed": max_diff <= tol,
        }
    )
    _emit_json(spec.out, report)
    return 0 if report["passed"] else 1


def cmd_gradcheck(spec: RunSpec, args: argparse.Namespace) -> int:
    _require_precision(spec, "f64", "central differences drown in f32 roundoff")
    kinds = list(_GATES) if args.gate == "all" else [args.gate]
    feature = FeatureMapKind(args.feature)
    per_gate: dict = {}
    all_passed = True
    for name in kinds:
        gate = _GATES[name]
        config = AttentionConfig(
            d=args.d, n_heads=args.heads, feature=feature, gate=gate, **GATE_NORM_DEFAULTS[gate]
        )
        mode = Mode.RECURRENT if gate is GateKind.DELTA_RULE else _MODES[args.mode]
        worst = None
        for offset in range(args.seeds):
            rep = gradcheck_block(
                config,
                length=args.len,
                seed=spec.seed + offset,
                mode=mode,
                epsilon=args.eps,
            )
            if worst is None or rep.max_rel_err > worst.max_rel_err:
                worst = rep
        passed = worst.passed(args.tol)
        all_passed = all_passed and passed
        per_gate[name] = {
            "max_rel_err": worst.max_rel_err,
            "worst_param": worst.worst_param,
            "mode": mode.value,
            "passed": passed,
        }
    _emit_json(
        spec.out,
        {
            "epsilon": args.eps,
            "tol": args.tol,
            "seeds": args.seeds,
            "head_dim": args.d,
            "n_heads": args.heads,
            "len": args.len,
            "feature": feature.value,
            "gates": per_gate,
            "passed": all_passed,
        },
    )
    return 0 if all_passed else 1


def cmd_train(spec: RunSpec, args: argparse.Namespace) -> int:
    config = _model_config(spec, args)
    task = _task(args)
    prebuilt = None
    if spec.precision == "f64":
        if args.resume is not None:
            raise UsageError("resume restores the checkpoint's own precision")
        prebuilt = build_model(config, seed=spec.seed).double()
    result = train(
        config,
        task,
        _train_config(spec, args),
        mode=_MODES[args.mode],
        model=prebuilt,
        resume_from=args.resume,
        checkpoint_at=args.checkpoint_at,
        checkpoint_path=args.checkpoint_path,
    )
    if args.save is not None:
        save_checkpoint(
            args.save,
            result.model,
            optimizer=result.optimizer,
            step=result.final_step,
            data_rng_state=result.data_rng.bit_generator.state,
        )
    _emit_csv(
        spec.out,
        ("step", "loss", "accuracy", "ppl"),
        [(r.step, r.loss, r.accuracy, r.ppl) for r in result.metrics],
    )
    return 0


def cmd_eval(spec: RunSpec, args: argparse.Namespace) -> int:
    snap = load_checkpoint(args.ckpt)
    model = snap["model"]
    if spec.precision == "f64":
        model.double()
    task = _task(args)
    ppl = evaluate_ppl(
        model,
        task,
        n_batches=args.batches,
        batch_size=args.batch,
        mode=_MODES[args.mode],
        seed=spec.seed,
    )
    _emit_json(
        spec.out,
        {
            "checkpoint": args.ckpt,
            "step": int(snap["step"]),
            "task": args.task,
            "mode": args.mode,
            "n_batches": args.batches,
            "batch_size": args.batch,
            "ppl": ppl,
        },
    )
    return 0


def cmd_ablate(spec: RunSpec, args: argparse.Namespace) -> int:
    _require_precision(spec, "f32", "ablation sweeps train f32 models")
    axis = AblationAxis(args.axis)
    grid = [part for part in args.grid.split(",") if part]
    seeds = [spec.seed + i for i in range(args.seeds)]
    rows = run_ablation(
        axis, grid, _model_config(spec, args), _task(args), _train_config(spec, args), seeds=seeds
    )
    _emit_csv(
        spec.out,
        ("axis", "value", "seed", "final_loss", "final_accuracy", "pre_norm_std"),
        [
            (r.axis, r.value, r.seed, r.final_loss, r.final_accuracy, r.pre_norm_std)
            for r in rows
        ],
    )
    return 0


def cmd_bench(spec: RunSpec, args: argparse.Namespace) -> int:
    _require_precision(spec, "f32", "state bytes are counted for 4-byte floats")
    kinds = [part for part in args.kinds.split(",") if part]
    for kind in kinds:
        if kind not in KINDS:
            raise UsageError(f"unknown kind {kind!r} (expected one of {sorted(KINDS)})")
    rows = decode_benchmark(
        kinds,
        _int_list(args.gen_lens, "--gen-lens"),
        base_config=_model_config(spec, args),
        prompt_len=args.prompt_len,
        trials=args.trials,
        seed=spec.seed,
    )
    _emit_csv(
        spec.out,
        ("kind", "gen_len", "analytic_state_bytes", "measured_peak_bytes", "median_ms"),
        [
            (r.kind, r.gen_len, r.analytic_state_bytes, r.measured_peak_bytes, r.median_ms)
            for r in rows
        ],
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")
    common.add_argument("--out", help="output file (stdout when omitted)")
    common.add_argument(
        "--precision",
        choices=("f32", "f64"),
        default=None,
        help="float dtype (default: f64 for labs/oracles, f32 for training)",
    )
    common.add_argument("--config", help="model config JSON file")

    parser = argparse.ArgumentParser(
        prog="regla",
        description="Gated linear attention labs, desk-scale LM harness, and decode benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "variance",
        parents=[common],
        help="Monte Carlo std of feature-map inner products vs closed form",
    )
    p.add_argument("--d", default="16,64,256", help="comma list of vector dims")
    p.add_argument("--feature", default="identity,exp", help="comma list: identity,exp")
    p.add_argument("--n", type=int, default=100_000, help="samples per (d, feature)")
    p.add_argument(
        "--shifted", action="store_true", help="subtract sqrt(2 ln d) from exp arguments"
    )
    p.set_defaults(handler=cmd_variance)

    p = sub.add_parser(
        "gates",
        parents=[common],
        help="refined-gate gradient curves or before/after-training activation histograms",
    )
    mode_group = p.add_mutually_exclusive_group(required=True)
    mode_group.add_argument("--curves", action="store_true", help="closed-form gradient grid")
    mode_group.add_argument(
        "--hist", action="store_true", help="train under saturated bias init and histogram gates"
    )
    p.add_argument(
        "--g-grid",
        dest="g_grid",
        default=",".join(repr(v / 100.0) for v in range(5, 100, 5)),
        help="comma list of gate values in (0, 1)",
    )
    p.add_argument(
        "--r-grid",
        dest="r_grid",
        default="0.0,0.25,0.5,0.75,1.0",
        help="comma list of refinement values in [0, 1]",
    )
    p.add_argument("--bias", type=float, default=6.0, help="hist: saturating gate bias")
    p.add_argument("--bins", type=int, default=20, help="hist: histogram bins")
    p.add_argument("--mode", choices=sorted(_MODES), default="chunked")
    _add_model_flags(p)
    _add_task_flags(p)
    _add_train_flags(p, steps=300)
    p.set_defaults(handler=cmd_gates)

    p = sub.add_parser(
        "equiv",
        parents=[common],
        help="cross-mode forward equivalence (recurrent vs parallel vs chunked)",
    )
    p.add_argument("--gate", choices=sorted(_GATES), required=True)
    p.add_argument("--feature", choices=[k.value for k in FeatureMapKind], default=None)
    p.add_argument("--d", type=int, default=8, help="head dim")
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--len", type=int, default=64, help="sequence length")
    p.add_argument("--chunk", default="1,16,64", help="comma list of chunk sizes")
    p.add_argument("--instances", type=int, default=20, help="random instances")
    p.add_argument(
        "--tol", type=float, default=None, help="max abs diff (default 1e-8; delta rule 1e-12)"
    )
    p.set_defaults(handler=cmd_equiv)

    p = sub.add_parser(
        "gradcheck",
        parents=[common],
        help="autodiff backward vs central finite differences per gate kind",
    )
    p.add_argument("--gate", choices=["all"] + sorted(_GATES), default="all")
    p.add_argument("--feature", choices=[k.value for k in FeatureMapKind], default="exp")
    p.add_argument("--d", type=int, default=4, help="head dim")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--len", type=int, default=12, help="sequence length")
    p.add_argument("--mode", choices=sorted(_MODES), default="chunked")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("train", parents=[common], help="train a model; metrics CSV out")
    p.add_argument("--mode", choices=sorted(_MODES), default="chunked")
    p.add_argument("--save", help="write final checkpoint here")
    p.add_argument("--resume", help="resume from this checkpoint")
    p.add_argument(
        "--checkpoint-at", dest="checkpoint_at", type=int, help="mid-run checkpoint step"
    )
    p.add_argument(
        "--checkpoint-path", dest="checkpoint_path", help="mid-run checkpoint file"
    )
    _add_model_flags(p)
    _add_task_flags(p)
    _add_train_flags(p, steps=1000)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="perplexity of a checkpoint; JSON out")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--mode", choices=sorted(_MODES), default="chunked")
    p.add_argument("--batches", type=int, default=8)
    p.add_argument("--batch", type=int, default=8)
    _add_task_flags(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser(
        "ablate", parents=[common], help="one-axis config sweep, one training run per grid point"
    )
    p.add_argument("--axis", choices=[a.value for a in AblationAxis], required=True)
    p.add_argument("--grid", required=True, help="comma list of axis values")
    p.add_argument("--seeds", type=int, default=3, help="seeds per grid value")
    _add_model_flags(p)
    _add_task_flags(p)
    _add_train_flags(p, steps=300)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser(
        "bench", parents=[common], help="decode-time state memory and latency by kind"
    )
    p.add_argument("--kinds", default="softmax,regla", help="comma list of stack kinds")
    p.add_argument(
        "--gen-lens",
        dest="gen_lens",
        default="64,128,256,512,1024,2048",
        help="comma list of generation lengths",
    )
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--prompt-len", dest="prompt_len", type=int, default=5)
    _add_model_flags(p)
    p.set_defaults(handler=cmd_bench)

    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    spec = RunSpec(
        seed=args.seed,
        out=args.out,
        precision=args.precision or _DEFAULT_PRECISION[args.command],
        config_path=args.config,
    )
    try:
        return args.handler(spec, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, indent=2, sort_keys=True), file=sys.stderr)
        return 1
    except NumericalDegeneracyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
