"""Gated linear attention with refined forget gates, verified three ways:
recurrent, single-shot parallel, and chunk-parallel forms that agree to
float roundoff, plus variance/stability labs, a desk-scale LM harness,
and a decode-time benchmark.  `regla --help` lists the command surface.
"""

from .features import (
    FeatureMapKind,
    KeyMaxMode,
    StreamingMaxState,
    apply_feature_map,
    feature_dim,
    safe_exp_key,
    safe_exp_query,
    scaling_factor,
)
from .kernels import (
    GateKind,
    GateParams,
    NumericalDegeneracyError,
    RecurrentState,
    UnsupportedModeError,
    gated_linear_chunked,
    gated_linear_recurrent,
    init_recurrent_state,
    linear_attention_parallel,
    refined_forget,
    regla_chunked,
    softmax_attention,
    stable_norm,
)
from .block import (
    AttentionBlock,
    AttentionConfig,
    BlockParams,
    Mode,
    ScalingKind,
    block_forward,
    block_init_state,
    block_step,
)
from .grads import GradReport, gradcheck_block, refined_gate_grad, vanilla_gate_grad
from .variance import (
    layer_activation_std,
    shifted_theoretical_std,
    simulate_inner_product_std,
    theoretical_std,
    variance_sweep,
)
from .gates import (
    apply_extreme_gate_bias,
    collect_gate_histograms,
    gradient_curves,
    histogram_entropy,
)
from .bench import decode_benchmark, kv_cache_bytes, linear_state_bytes, throughput_fit
from .lm import (
    ModelConfig,
    TrainConfig,
    TransformerLM,
    build_model,
    evaluate_ppl,
    greedy_decode,
    load_checkpoint,
    make_task,
    run_ablation,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionBlock",
    "AttentionConfig",
    "BlockParams",
    "FeatureMapKind",
    "GateKind",
    "GateParams",
    "GradReport",
    "KeyMaxMode",
    "Mode",
    "ModelConfig",
    "NumericalDegeneracyError",
    "RecurrentState",
    "ScalingKind",
    "StreamingMaxState",
    "TrainConfig",
    "TransformerLM",
    "UnsupportedModeError",
    "apply_extreme_gate_bias",
    "apply_feature_map",
    "block_forward",
    "block_init_state",
    "block_step",
    "build_model",
    "collect_gate_histograms",
    "decode_benchmark",
    "evaluate_ppl",
    "feature_dim",
    "gated_linear_chunked",
    "gated_linear_recurrent",
    "gradcheck_block",
    "gradient_curves",
    "greedy_decode",
    "histogram_entropy",
    "init_recurrent_state",
    "kv_cache_bytes",
    "layer_activation_std",
    "linear_attention_parallel",
    "linear_state_bytes",
    "load_checkpoint",
    "make_task",
    "refined_forget",
    "refined_gate_grad",
    "regla_chunked",
    "run_ablation",
    "safe_exp_key",
    "safe_exp_query",
    "save_checkpoint",
    "scaling_factor",
    "shifted_theoretical_std",
    "simulate_inner_product_std",
    "softmax_attention",
    "stable_norm",
    "theoretical_std",
    "throughput_fit",
    "train",
    "vanilla_gate_grad",
    "variance_sweep",
]
