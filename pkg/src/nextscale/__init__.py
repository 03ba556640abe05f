"""Desk-scale next-scale autoregressive image modeling kit.

Subpackages cover the float64 autodiff core, the multi-scale residual
quantizing tokenizer, the scale-causal transformer, subject personalization,
analysis tooling, and the synthetic-corpus workbench with its CLI.
"""

from .analysis import (
    CorruptionCurve,
    EvalReport,
    WeightDiffReport,
    corruption_decodes,
    div_metric,
    embed_for_eval,
    evaluate_personalization,
    make_embedder,
    mean_corruption_curve,
    pres_metric,
    scale_corruption_curve,
    subject_fidelity,
    weight_diff_ratio,
)
from .autograd import (
    Tape,
    Tensor,
    backward,
    bilinear_resize,
    gather,
    gelu,
    layer_norm,
    matmul,
    relu,
    softmax,
    tensor_mean,
    tensor_sum,
    zero_grad,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    CorruptCheckpointError,
    NumericError,
    VocabularyError,
)
from .losses import kl_divergence, softmax_cross_entropy
from .model import (
    PretrainConfig,
    PromptVocab,
    SamplerConfig,
    VarConfig,
    VarModel,
    forward_logits,
    guided_logits,
    pretrain,
    sample,
    sample_trace,
)
from .optim import AdamWState, adamw_step, finite_diff_check
from .personalize import (
    FinetuneConfig,
    LoraAdapters,
    SubjectSet,
    TuningMask,
    attach_lora,
    finetune,
    prior_distill_loss,
    select_trainable,
    subject_set_from_corpus,
    weighted_ce_loss,
)
from .ppm import decode_ppm, encode_ppm, read_ppm, write_ppm
from .synthetic import Example, SyntheticDataset, SyntheticSpec, generate_synthetic_dataset
from .tokenizer import (
    AutoencoderConfig,
    AutoencoderWeights,
    Codebook,
    MultiScaleTokens,
    ScaleSchedule,
    TokenizerTrainConfig,
    dequantize,
    detokenize_image,
    quantize_multiscale,
    token_rows,
    tokenize_image,
    train_autoencoder,
)

__all__ = [
    "AdamWState",
    "AutoencoderConfig",
    "AutoencoderWeights",
    "CheckpointError",
    "CheckpointVersionError",
    "Codebook",
    "ConfigError",
    "ContractError",
    "CorruptCheckpointError",
    "CorruptionCurve",
    "EvalReport",
    "Example",
    "FinetuneConfig",
    "LoraAdapters",
    "MultiScaleTokens",
    "NumericError",
    "PretrainConfig",
    "PromptVocab",
    "RunConfig",
    "SamplerConfig",
    "ScaleSchedule",
    "SubjectSet",
    "SyntheticDataset",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "TokenizerTrainConfig",
    "TuningMask",
    "VarConfig",
    "VarModel",
    "VocabularyError",
    "WeightDiffReport",
    "adamw_step",
    "attach_lora",
    "backward",
    "bilinear_resize",
    "corruption_decodes",
    "decode_ppm",
    "dequantize",
    "detokenize_image",
    "div_metric",
    "embed_for_eval",
    "encode_ppm",
    "evaluate_personalization",
    "finetune",
    "finite_diff_check",
    "forward_logits",
    "gather",
    "gelu",
    "generate_synthetic_dataset",
    "guided_logits",
    "kl_divergence",
    "layer_norm",
    "load_checkpoint",
    "load_run_config",
    "make_embedder",
    "matmul",
    "mean_corruption_curve",
    "pres_metric",
    "pretrain",
    "prior_distill_loss",
    "quantize_multiscale",
    "read_ppm",
    "relu",
    "sample",
    "sample_trace",
    "save_checkpoint",
    "scale_corruption_curve",
    "select_trainable",
    "softmax",
    "softmax_cross_entropy",
    "subject_fidelity",
    "subject_set_from_corpus",
    "tensor_mean",
    "tensor_sum",
    "token_rows",
    "tokenize_image",
    "train_autoencoder",
    "weight_diff_ratio",
    "weighted_ce_loss",
    "write_ppm",
    "zero_grad",
]

__version__ = "0.1.0"
