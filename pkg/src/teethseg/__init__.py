"""Gated-transformer segmentation at desk scale: tensor engine, model,
synthetic dental-arch task, metrics, and an ablation CLI.
"""

from .arch import ApkLayer, ApkMask, ARCH_SEQUENCE, MsaBlock, build_apk_mask, contralateral
from .data import LabeledScene, SceneConfig, generate_scene, read_dataset, write_dataset
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    NumericError,
    TeethSegError,
)
from .gating import GatingLayer, cross_gate, self_gate
from .layers import (
    AttentionLayer,
    AttentionMask,
    FusionTransformer,
    LinearLayer,
    PatchEncoder,
    TokenGrid,
    TransformerBlock,
    masked_attention,
)
from .metrics import IoUAccumulator, IoUReport, evaluate_pairs, iou
from .model import (
    Adam,
    ClassTokens,
    ModelConfig,
    ScoreMaps,
    TeethSegModel,
    loss,
    predict,
    train_step,
)
from .tensor import Module, Tape, Tensor, finite_diff_check
from .tsr import read_tsr, write_tsr
from .upscale import bilinear_upsample, linear_upscale, naive_downscale, naive_upscale

__version__ = "0.1.0"
