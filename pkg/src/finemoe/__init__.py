"""Desk-scale multimodal fine-grained mixture-of-experts toolkit.

From-scratch pieces, bottom to top: a reverse-mode autodiff tensor core
(:mod:`finemoe.tensor`), attention and normalization layers
(:mod:`finemoe.layers`), fine-grained expert routing with auxiliary
losses (:mod:`finemoe.moe`), the rotary-attention decoder
(:mod:`finemoe.decoder`), a tiered cross-attention visual resampler
(:mod:`finemoe.vision`), similarity clustering and sequence packing
(:mod:`finemoe.data`), synthetic corpora (:mod:`finemoe.corpus`), the
staged trainer with checkpoints (:mod:`finemoe.training`), expert
specialization analysis (:mod:`finemoe.analysis`), retrieval evaluation
and parameter counting (:mod:`finemoe.evaluation`), and a command-line
front end (:mod:`finemoe.cli`).
"""

from .decoder import (
    DecoderConfig,
    MoEDecoder,
    ParameterReport,
    TokenSequence,
    count_parameters,
    desk_preset,
    published_preset,
)
from .evaluation import (
    RetrievalOracle,
    generate_grid,
    generate_niah,
    run_parameter_report,
    score_niah,
)
from .moe import MoEConfig, RoutingRecord, load_balance_loss, route, z_loss
from .tensor import GradTape, NumericalError, ShapeError, Tensor, backward
from .tokenizer import ByteTokenizer
from .training import (
    StageConfig,
    checkpoint_load,
    checkpoint_save,
    default_stages,
    train_stage,
)
from .vision import (
    VisionConfig,
    VisionEncoder,
    desk_vision_preset,
    published_vision_preset,
    visual_token_count,
)

__all__ = [
    "ByteTokenizer",
    "DecoderConfig",
    "GradTape",
    "MoEConfig",
    "MoEDecoder",
    "NumericalError",
    "ParameterReport",
    "RetrievalOracle",
    "RoutingRecord",
    "ShapeError",
    "StageConfig",
    "Tensor",
    "TokenSequence",
    "VisionConfig",
    "VisionEncoder",
    "backward",
    "checkpoint_load",
    "checkpoint_save",
    "count_parameters",
    "default_stages",
    "desk_preset",
    "desk_vision_preset",
    "generate_grid",
    "generate_niah",
    "load_balance_loss",
    "published_preset",
    "published_vision_preset",
    "route",
    "run_parameter_report",
    "score_niah",
    "train_stage",
    "visual_token_count",
    "z_loss",
]

__version__ = "0.1.0"
