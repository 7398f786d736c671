"""Variable-rate learned image codec with online adaptation of decoder-side tradeoffs."""

from .codec_core import (
    BaseCodec,
    CodecConfig,
    Decoder,
    Encoder,
    LogisticEntropyModel,
    TrainConfig,
    encode_latent,
    estimate_rate_bits,
    pad_to_multiple,
    quantize,
    rd_loss,
    train_base,
)
from .meta_training import MetaCodec, MetaConfig, TaskGrid, init_meta, maml_meta_train
from .modulation import Modulators, TradeoffVector, conditional_decode, modulate, scale_factors
from .online_adaptation import OMLConfig, OMLResult, distortion, grad_lambda, oml_adapt_patch
from .pipeline import EncodeResult, decode_container, encode_image

__version__ = "0.1.0"

__all__ = [
    "BaseCodec",
    "CodecConfig",
    "Decoder",
    "Encoder",
    "EncodeResult",
    "LogisticEntropyModel",
    "MetaCodec",
    "MetaConfig",
    "Modulators",
    "OMLConfig",
    "OMLResult",
    "TaskGrid",
    "TradeoffVector",
    "TrainConfig",
    "conditional_decode",
    "decode_container",
    "distortion",
    "encode_image",
    "encode_latent",
    "estimate_rate_bits",
    "grad_lambda",
    "init_meta",
    "maml_meta_train",
    "modulate",
    "oml_adapt_patch",
    "pad_to_multiple",
    "quantize",
    "rd_loss",
    "scale_factors",
    "train_base",
]
