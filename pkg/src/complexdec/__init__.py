"""Complex-spectral neural audio codec with independent real/imaginary RVQ
codebooks, a fixed-rate bitstream, and a score-based post-filter."""
from .codec import CodecModel, codec_forward
from .config import (CodecConfig, CompandingParams, EncoderConfig, LossWeights, MelConfig, SdeConfig,
                     TrainConfig, UNetConfig, get_preset, tiny_codec_config)
from .estimators import ComplexDecCodec, ScorePostFilter

__all__ = [
    "CodecConfig", "CodecModel", "CompandingParams", "ComplexDecCodec", "EncoderConfig", "LossWeights",
    "MelConfig", "ScorePostFilter", "SdeConfig", "TrainConfig", "UNetConfig", "codec_forward",
    "get_preset", "tiny_codec_config",
]

__version__ = "0.1.0"
