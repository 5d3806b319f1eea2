"""STFT-domain neural audio codec with residual vector quantization."""

from .audio import AudioFormatError, read_wav, write_wav
from .bitstream import (
    Bitstream,
    BitstreamError,
    BitstreamHeader,
    bitrate,
    decode_file,
    encode_file,
    read_bitstream,
    write_bitstream,
)
from .config import (
    CliConfig,
    ConfigError,
    config_hash,
    default_config,
    dump_config,
    load_config,
)
from .discriminators import DiscriminatorEnsemble
from .generator import CodecModel, GeneratorConfig, GeneratorError
from .losses import LossWeights, MelScale, MultiScaleMelLoss, total_losses
from .metrics import EvalReport, external_metric, lsd, vuv_f1
from .quantizer import (
    CodebookSpec,
    QuantizerError,
    ResidualVectorQuantizer,
    utilization_stats,
)
from .spectral import (
    SpectralError,
    SpectralFeatures,
    StftConfig,
    extract_features,
    istft_synthesize,
    mel_filterbank,
    stft_analyze,
    unwrap_phase_time,
    wrap_phase,
)
from .train import (
    TrainConfig,
    Trainer,
    TrainError,
    load_codec_model,
    run_ablation,
)

__version__ = "0.1.0"

__all__ = [
    "AudioFormatError",
    "Bitstream",
    "BitstreamError",
    "BitstreamHeader",
    "CliConfig",
    "CodebookSpec",
    "CodecModel",
    "ConfigError",
    "DiscriminatorEnsemble",
    "EvalReport",
    "GeneratorConfig",
    "GeneratorError",
    "LossWeights",
    "MelScale",
    "MultiScaleMelLoss",
    "QuantizerError",
    "ResidualVectorQuantizer",
    "SpectralError",
    "SpectralFeatures",
    "StftConfig",
    "TrainConfig",
    "TrainError",
    "Trainer",
    "bitrate",
    "config_hash",
    "decode_file",
    "default_config",
    "dump_config",
    "encode_file",
    "external_metric",
    "extract_features",
    "istft_synthesize",
    "load_codec_model",
    "load_config",
    "lsd",
    "mel_filterbank",
    "read_bitstream",
    "read_wav",
    "run_ablation",
    "stft_analyze",
    "total_losses",
    "unwrap_phase_time",
    "utilization_stats",
    "vuv_f1",
    "wrap_phase",
    "write_bitstream",
    "write_wav",
]
