"""Encoder and decoder networks plus the end-to-end codec composition.

The encoder embeds log-magnitude, phase, and phase-gradient streams in
parallel branches, concatenates them, and downsamples 8x in time. The decoder
upsamples the quantized latent back to frame rate and predicts log-magnitude
and (via parallel real/imaginary convolutions) phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .quantizer import CodebookSpec, QuantizeResult, ResidualVectorQuantizer
from .spectral import (
    SpectralFeatures,
    StftConfig,
    extract_features,
    istft_synthesize,
    stft_analyze,
)


class GeneratorError(ValueError):
    """Raised for config violations and shape mismatches in the networks."""


@dataclass(frozen=True)
class GeneratorConfig:
    """Channel widths, block counts, and structural switches.

    The three branch widths must add up to latent_channels. Temporal
    downsampling is 2**downsample_stages (8 by default).
    """

    freq_bins: int = 513
    mag_channels: int = 256
    phase_channels: int = 128
    grad_channels: int = 128
    latent_channels: int = 512
    downsample_stages: int = 3
    convnext_blocks_enc: int = 2
    convnext_blocks_dec: int = 4
    decoder_head_channels: int = 256
    attention: bool = True
    attention_placement: tuple = ("encoder", "decoder")
    use_convnext: bool = True
    use_phase_gradient: bool = True

    def __post_init__(self):
        for name in (
            "freq_bins", "mag_channels", "phase_channels", "grad_channels",
            "latent_channels", "downsample_stages", "convnext_blocks_enc",
            "convnext_blocks_dec", "decoder_head_channels",
        ):
            if getattr(self, name) <= 0:
                raise GeneratorError(f"{name} must be positive")
        total = self.mag_channels + self.phase_channels + self.grad_channels
        if total != self.latent_channels:
            raise GeneratorError(
                f"branch channels {self.mag_channels}+{self.phase_channels}+"
                f"{self.grad_channels} must equal latent_channels {self.latent_channels}"
            )
        for place in self.attention_placement:
            if place not in ("encoder", "decoder"):
                raise GeneratorError(f"unknown attention placement {place!r}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.downsample_stages


@dataclass(frozen=True)
class LatentSequence:
    """Encoder output at 1/downsample_factor of the analysis frame rate."""

    values: torch.Tensor
    frame_rate: float


@dataclass(frozen=True)
class DecoderOutput:
    log_magnitude: torch.Tensor
    real_part: torch.Tensor
    imag_part: torch.Tensor
    phase: torch.Tensor


class GlobalResponseNorm(nn.Module):
    """GRN over the time axis for [batch, time, channels] activations.

    Gain and bias start at zero so a fresh block acts as identity plus
    residual.
    """

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1, 1, channels))
        self.beta = nn.Parameter(torch.zeros(1, 1, channels))
        self.eps = eps

    def forward(self, x):
        gx = torch.norm(x, p=2, dim=1, keepdim=True)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + self.eps)
        return self.gamma * (x * nx) + self.beta + x


class ConvNeXtBlock(nn.Module):
    """Depth-wise conv + LayerNorm + expanded point-wise MLP with GRN."""

    def __init__(self, channels: int, mlp_ratio: int = 3, kernel_size: int = 7):
        super().__init__()
        self.dwconv = nn.Conv1d(
            channels, channels, kernel_size,
            padding=kernel_size // 2, groups=channels,
        )
        self.norm = nn.LayerNorm(channels, eps=1e-6)
        hidden = channels * mlp_ratio
        self.pwconv1 = nn.Linear(channels, hidden)
        self.grn = GlobalResponseNorm(hidden)
        self.pwconv2 = nn.Linear(hidden, channels)

    def forward(self, x):  # [B, C, T]
        skip = x
        x = self.dwconv(x).transpose(1, 2)
        x = self.norm(x)
        x = self.pwconv2(self.grn(F.gelu(self.pwconv1(x))))
        return skip + x.transpose(1, 2)


class ResidualBlock(nn.Module):
    """Two dilated convolutions with leaky-ReLU pre-activations."""

    def __init__(self, channels: int, kernel_size: int = 3, dilations=(1, 3)):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv1d(
                channels, channels, kernel_size,
                dilation=d, padding=d * (kernel_size // 2),
            )
            for d in dilations
        )

    def forward(self, x):
        h = x
        for conv in self.convs:
            h = conv(F.leaky_relu(h, 0.1))
        return x + h


def make_block(channels: int, use_convnext: bool) -> nn.Module:
    return ConvNeXtBlock(channels) if use_convnext else ResidualBlock(channels)


class SelfAttention(nn.Module):
    """Single-head self-attention with pre-norm and residual connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, num_heads=1, batch_first=True)

    def forward(self, x):  # [B, C, T]
        y = x.transpose(1, 2)
        h = self.norm(y)
        h, _ = self.attn(h, h, h, need_weights=False)
        return (y + h).transpose(1, 2)


class Encoder(nn.Module):
    """Three parallel input branches, concatenation, and 8x downsampling."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        widths = (cfg.mag_channels, cfg.phase_channels, cfg.grad_channels)
        self.embeds = nn.ModuleList(
            nn.Conv1d(cfg.freq_bins, w, 7, padding=3) for w in widths
        )
        self.branches = nn.ModuleList(
            nn.Sequential(*(
                make_block(w, cfg.use_convnext) for _ in range(cfg.convnext_blocks_enc)
            ))
            for w in widths
        )
        attend = cfg.attention and "encoder" in cfg.attention_placement
        stages = []
        for _ in range(cfg.downsample_stages):
            stage = [
                ResidualBlock(cfg.latent_channels),
                nn.Conv1d(cfg.latent_channels, cfg.latent_channels, 4, stride=2, padding=1),
            ]
            if attend:
                stage.append(SelfAttention(cfg.latent_channels))
            stages.append(nn.Sequential(*stage))
        self.downsampler = nn.ModuleList(stages)

    def forward(self, log_magnitude, phase, phase_gradient, return_concat: bool = False):
        streams = (log_magnitude, phase, phase_gradient)
        branch_outs = []
        for x, embed, branch in zip(streams, self.embeds, self.branches):
            if x.dim() == 2:
                x = x.unsqueeze(0)
            if x.shape[-2] != self.config.freq_bins:
                raise GeneratorError(
                    f"stream has {x.shape[-2]} bins, config expects {self.config.freq_bins}"
                )
            branch_outs.append(branch(embed(x)))
        concat = torch.cat(branch_outs, dim=1)

        factor = self.config.downsample_factor
        frames = concat.shape[-1]
        target = -(-frames // factor) * factor
        h = F.pad(concat, (0, target - frames), mode="replicate") if target > frames else concat
        for stage in self.downsampler:
            h = stage(h)
        if return_concat:
            return h, concat, branch_outs
        return h


class Decoder(nn.Module):
    """Upsampling trunk with parallel magnitude and phase heads."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        attend = cfg.attention and "decoder" in cfg.attention_placement
        stages = []
        for _ in range(cfg.downsample_stages):
            stage = [
                nn.ConvTranspose1d(cfg.latent_channels, cfg.latent_channels, 4, stride=2, padding=1)
            ]
            if attend:
                stage.append(SelfAttention(cfg.latent_channels))
            stage.append(ResidualBlock(cfg.latent_channels))
            stages.append(nn.Sequential(*stage))
        self.upsampler = nn.ModuleList(stages)

        head = cfg.decoder_head_channels
        self.mag_transition = nn.Conv1d(cfg.latent_channels, head, 7, padding=3)
        self.mag_blocks = nn.Sequential(*(
            make_block(head, cfg.use_convnext) for _ in range(cfg.convnext_blocks_dec)
        ))
        self.mag_proj = nn.Conv1d(head, cfg.freq_bins, 7, padding=3)

        self.phase_transition = nn.Conv1d(cfg.latent_channels, head, 7, padding=3)
        self.phase_blocks = nn.Sequential(*(
            make_block(head, cfg.use_convnext) for _ in range(cfg.convnext_blocks_dec)
        ))
        self.phase_linear = nn.Conv1d(head, head, 1)
        self.phase_real = nn.Conv1d(head, cfg.freq_bins, 7, padding=3)
        self.phase_imag = nn.Conv1d(head, cfg.freq_bins, 7, padding=3)

    def forward(self, latent, target_frames: int) -> DecoderOutput:
        x = latent.values if not torch.is_tensor(latent) and hasattr(latent, "values") else latent
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-2] != self.config.latent_channels:
            raise GeneratorError(
                f"latent has {x.shape[-2]} channels, config expects "
                f"{self.config.latent_channels}"
            )
        capacity = x.shape[-1] * self.config.downsample_factor
        if not 1 <= target_frames <= capacity:
            raise GeneratorError(
                f"target_frames {target_frames} outside 1..{capacity} "
                f"({x.shape[-1]} latent frames x{self.config.downsample_factor})"
            )
        for stage in self.upsampler:
            x = stage(x)
        x = x[..., :target_frames]

        mag = self.mag_proj(self.mag_blocks(self.mag_transition(x)))
        ph = self.phase_blocks(self.phase_transition(x))
        ph = self.phase_linear(ph)
        real, imag = self.phase_real(ph), self.phase_imag(ph)
        phase = torch.atan2(imag, real)
        # atan2 lands in [-pi, pi]; fold the closed -pi endpoint up to pi
        phase = torch.where(phase <= -math.pi, phase + 2 * math.pi, phase)
        if squeeze:
            mag, real, imag, phase = (t.squeeze(0) for t in (mag, real, imag, phase))
        return DecoderOutput(log_magnitude=mag, real_part=real, imag_part=imag, phase=phase)


@dataclass
class ForwardResult:
    """Reconstruction plus every intermediate the losses consume."""

    audio: torch.Tensor
    features: SpectralFeatures
    latent: torch.Tensor
    quantized: torch.Tensor
    tokens: torch.Tensor
    vq_loss: torch.Tensor
    commit_loss: torch.Tensor
    decoder_output: DecoderOutput
    num_frames: int


class CodecModel(nn.Module):
    """Analysis, encoding, quantization, decoding, and synthesis end to end."""

    def __init__(
        self,
        stft_config: StftConfig | None = None,
        config: GeneratorConfig | None = None,
        codebook_spec: CodebookSpec | None = None,
        magnitude_floor: float = 1e-7,
    ):
        super().__init__()
        self.stft_config = stft_config or StftConfig()
        self.config = config or GeneratorConfig()
        if self.config.freq_bins != self.stft_config.num_bins:
            raise GeneratorError(
                f"config.freq_bins {self.config.freq_bins} does not match the "
                f"{self.stft_config.num_bins} bins of fft_size {self.stft_config.fft_size}"
            )
        spec = codebook_spec or CodebookSpec(input_dim=self.config.latent_channels)
        if spec.input_dim != self.config.latent_channels:
            raise GeneratorError(
                f"codebook input_dim {spec.input_dim} does not match "
                f"latent_channels {self.config.latent_channels}"
            )
        self.magnitude_floor = float(magnitude_floor)
        self.encoder = Encoder(self.config)
        self.decoder = Decoder(self.config)
        self.quantizer = ResidualVectorQuantizer(spec)

    @property
    def latent_frame_rate(self) -> float:
        cfg = self.stft_config
        return cfg.sample_rate / (cfg.hop_length * self.config.downsample_factor)

    def input_streams(self, features: SpectralFeatures):
        """The three encoder streams; the gradient stream is zeroed when the
        unwrapping path is ablated."""
        grad = features.phase_gradient
        if not self.config.use_phase_gradient:
            grad = torch.zeros_like(grad)
        return features.log_magnitude, features.phase, grad

    def encode_latent(self, audio) -> LatentSequence:
        spec = stft_analyze(audio, self.stft_config)
        feats = extract_features(spec, self.magnitude_floor)
        mag, ph, grad = self.input_streams(feats)
        return LatentSequence(
            values=self.encoder(mag, ph, grad), frame_rate=self.latent_frame_rate
        )

    def forward(self, audio, num_stages: int | None = None) -> ForwardResult:
        x = torch.as_tensor(audio)
        squeeze = x.dim() == 1
        if squeeze:
            x = x.unsqueeze(0)
        num_samples = x.shape[-1]
        spec = stft_analyze(x, self.stft_config)
        feats = extract_features(spec, self.magnitude_floor)
        mag, ph, grad = self.input_streams(feats)
        latent = self.encoder(mag, ph, grad)
        qres: QuantizeResult = self.quantizer.quantize(latent, num_stages)
        dec = self.decoder(qres.quantized, spec.num_frames)
        audio_hat = istft_synthesize(
            dec.log_magnitude, dec.phase, self.stft_config, num_samples
        )
        if squeeze:
            audio_hat = audio_hat.squeeze(0)
        return ForwardResult(
            audio=audio_hat,
            features=feats,
            latent=latent.squeeze(0) if squeeze else latent,
            quantized=qres.quantized.squeeze(0) if squeeze else qres.quantized,
            tokens=qres.tokens.squeeze(0) if squeeze else qres.tokens,
            vq_loss=qres.vq_loss,
            commit_loss=qres.commit_loss,
            decoder_output=dec,
            num_frames=spec.num_frames,
        )

    @torch.no_grad()
    def encode_tokens(self, audio, num_stages: int | None = None) -> torch.Tensor:
        """Token matrix [stages x latent frames] for a 1-D signal."""
        latent = self.encode_latent(torch.as_tensor(audio))
        return self.quantizer.quantize(latent.values, num_stages).tokens.squeeze(0)

    @torch.no_grad()
    def decode_tokens(self, tokens, num_samples: int) -> torch.Tensor:
        """Reconstruct num_samples of audio from a [stages x frames] matrix."""
        if num_samples <= 0:
            raise GeneratorError(f"num_samples must be positive, got {num_samples}")
        target = self.stft_config.num_frames(num_samples)
        factor = self.config.downsample_factor
        latent_frames = torch.as_tensor(tokens).shape[-1]
        if -(-target // factor) != latent_frames:
            raise GeneratorError(
                f"{latent_frames} latent frames cannot carry {num_samples} samples "
                f"({target} analysis frames at factor {factor})"
            )
        quantized = self.quantizer.dequantize(tokens)
        dec = self.decoder(quantized, target)
        return istft_synthesize(
            dec.log_magnitude, dec.phase, self.stft_config, num_samples
        )
