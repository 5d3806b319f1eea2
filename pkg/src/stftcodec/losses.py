"""Training objectives and the weighted generator/discriminator totals."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from .discriminators import DiscriminatorOutput
from .generator import DecoderOutput
from .spectral import SpectralFeatures, mel_filterbank, wrap_phase


class LossError(ValueError):
    """Raised for shape mismatches and non-finite loss parts."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the generator total; defaults follow the training recipe."""

    lambda_mel: float = 15.0
    lambda_feat: float = 2.0
    lambda_commit: float = 0.25
    spectral_recon_enabled: bool = False
    lambda_spectral: float = 1.0

    def __post_init__(self):
        for f in ("lambda_mel", "lambda_feat", "lambda_commit", "lambda_spectral"):
            if getattr(self, f) < 0:
                raise LossError(f"{f} must be non-negative")


@dataclass
class LossReport:
    mel: float
    adv_g: float
    adv_d: float
    feat: float
    vq: float
    commit: float
    total_g: float
    total_d: float
    spectral_recon: float = 0.0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class MelScale(nn.Module):
    """Magnitude mel spectrogram at one window/hop/band setting.

    Inputs shorter than the window are zero-padded at the end so every scale
    sees at least one frame.
    """

    def __init__(self, sample_rate: int, win_length: int, hop_length: int, n_mels: int):
        super().__init__()
        self.win_length = win_length
        self.hop_length = hop_length
        self.n_mels = n_mels
        fb = torch.from_numpy(mel_filterbank(sample_rate, win_length, n_mels))
        self.register_buffer("filterbank", fb, persistent=False)
        self.register_buffer(
            "window", torch.hann_window(win_length, dtype=torch.float64), persistent=False
        )

    def forward(self, audio) -> torch.Tensor:
        x = torch.as_tensor(audio)
        if x.dim() == 1:
            x = x.unsqueeze(0)
        if x.shape[-1] < self.win_length:
            x = F.pad(x, (0, self.win_length - x.shape[-1]))
        spec = torch.stft(
            x, self.win_length, hop_length=self.hop_length,
            window=self.window.to(x.dtype), center=True, return_complex=True,
        )
        return self.filterbank.to(x.dtype) @ spec.abs()


class MultiScaleMelLoss(nn.Module):
    """Sum over scales of L1 mel + L1 log-mel distance.

    Default scales: window 2048 / hop 512 / 128 bands and window 512 /
    hop 128 / 64 bands. The log term clamps at log_floor; natural log.
    """

    def __init__(
        self,
        sample_rate: int = 48000,
        scales=((2048, 512, 128), (512, 128, 64)),
        log_floor: float = 1e-5,
    ):
        super().__init__()
        self.scales = nn.ModuleList(
            MelScale(sample_rate, win, hop, bands) for win, hop, bands in scales
        )
        self.log_floor = log_floor

    def forward(self, reference, estimate) -> torch.Tensor:
        x = torch.as_tensor(reference)
        y = torch.as_tensor(estimate)
        if x.shape != y.shape:
            raise LossError(f"length mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
        total = 0.0
        for scale in self.scales:
            mx, my = scale(x), scale(y)
            total = total + (mx - my).abs().mean()
            lx = torch.log(mx.clamp_min(self.log_floor))
            ly = torch.log(my.clamp_min(self.log_floor))
            total = total + (lx - ly).abs().mean()
        return total


def lsgan_losses(real_out: DiscriminatorOutput, fake_out: DiscriminatorOutput):
    """Least-squares adversarial pair summed over sub-discriminators.

    Returns (adv_g, adv_d): the generator drives fake logits to 1; the
    discriminator drives real logits to 1 and fake logits to 0.
    """
    if len(real_out.logits) != len(fake_out.logits):
        raise LossError(
            f"sub-discriminator count mismatch: {len(real_out.logits)} vs "
            f"{len(fake_out.logits)}"
        )
    adv_g = 0.0
    adv_d = 0.0
    for r, f in zip(real_out.logits, fake_out.logits):
        adv_d = adv_d + ((r - 1.0) ** 2).mean() + (f ** 2).mean()
        adv_g = adv_g + ((f - 1.0) ** 2).mean()
    return adv_g, adv_d


def feature_matching_loss(real_out: DiscriminatorOutput, fake_out: DiscriminatorOutput):
    """Mean over sub-discriminators and layers of scale-normalized L1.

    Each layer's distance is divided by the mean absolute value of the real
    feature so deep, large-magnitude layers do not dominate.
    """
    if len(real_out.feature_maps) != len(fake_out.feature_maps):
        raise LossError("sub-discriminator count mismatch")
    per_sub = []
    for rf, ff in zip(real_out.feature_maps, fake_out.feature_maps):
        if len(rf) != len(ff):
            raise LossError("layer count mismatch")
        per_layer = []
        for r, f in zip(rf, ff):
            if r.shape != f.shape:
                raise LossError(f"feature shape mismatch: {tuple(r.shape)} vs {tuple(f.shape)}")
            denom = r.detach().abs().mean().clamp_min(1e-12)
            per_layer.append((r - f).abs().mean() / denom)
        per_sub.append(sum(per_layer) / len(per_layer))
    return sum(per_sub) / len(per_sub)


def vq_commit_losses(latent, quantized):
    """L1 codebook loss (gradient to the quantizer side) and commitment loss
    (gradient to the encoder side), via opposite stop-gradients."""
    if latent.shape != quantized.shape:
        raise LossError(f"shape mismatch: {tuple(latent.shape)} vs {tuple(quantized.shape)}")
    vq = (quantized - latent.detach()).abs().mean()
    commit = (latent - quantized.detach()).abs().mean()
    return vq, commit


def spectral_recon_loss(pred: DecoderOutput, target: SpectralFeatures, weights: LossWeights):
    """Squared log-magnitude error plus anti-wrapped absolute phase distance.

    Only active in the ablation that adds explicit spectral reconstruction.
    """
    if not weights.spectral_recon_enabled:
        raise LossError("spectral reconstruction loss invoked while disabled")
    if pred.log_magnitude.shape != target.log_magnitude.shape:
        raise LossError("shape mismatch between prediction and target")
    mag_term = ((pred.log_magnitude - target.log_magnitude) ** 2).mean()
    phase_term = wrap_phase(pred.phase - target.phase).abs().mean()
    return mag_term + phase_term


def _as_float(value) -> float:
    return float(torch.as_tensor(value).detach())


def _check_finite(name: str, value):
    v = torch.as_tensor(value)
    if not torch.isfinite(v).all():
        raise LossError(f"loss term {name!r} is not finite: {v}")
    return value


def total_losses(
    mel, adv_g, adv_d, feat, vq, commit,
    weights: LossWeights | None = None,
    spectral_recon=None,
) -> tuple:
    """Weighted generator total and discriminator total.

    total_g = lambda_mel*mel + lambda_feat*feat + adv_g + lambda_commit*commit
    + vq (+ lambda_spectral*spectral_recon when enabled); total_d = adv_d.
    Returns (total_g, total_d) as tensors plus a LossReport of floats.
    """
    w = weights or LossWeights()
    parts = {
        "mel": mel, "adv_g": adv_g, "adv_d": adv_d,
        "feat": feat, "vq": vq, "commit": commit,
    }
    for name, value in parts.items():
        _check_finite(name, value)
    total_g = (
        w.lambda_mel * mel + w.lambda_feat * feat + adv_g + w.lambda_commit * commit + vq
    )
    spectral_value = 0.0
    if weights is not None and w.spectral_recon_enabled:
        if spectral_recon is None:
            raise LossError("spectral_recon_enabled but no spectral_recon value given")
        _check_finite("spectral_recon", spectral_recon)
        total_g = total_g + w.lambda_spectral * spectral_recon
        spectral_value = _as_float(spectral_recon)
    total_d = adv_d
    report = LossReport(
        mel=_as_float(mel), adv_g=_as_float(adv_g), adv_d=_as_float(adv_d),
        feat=_as_float(feat), vq=_as_float(vq), commit=_as_float(commit),
        total_g=_as_float(total_g), total_d=_as_float(total_d),
        spectral_recon=spectral_value,
    )
    return total_g, total_d, report
