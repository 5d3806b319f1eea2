"""Multi-period waveform and multi-scale STFT discriminators.

Both return per-sub-discriminator logits plus every intermediate feature map
for the feature-matching loss. Convolutions are weight-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm


class DiscriminatorError(ValueError):
    """Raised when the input is too short for a sub-discriminator."""


@dataclass
class DiscriminatorOutput:
    logits: list
    feature_maps: list

    def __post_init__(self):
        if len(self.logits) != len(self.feature_maps):
            raise DiscriminatorError("one feature-map list per sub-discriminator")


def _as_batched(audio) -> torch.Tensor:
    x = torch.as_tensor(audio)
    if x.dim() == 1:
        x = x.unsqueeze(0)
    if x.dim() != 2:
        raise DiscriminatorError(f"audio must be [T] or [batch, T], got {tuple(x.shape)}")
    return x


class PeriodDiscriminator(nn.Module):
    """2-D convolutions over audio folded into [time/p, p] columns."""

    def __init__(self, period: int, channels=(32, 128, 512, 1024, 1024)):
        super().__init__()
        self.period = period
        convs = []
        in_ch = 1
        for i, out_ch in enumerate(channels):
            stride = (3, 1) if i < len(channels) - 1 else (1, 1)
            convs.append(weight_norm(nn.Conv2d(in_ch, out_ch, (5, 1), stride, (2, 0))))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.post = weight_norm(nn.Conv2d(in_ch, 1, (3, 1), 1, (1, 0)))

    def forward(self, x):  # [B, T]
        b, t = x.shape
        if t % self.period:
            pad = self.period - t % self.period
            x = F.pad(x, (0, pad), mode="reflect")
            t = x.shape[-1]
        h = x.view(b, 1, t // self.period, self.period)
        fmaps = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.1)
            fmaps.append(h)
        h = self.post(h)
        fmaps.append(h)
        return h, fmaps


class MultiPeriodDiscriminator(nn.Module):
    def __init__(self, periods=(2, 3, 5, 7, 11), channels=(32, 128, 512, 1024, 1024)):
        super().__init__()
        self.periods = tuple(periods)
        self.subs = nn.ModuleList(
            PeriodDiscriminator(p, channels) for p in self.periods
        )

    def forward(self, audio) -> DiscriminatorOutput:
        x = _as_batched(audio)
        if x.shape[-1] < max(self.periods):
            raise DiscriminatorError(
                f"audio of {x.shape[-1]} samples is shorter than the largest "
                f"period {max(self.periods)}"
            )
        logits, fmaps = [], []
        for sub in self.subs:
            l, f = sub(x)
            logits.append(l)
            fmaps.append(f)
        return DiscriminatorOutput(logits=logits, feature_maps=fmaps)


class StftResolutionDiscriminator(nn.Module):
    """2-D convolutions over the real/imaginary planes of one STFT."""

    def __init__(self, n_fft: int, base_channels: int = 32):
        super().__init__()
        self.n_fft = n_fft
        self.hop = n_fft // 4
        self.register_buffer("window", torch.hann_window(n_fft), persistent=False)
        c = base_channels
        self.convs = nn.ModuleList([
            weight_norm(nn.Conv2d(2, c, (3, 9), padding=(1, 4))),
            weight_norm(nn.Conv2d(c, 2 * c, (3, 9), stride=(1, 2), padding=(1, 4))),
            weight_norm(nn.Conv2d(2 * c, 4 * c, (3, 9), stride=(1, 2),
                                  dilation=(2, 1), padding=(2, 4))),
            weight_norm(nn.Conv2d(4 * c, 4 * c, (3, 9), stride=(1, 2),
                                  dilation=(4, 1), padding=(4, 4))),
            weight_norm(nn.Conv2d(4 * c, 4 * c, (3, 3), padding=(1, 1))),
        ])
        self.post = weight_norm(nn.Conv2d(4 * c, 1, (3, 3), padding=(1, 1)))

    def forward(self, x):  # [B, T]
        spec = torch.stft(
            x, self.n_fft, hop_length=self.hop, win_length=self.n_fft,
            window=self.window.to(x.dtype), center=True, normalized=True,
            return_complex=True,
        )
        h = torch.view_as_real(spec).permute(0, 3, 1, 2)  # [B, 2, F, T']
        fmaps = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.3)
            fmaps.append(h)
        h = self.post(h)
        fmaps.append(h)
        return h, fmaps


class MultiScaleSTFTDiscriminator(nn.Module):
    def __init__(self, fft_sizes=(2048, 1024, 512, 256, 128), base_channels: int = 32):
        super().__init__()
        self.fft_sizes = tuple(fft_sizes)
        self.subs = nn.ModuleList(
            StftResolutionDiscriminator(n, base_channels) for n in self.fft_sizes
        )

    def forward(self, audio) -> DiscriminatorOutput:
        x = _as_batched(audio)
        if x.shape[-1] < max(self.fft_sizes):
            raise DiscriminatorError(
                f"audio of {x.shape[-1]} samples is shorter than the largest "
                f"FFT size {max(self.fft_sizes)}"
            )
        logits, fmaps = [], []
        for sub in self.subs:
            l, f = sub(x)
            logits.append(l)
            fmaps.append(f)
        return DiscriminatorOutput(logits=logits, feature_maps=fmaps)


class DiscriminatorEnsemble(nn.Module):
    """MPD and MS-STFT evaluated together; outputs are concatenated
    (periods first, then resolutions)."""

    def __init__(
        self,
        periods=(2, 3, 5, 7, 11),
        mpd_channels=(32, 128, 512, 1024, 1024),
        fft_sizes=(2048, 1024, 512, 256, 128),
        stft_channels: int = 32,
    ):
        super().__init__()
        self.mpd = MultiPeriodDiscriminator(periods, mpd_channels)
        self.msstft = MultiScaleSTFTDiscriminator(fft_sizes, stft_channels)

    @property
    def num_sub_discriminators(self) -> int:
        return len(self.mpd.periods) + len(self.msstft.fft_sizes)

    def forward(self, audio) -> DiscriminatorOutput:
        a = self.mpd(audio)
        b = self.msstft(audio)
        return DiscriminatorOutput(
            logits=a.logits + b.logits,
            feature_maps=a.feature_maps + b.feature_maps,
        )
