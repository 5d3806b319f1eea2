"""STFT analysis/synthesis and phase-unwrapping features.

The analysis front end converts audio into three aligned [bins x frames]
matrices: natural-log magnitude, wrapped phase and the temporal gradient of
the time-unwrapped phase. Synthesis inverts predicted log-magnitude and
phase back to audio with window-square-normalized overlap-add, which is an
exact inverse of the analysis for consistent spectrograms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

TWO_PI = 2.0 * math.pi

_SUPPORTED_WINDOWS = ("hann",)


class SpectralError(ValueError):
    """Raised for invalid front-end inputs or configurations."""


@dataclass(frozen=True)
class StftConfig:
    """Window/hop/FFT sizes governing all time<->frequency mappings.

    The default is a periodic Hann window of 320 samples, hop 40, zero-padded
    into a 1024-point FFT at 48 kHz. The window must satisfy constant
    overlap-add at the configured hop, checked at construction.
    """

    fft_size: int = 1024
    win_length: int = 320
    hop_length: int = 40
    window: str = "hann"
    sample_rate: int = 48000

    def __post_init__(self):
        for name in ("fft_size", "win_length", "hop_length", "sample_rate"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise SpectralError(f"{name} must be a positive integer, got {value!r}")
        if self.win_length > self.fft_size:
            raise SpectralError(
                f"win_length {self.win_length} exceeds fft_size {self.fft_size}"
            )
        if self.hop_length > self.win_length:
            raise SpectralError(
                f"hop_length {self.hop_length} exceeds win_length {self.win_length}"
            )
        if self.window not in _SUPPORTED_WINDOWS:
            raise SpectralError(f"unsupported window {self.window!r}")
        if not check_cola(self.window_array(), self.hop_length):
            raise SpectralError(
                f"window {self.window!r} of length {self.win_length} violates the "
                f"constant-overlap-add condition at hop {self.hop_length}"
            )

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        """Frame count for an input of the given length: ceil(T / hop)."""
        return -(-num_samples // self.hop_length)

    def window_array(self) -> np.ndarray:
        return _hann_window(self.win_length)

    def window_tensor(self, dtype=torch.float64, device=None) -> torch.Tensor:
        return torch.from_numpy(self.window_array().copy()).to(dtype=dtype, device=device)


@lru_cache(maxsize=8)
def _hann_window(length: int) -> np.ndarray:
    # periodic Hann: w[n] = 0.5 (1 - cos(2 pi n / N))
    n = np.arange(length, dtype=np.float64)
    w = 0.5 * (1.0 - np.cos(TWO_PI * n / length))
    w.flags.writeable = False
    return w


def check_cola(window: np.ndarray, hop: int, rtol: float = 1e-10) -> bool:
    """Check the constant-overlap-add condition by summing shifted windows."""
    length = len(window)
    if length % hop != 0:
        return False
    acc = np.zeros(hop, dtype=np.float64)
    for start in range(0, length, hop):
        acc += window[start:start + hop]
    target = np.mean(acc)
    if target <= 0.0:
        return False
    return bool(np.max(np.abs(acc - target)) <= rtol * target)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Non-redundant half-spectrum STFT matrix [K bins x M frames]."""

    values: torch.Tensor
    config: StftConfig

    def __post_init__(self):
        if self.values.shape[-2] != self.config.num_bins:
            raise SpectralError(
                f"spectrogram has {self.values.shape[-2]} bins, expected "
                f"{self.config.num_bins} for fft_size {self.config.fft_size}"
            )

    @property
    def num_frames(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class SpectralFeatures:
    """Aligned log-magnitude, wrapped phase, and phase-gradient matrices."""

    log_magnitude: torch.Tensor
    phase: torch.Tensor
    phase_gradient: torch.Tensor

    def __post_init__(self):
        if not (self.log_magnitude.shape == self.phase.shape == self.phase_gradient.shape):
            raise SpectralError("feature matrices must share one shape")


def _as_audio_tensor(audio) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(audio)
    if x.is_complex() or not x.is_floating_point():
        x = x.to(torch.float64)
    if x.dim() == 1:
        return x.unsqueeze(0), True
    if x.dim() == 2:
        return x, False
    raise SpectralError(f"audio must be 1-D or [batch, samples], got shape {tuple(x.shape)}")


def stft_analyze(audio, config: StftConfig) -> ComplexSpectrogram:
    """Short-time Fourier transform with center-reflection framing.

    The signal is reflect-padded by win_length/2 on each side and framed at
    hop_length, giving M = ceil(T / hop) frames. Each frame is windowed and
    zero-padded (centered) to fft_size before the real FFT.

    Raises:
        SpectralError: if the signal is shorter than win_length or non-finite.
    """
    x, squeeze = _as_audio_tensor(audio)
    num_samples = x.shape[-1]
    if num_samples < config.win_length:
        raise SpectralError(
            f"signal of {num_samples} samples is shorter than the analysis "
            f"window ({config.win_length} samples)"
        )
    if not torch.isfinite(x).all():
        raise SpectralError("audio contains non-finite samples")

    win, hop, n_fft = config.win_length, config.hop_length, config.fft_size
    frames_wanted = config.num_frames(num_samples)
    pad = win // 2
    padded = F.pad(x.unsqueeze(1), (pad, pad), mode="reflect").squeeze(1)
    frames = padded.unfold(-1, win, hop)[:, :frames_wanted, :]  # [B, M, win]
    frames = frames * config.window_tensor(dtype=x.dtype, device=x.device)
    left = (n_fft - win) // 2
    frames = F.pad(frames, (left, n_fft - win - left))
    spec = torch.fft.rfft(frames, n=n_fft, dim=-1).transpose(-2, -1)  # [B, K, M]
    if squeeze:
        spec = spec.squeeze(0)
    return ComplexSpectrogram(values=spec, config=config)


def extract_features(spec: ComplexSpectrogram, magnitude_floor: float = 1e-7) -> SpectralFeatures:
    """Split a complex spectrogram into log-magnitude, phase and phase gradient.

    The magnitude is clamped to ``magnitude_floor`` before the natural log.
    The gradient stream is the frame-to-frame difference of the time-unwrapped
    phase, zero in the first frame.
    """
    if magnitude_floor <= 0.0:
        raise SpectralError(f"magnitude_floor must be positive, got {magnitude_floor}")
    values = spec.values
    log_magnitude = torch.log(values.abs().clamp_min(magnitude_floor))
    phase = torch.angle(values)
    gradient = phase_temporal_gradient(unwrap_phase_time(phase)).to(phase.dtype)
    return SpectralFeatures(log_magnitude=log_magnitude, phase=phase, phase_gradient=gradient)


def unwrap_phase_time(phase) -> torch.Tensor:
    """Unwrap phase along the frame axis, per frequency bin.

    Adds integer multiples of 2*pi per frame so consecutive differences stay
    within [-pi, pi]; a jump is corrected only when |delta| exceeds pi
    strictly, so ties at exactly pi are left untouched. Computed in float64:
    for float32-grade inputs the result wraps back to the input bit-exactly.
    """
    p = torch.as_tensor(phase).to(torch.float64)
    if p.shape[-1] < 2:
        return p.clone()
    delta = p[..., 1:] - p[..., :-1]
    # branchless: boolean-mask assignment is much slower on large matrices
    zero = torch.zeros((), dtype=p.dtype)
    steps = torch.where(
        delta > math.pi, -torch.floor((delta + math.pi) / TWO_PI), zero
    )
    steps = torch.where(
        delta < -math.pi, -torch.ceil((delta - math.pi) / TWO_PI), steps
    )
    jumps = torch.cumsum(steps, dim=-1)
    out = p.clone()
    out[..., 1:] = p[..., 1:] + TWO_PI * jumps
    return out


def phase_temporal_gradient(unwrapped) -> torch.Tensor:
    """Frame-to-frame difference of unwrapped phase; first frame is zero."""
    u = torch.as_tensor(unwrapped)
    out = torch.zeros_like(u)
    if u.shape[-1] > 1:
        out[..., 1:] = u[..., 1:] - u[..., :-1]
    return out


def wrap_phase(angles) -> torch.Tensor:
    """Map angles into (-pi, pi] by subtracting the nearest multiple of 2*pi."""
    u = torch.as_tensor(angles)
    w = u - TWO_PI * torch.round(u / TWO_PI)
    w = torch.where(w <= -math.pi, w + TWO_PI, w)
    w = torch.where(w > math.pi, w - TWO_PI, w)
    return w


def istft_synthesize(log_magnitude, phase, config: StftConfig, out_length: int) -> torch.Tensor:
    """Inverse STFT from log-magnitude and phase via normalized overlap-add.

    The amplitude is exp(log_magnitude); each frame is inverted with the real
    IFFT, re-windowed, overlap-added and divided by the summed squared window;
    the result is cropped (or zero-padded) to ``out_length`` samples.
    Differentiable with respect to both inputs.
    """
    log_mag = torch.as_tensor(log_magnitude)
    phi = torch.as_tensor(phase)
    if log_mag.shape != phi.shape:
        raise SpectralError(
            f"log-magnitude shape {tuple(log_mag.shape)} does not match phase "
            f"shape {tuple(phi.shape)}"
        )
    squeeze = log_mag.dim() == 2
    if squeeze:
        log_mag, phi = log_mag.unsqueeze(0), phi.unsqueeze(0)
    if log_mag.dim() != 3 or log_mag.shape[-2] != config.num_bins:
        raise SpectralError(
            f"expected [batch, {config.num_bins}, frames] matrices, got "
            f"shape {tuple(log_mag.shape)}"
        )
    if out_length < 0:
        raise SpectralError(f"out_length must be non-negative, got {out_length}")

    batch, _, num_frames = log_mag.shape
    win, hop, n_fft = config.win_length, config.hop_length, config.fft_size
    spec = torch.polar(torch.exp(log_mag), phi).transpose(-2, -1)  # [B, M, K]
    full = torch.fft.irfft(spec, n=n_fft, dim=-1)
    left = (n_fft - win) // 2
    segments = full[..., left:left + win]
    window = config.window_tensor(dtype=segments.dtype, device=segments.device)
    segments = segments * window

    ola_length = (num_frames - 1) * hop + win
    y = F.fold(
        segments.transpose(-2, -1),
        output_size=(1, ola_length),
        kernel_size=(1, win),
        stride=(1, hop),
    ).reshape(batch, ola_length)
    wsq = (window * window).expand(num_frames, win)
    norm = F.fold(
        wsq.transpose(0, 1).unsqueeze(0),
        output_size=(1, ola_length),
        kernel_size=(1, win),
        stride=(1, hop),
    ).reshape(ola_length)

    pad = win // 2
    natural = num_frames * hop
    usable = min(natural, ola_length - pad)
    y = y[:, pad:pad + usable] / norm[pad:pad + usable].clamp_min(1e-30)
    if out_length <= usable:
        y = y[:, :out_length]
    else:
        y = F.pad(y, (0, out_length - usable))
    return y.squeeze(0) if squeeze else y


def mel_filterbank(
    sample_rate: int,
    n_fft: int,
    n_mels: int,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """Slaney-style mel filterbank matrix [n_mels x (n_fft/2 + 1)].

    Triangular filters on the Slaney mel scale (linear below 1 kHz,
    logarithmic above), area-normalized per band, spanning fmin..fmax
    (default 0..Nyquist).
    """
    if fmax is None:
        fmax = sample_rate / 2.0

    def hz_to_mel(f):
        f = np.asarray(f, dtype=np.float64)
        mel = f / (200.0 / 3.0)
        log_region = f >= 1000.0
        mel = np.where(
            log_region,
            15.0 + np.log(np.maximum(f, 1e-12) / 1000.0) / (np.log(6.4) / 27.0),
            mel,
        )
        return mel

    def mel_to_hz(m):
        m = np.asarray(m, dtype=np.float64)
        f = m * (200.0 / 3.0)
        log_region = m >= 15.0
        f = np.where(log_region, 1000.0 * np.exp((np.log(6.4) / 27.0) * (m - 15.0)), f)
        return f

    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fft_freqs = np.arange(n_fft // 2 + 1, dtype=np.float64) * sample_rate / n_fft

    weights = np.zeros((n_mels, n_fft // 2 + 1), dtype=np.float64)
    for i in range(n_mels):
        lower, center, upper = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        up = (fft_freqs - lower) / max(center - lower, 1e-12)
        down = (upper - fft_freqs) / max(upper - center, 1e-12)
        weights[i] = np.maximum(0.0, np.minimum(up, down))
        # Slaney area normalization: each triangle integrates to ~2/bandwidth
        weights[i] *= 2.0 / (upper - lower)
    return weights
