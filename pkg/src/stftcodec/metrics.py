"""Objective evaluation: log-spectral distance, V/UV F1, external tools.

LSD here follows the codec-evaluation convention of measuring distances
between log-mel spectrograms (80 bands, window 1024, hop 256, natural log)
rather than raw log spectra. External perceptual tools are shelled out to;
a missing or failing tool yields an "unavailable" result, never an exception.
"""

from __future__ import annotations

import csv
import re
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .audio import write_wav
from .losses import MelScale


class MetricError(ValueError):
    """Raised for invalid metric inputs (never for tool availability)."""


@lru_cache(maxsize=4)
def _lsd_mel(sample_rate: int) -> MelScale:
    return MelScale(sample_rate, win_length=1024, hop_length=256, n_mels=80).double()


def lsd(reference, estimate, sample_rate: int = 48000) -> float:
    """Frame-wise RMS over mel bands of the log-mel difference, frame-averaged."""
    x = torch.as_tensor(reference, dtype=torch.float64).ravel()
    y = torch.as_tensor(estimate, dtype=torch.float64).ravel()
    if x.shape != y.shape:
        raise MetricError(f"length mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    mel = _lsd_mel(sample_rate)
    with torch.no_grad():
        lx = torch.log(mel(x).clamp_min(1e-10))
        ly = torch.log(mel(y).clamp_min(1e-10))
        per_frame = ((lx - ly) ** 2).mean(dim=-2).sqrt()
    return float(per_frame.mean())


def voicing_decisions(
    audio,
    sample_rate: int,
    frame_ms: float = 10.0,
    fmin: float = 60.0,
    fmax: float = 400.0,
    threshold: float = 0.3,
    energy_gate: float = 0.02,
) -> np.ndarray:
    """Per-frame voiced flags from the normalized autocorrelation peak.

    A frame is voiced when the peak over lags sample_rate/fmax ..
    sample_rate/fmin exceeds ``threshold`` and the frame passes a relative
    energy gate (silence is never voiced).
    """
    x = np.asarray(audio, dtype=np.float64).ravel()
    flen = int(round(sample_rate * frame_ms / 1000.0))
    if flen <= 0 or len(x) < flen:
        return np.zeros(0, dtype=bool)
    min_lag = max(1, int(sample_rate / fmax))
    max_lag = int(sample_rate / fmin)
    n_frames = len(x) // flen

    sq = np.concatenate([[0.0], np.cumsum(x * x)])
    rms = np.array([
        np.sqrt((sq[(m + 1) * flen] - sq[m * flen]) / flen) for m in range(n_frames)
    ])
    gate = max(float(rms.max(initial=0.0)) * energy_gate, 1e-5)

    voiced = np.zeros(n_frames, dtype=bool)
    for m in range(n_frames):
        if rms[m] <= gate:
            continue
        s = m * flen
        hi = min(max_lag, len(x) - s - flen)
        if hi < min_lag:
            continue
        seg = x[s:s + flen]
        # corr[t] = sum_n seg[n] * x[s + t + n] for t = 0..hi
        corr = np.correlate(x[s:s + flen + hi], seg, mode="valid")
        lags = np.arange(min_lag, hi + 1)
        energy = sq[s + lags + flen] - sq[s + lags]
        denom = np.sqrt((sq[s + flen] - sq[s]) * energy)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(denom > 0, corr[min_lag:hi + 1] / denom, 0.0)
        if r.size and np.nanmax(r) > threshold:
            voiced[m] = True
    return voiced


def f1_from_decisions(reference: np.ndarray, prediction: np.ndarray) -> float:
    """F1 with voiced as the positive class; two all-unvoiced signals agree
    perfectly and score 1.0."""
    ref = np.asarray(reference, dtype=bool)
    pred = np.asarray(prediction, dtype=bool)
    if ref.shape != pred.shape:
        raise MetricError(f"decision count mismatch: {ref.shape} vs {pred.shape}")
    tp = int(np.sum(ref & pred))
    fp = int(np.sum(~ref & pred))
    fn = int(np.sum(ref & ~pred))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def vuv_f1(reference, estimate, sample_rate: int = 48000) -> float:
    x = np.asarray(reference, dtype=np.float64).ravel()
    y = np.asarray(estimate, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise MetricError(f"length mismatch: {len(x)} vs {len(y)}")
    return f1_from_decisions(
        voicing_decisions(x, sample_rate), voicing_decisions(y, sample_rate)
    )


@dataclass(frozen=True)
class ExternalMetricResult:
    name: str
    value: float | None
    status: str  # "ok" or "unavailable"
    tool_version: str | None = None
    detail: str = ""

    @property
    def available(self) -> bool:
        return self.status == "ok"


_FLOAT_RE = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?")


def _tool_version(tool: str) -> str | None:
    try:
        proc = subprocess.run(
            [tool, "--version"], capture_output=True, text=True, timeout=30
        )
        line = (proc.stdout or proc.stderr).strip().splitlines()
        return line[0][:200] if line else None
    except Exception:
        return None


def external_metric(
    name: str, reference, estimate, tool_path: str | None, sample_rate: int = 48000
) -> ExternalMetricResult:
    """Run an external intrusive metric tool on a reference/estimate pair.

    The tool is invoked as ``tool ref.wav deg.wav`` and the last numeric token
    of its stdout is taken as the score. Any failure (unconfigured path,
    missing binary, crash, unparseable output) is an "unavailable" result.
    """
    if not tool_path:
        return ExternalMetricResult(name, None, "unavailable", detail="no tool configured")
    resolved = shutil.which(tool_path) or (tool_path if Path(tool_path).exists() else None)
    if resolved is None:
        return ExternalMetricResult(
            name, None, "unavailable", detail=f"tool not found: {tool_path}"
        )
    version = _tool_version(resolved)
    try:
        with tempfile.TemporaryDirectory(prefix="stftcodec_metric_") as tmp:
            ref_path = str(Path(tmp) / "ref.wav")
            deg_path = str(Path(tmp) / "deg.wav")
            write_wav(ref_path, np.asarray(reference, dtype=np.float32), sample_rate)
            write_wav(deg_path, np.asarray(estimate, dtype=np.float32), sample_rate)
            proc = subprocess.run(
                [resolved, ref_path, deg_path],
                capture_output=True, text=True, timeout=600,
            )
        if proc.returncode != 0:
            return ExternalMetricResult(
                name, None, "unavailable", version,
                f"exit {proc.returncode}: {proc.stderr.strip()[:200]}",
            )
        matches = _FLOAT_RE.findall(proc.stdout)
        if not matches:
            return ExternalMetricResult(
                name, None, "unavailable", version, "no numeric output"
            )
        return ExternalMetricResult(name, float(matches[-1]), "ok", version)
    except Exception as exc:  # tool problems are results, not errors
        return ExternalMetricResult(name, None, "unavailable", version, repr(exc)[:200])


@dataclass
class FileMetrics:
    path: str
    lsd: float
    vuv_f1: float
    externals: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    """Per-file metric rows plus corpus means and the configured bitrate."""

    files: list
    bitrate: float

    @property
    def mean_lsd(self) -> float:
        return float(np.mean([f.lsd for f in self.files])) if self.files else float("nan")

    @property
    def mean_vuv_f1(self) -> float:
        return float(np.mean([f.vuv_f1 for f in self.files])) if self.files else float("nan")

    def external_names(self) -> list:
        names = []
        for f in self.files:
            for n in f.externals:
                if n not in names:
                    names.append(n)
        return names

    def write_csv(self, path):
        names = self.external_names()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["file", "lsd", "vuv_f1", *names, "bitrate_bps"])
            for f in self.files:
                row = [f.path, f"{f.lsd:.6f}", f"{f.vuv_f1:.6f}"]
                for n in names:
                    r = f.externals.get(n)
                    row.append(f"{r.value:.6f}" if r and r.available else "unavailable")
                row.append(f"{self.bitrate:.1f}")
                writer.writerow(row)
            mean = ["mean", f"{self.mean_lsd:.6f}", f"{self.mean_vuv_f1:.6f}"]
            for n in names:
                vals = [f.externals[n].value for f in self.files
                        if n in f.externals and f.externals[n].available]
                mean.append(f"{np.mean(vals):.6f}" if vals else "unavailable")
            mean.append(f"{self.bitrate:.1f}")
            writer.writerow(mean)

    def summary(self) -> str:
        lines = [
            f"files evaluated: {len(self.files)}",
            f"bitrate: {self.bitrate:.0f} bps",
            f"mean LSD: {self.mean_lsd:.4f}",
            f"mean V/UV F1: {self.mean_vuv_f1:.4f}",
        ]
        for n in self.external_names():
            vals = [f.externals[n].value for f in self.files
                    if n in f.externals and f.externals[n].available]
            if vals:
                lines.append(f"mean {n}: {float(np.mean(vals)):.4f}")
            else:
                detail = next(
                    (f.externals[n].detail for f in self.files if n in f.externals), ""
                )
                lines.append(f"{n}: unavailable ({detail})" if detail else f"{n}: unavailable")
        return "\n".join(lines)
