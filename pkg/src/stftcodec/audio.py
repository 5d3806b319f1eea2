"""Mono WAV reading/writing with strict format validation."""

from __future__ import annotations

import numpy as np
from scipy.io import wavfile


class AudioFormatError(ValueError):
    """Raised for WAV files the codec does not accept."""


def read_wav(path, expected_sample_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read a mono WAV file as float32 in [-1, 1].

    Accepts 16-bit PCM and 32-bit float WAVs. Multichannel files and other
    sample formats are rejected.

    Returns:
        (audio, sample_rate) with audio of shape [num_samples].
    """
    try:
        sample_rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise AudioFormatError(f"unreadable WAV file {path}: {exc}") from exc

    if data.ndim != 1:
        raise AudioFormatError(
            f"{path}: expected mono audio, got {data.shape[1]} channels"
        )
    if data.dtype == np.int16:
        audio = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        audio = data
    else:
        raise AudioFormatError(
            f"{path}: unsupported sample format {data.dtype}; "
            "only 16-bit PCM and 32-bit float are supported"
        )
    if expected_sample_rate is not None and sample_rate != expected_sample_rate:
        raise AudioFormatError(
            f"{path}: sample rate {sample_rate} Hz does not match expected "
            f"{expected_sample_rate} Hz (no resampling is performed)"
        )
    return audio, sample_rate


def write_wav(path, audio: np.ndarray, sample_rate: int, subtype: str = "int16") -> None:
    """Write mono float audio to a WAV file as 16-bit PCM or 32-bit float."""
    audio = np.asarray(audio)
    if audio.ndim != 1:
        raise AudioFormatError(f"expected mono audio vector, got shape {audio.shape}")
    if subtype == "int16":
        clipped = np.clip(audio, -1.0, 1.0)
        wavfile.write(path, sample_rate, (clipped * 32767.0).astype(np.int16))
    elif subtype == "float32":
        wavfile.write(path, sample_rate, audio.astype(np.float32))
    else:
        raise AudioFormatError(f"unsupported WAV subtype {subtype!r}")
