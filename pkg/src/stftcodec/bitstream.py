"""Packed token bitstream (.stfc) and the file-level encode/decode API.

Fixed-width binary index coding: each token occupies exactly log2(size) bits,
packed LSB-first, frame-major then stage-major, zero-padded to a byte
boundary at the end of the stream. All header integers are little-endian.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import read_wav
from .quantizer import CodebookSpec

MAGIC = b"STFC"
VERSION = 1

# magic 4 + version 1 + sample_rate 4 + hop 2 + fft 2 + win 2 + ds 1 + count 1
_PREFIX = struct.Struct("<4sBIHHHBB")
# latent frame count 4 + original sample count 8
_SUFFIX = struct.Struct("<IQ")
_HASH_BYTES = 16


class BitstreamError(ValueError):
    """Raised for malformed streams and incompatible models."""


def _is_pow2(n: int) -> bool:
    return n >= 2 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class BitstreamHeader:
    sample_rate: int
    hop_length: int
    fft_size: int
    win_length: int
    downsample_ratio: int
    codebook_sizes: tuple
    num_latent_frames: int
    original_num_samples: int
    model_hash: bytes
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "codebook_sizes", tuple(int(s) for s in self.codebook_sizes))
        if not 0 <= self.version <= 255:
            raise BitstreamError(f"version {self.version} does not fit in one byte")
        for name, width in (
            ("sample_rate", 32), ("hop_length", 16),
            ("fft_size", 16), ("win_length", 16), ("downsample_ratio", 8),
        ):
            value = getattr(self, name)
            if not 1 <= value < (1 << width):
                raise BitstreamError(f"{name} {value} out of range for u{width}")
        if not 1 <= len(self.codebook_sizes) <= 255:
            raise BitstreamError(
                f"need 1..255 codebooks, got {len(self.codebook_sizes)}"
            )
        for s in self.codebook_sizes:
            if not _is_pow2(s) or s > 0xFFFF:
                raise BitstreamError(f"codebook size {s} must be a power of two in [2, 65535]")
        if not 0 <= self.num_latent_frames < (1 << 32):
            raise BitstreamError(f"bad latent frame count {self.num_latent_frames}")
        if not 0 <= self.original_num_samples < (1 << 64):
            raise BitstreamError(f"bad sample count {self.original_num_samples}")
        if not isinstance(self.model_hash, bytes) or len(self.model_hash) != _HASH_BYTES:
            raise BitstreamError(f"model_hash must be {_HASH_BYTES} bytes")

    @property
    def bits_per_frame(self) -> int:
        return sum(int(math.log2(s)) for s in self.codebook_sizes)

    @property
    def header_bytes(self) -> int:
        return _PREFIX.size + 2 * len(self.codebook_sizes) + _SUFFIX.size + _HASH_BYTES

    @property
    def payload_bytes(self) -> int:
        return (self.num_latent_frames * self.bits_per_frame + 7) // 8

    def pack(self) -> bytes:
        n = len(self.codebook_sizes)
        return (
            _PREFIX.pack(
                MAGIC, self.version, self.sample_rate, self.hop_length,
                self.fft_size, self.win_length, self.downsample_ratio, n,
            )
            + struct.pack(f"<{n}H", *self.codebook_sizes)
            + _SUFFIX.pack(self.num_latent_frames, self.original_num_samples)
            + self.model_hash
        )

    @classmethod
    def unpack(cls, data: bytes) -> tuple["BitstreamHeader", int]:
        """Parse a header from the front of data; returns (header, offset)."""
        if len(data) < _PREFIX.size:
            raise BitstreamError(f"truncated header: {len(data)} bytes")
        magic, version, sr, hop, fft, win, ds, n = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version}")
        need = _PREFIX.size + 2 * n + _SUFFIX.size + _HASH_BYTES
        if len(data) < need:
            raise BitstreamError(f"truncated header: {len(data)} < {need} bytes")
        sizes = struct.unpack_from(f"<{n}H", data, _PREFIX.size)
        frames, samples = _SUFFIX.unpack_from(data, _PREFIX.size + 2 * n)
        digest = data[need - _HASH_BYTES:need]
        header = cls(
            sample_rate=sr, hop_length=hop, fft_size=fft, win_length=win,
            downsample_ratio=ds, codebook_sizes=sizes,
            num_latent_frames=frames, original_num_samples=samples,
            model_hash=digest, version=version,
        )
        return header, need


class _BitWriter:
    def __init__(self):
        self.buf = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, value: int, width: int):
        self.acc |= value << self.nbits
        self.nbits += width
        while self.nbits >= 8:
            self.buf.append(self.acc & 0xFF)
            self.acc >>= 8
            self.nbits -= 8

    def getvalue(self) -> bytes:
        if self.nbits:
            self.buf.append(self.acc & 0xFF)
            self.acc = 0
            self.nbits = 0
        return bytes(self.buf)


class _BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.acc = 0
        self.nbits = 0

    def read(self, width: int) -> int:
        while self.nbits < width:
            if self.pos >= len(self.data):
                raise BitstreamError("truncated payload")
            self.acc |= self.data[self.pos] << self.nbits
            self.pos += 1
            self.nbits += 8
        value = self.acc & ((1 << width) - 1)
        self.acc >>= width
        self.nbits -= width
        return value

    def leftover_is_zero(self) -> bool:
        return self.acc == 0 and self.pos == len(self.data)


def pack_tokens(tokens, sizes) -> bytes:
    """Frame-major, stage-major, log2(size) bits per token, LSB-first."""
    t = tokens.detach().cpu().numpy() if torch.is_tensor(tokens) else np.asarray(tokens)
    sizes = tuple(int(s) for s in sizes)
    if t.ndim != 2 or t.shape[0] != len(sizes):
        raise BitstreamError(
            f"tokens must be [{len(sizes)} stages x frames], got shape {t.shape}"
        )
    if not np.issubdtype(t.dtype, np.integer):
        raise BitstreamError(f"tokens must be integers, got dtype {t.dtype}")
    widths = []
    for i, size in enumerate(sizes):
        if not _is_pow2(size):
            raise BitstreamError(f"codebook size {size} is not a power of two")
        bad = (t[i] < 0) | (t[i] >= size)
        if bad.any():
            value = int(t[i][bad][0])
            raise BitstreamError(f"token {value} out of range for stage {i} (size {size})")
        widths.append(int(math.log2(size)))
    writer = _BitWriter()
    for m in range(t.shape[1]):
        for i, width in enumerate(widths):
            writer.write(int(t[i, m]), width)
    return writer.getvalue()


def unpack_tokens(payload: bytes, sizes, num_frames: int) -> np.ndarray:
    """Inverse of pack_tokens; rejects truncation and nonzero padding bits."""
    sizes = tuple(int(s) for s in sizes)
    widths = [int(math.log2(s)) for s in sizes]
    reader = _BitReader(payload)
    out = np.zeros((len(sizes), num_frames), dtype=np.int64)
    for m in range(num_frames):
        for i, width in enumerate(widths):
            out[i, m] = reader.read(width)
    if not reader.leftover_is_zero():
        raise BitstreamError("payload has trailing data or nonzero padding bits")
    return out


@dataclass(frozen=True)
class Bitstream:
    header: BitstreamHeader
    payload: bytes

    def __post_init__(self):
        expected = self.header.payload_bytes
        if len(self.payload) != expected:
            raise BitstreamError(
                f"payload of {len(self.payload)} bytes does not match the "
                f"{expected} bytes implied by {self.header.num_latent_frames} frames"
            )

    def to_bytes(self) -> bytes:
        return self.header.pack() + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        header, offset = BitstreamHeader.unpack(data)
        return cls(header=header, payload=bytes(data[offset:]))

    def tokens(self) -> np.ndarray:
        return unpack_tokens(
            self.payload, self.header.codebook_sizes, self.header.num_latent_frames
        )


def write_bitstream(bitstream: Bitstream, path):
    Path(path).write_bytes(bitstream.to_bytes())


def read_bitstream(path) -> Bitstream:
    return Bitstream.from_bytes(Path(path).read_bytes())


def model_digest(model) -> bytes:
    """Truncated cryptographic hash of the model parameters."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.digest()[:_HASH_BYTES]


def bitrate(spec: CodebookSpec, sample_rate: int, hop_length: int, downsample_ratio: int) -> float:
    """bits per second = frame rate * bits per frame."""
    return sample_rate / (hop_length * downsample_ratio) * spec.bits_per_frame


def encode_file(wav_in, model, spec: CodebookSpec | None = None) -> Bitstream:
    """Analyze, quantize, and pack one WAV file.

    spec may name a prefix of the model's codebooks to encode at a lower
    bitrate; the header records the truncated ladder.
    """
    cfg = model.stft_config
    audio, _ = read_wav(wav_in, expected_sample_rate=cfg.sample_rate)
    full = model.quantizer.spec
    spec = spec or full
    n = len(spec.sizes)
    if spec.sizes != full.sizes[:n]:
        raise BitstreamError(
            f"codebook sizes {spec.sizes} are not a prefix of the model's {full.sizes}"
        )

    num_samples = len(audio)
    if num_samples == 0:
        tokens = np.zeros((n, 0), dtype=np.int64)
    else:
        x = audio
        if num_samples < cfg.win_length:
            # one analysis window minimum; the header crops decode output back
            x = np.pad(x, (0, cfg.win_length - num_samples))
        tokens = model.encode_tokens(torch.from_numpy(x), num_stages=n).numpy()

    header = BitstreamHeader(
        sample_rate=cfg.sample_rate,
        hop_length=cfg.hop_length,
        fft_size=cfg.fft_size,
        win_length=cfg.win_length,
        downsample_ratio=model.config.downsample_factor,
        codebook_sizes=spec.sizes,
        num_latent_frames=tokens.shape[1],
        original_num_samples=num_samples,
        model_hash=model_digest(model),
    )
    return Bitstream(header=header, payload=pack_tokens(tokens, spec.sizes))


def decode_file(bitstream: Bitstream, model, ignore_hash: bool = False) -> np.ndarray:
    """Unpack, dequantize, decode, and crop to the original length."""
    h = bitstream.header
    cfg = model.stft_config
    for name, got, want in (
        ("sample_rate", h.sample_rate, cfg.sample_rate),
        ("hop_length", h.hop_length, cfg.hop_length),
        ("fft_size", h.fft_size, cfg.fft_size),
        ("win_length", h.win_length, cfg.win_length),
        ("downsample_ratio", h.downsample_ratio, model.config.downsample_factor),
    ):
        if got != want:
            raise BitstreamError(f"stream {name} {got} does not match model {want}")
    full = model.quantizer.spec.sizes
    n = len(h.codebook_sizes)
    if h.codebook_sizes != full[:n]:
        raise BitstreamError(
            f"stream codebooks {h.codebook_sizes} are not a prefix of the model's {full}"
        )
    if not ignore_hash and h.model_hash != model_digest(model):
        raise BitstreamError(
            "model hash mismatch; decode with the matching checkpoint or override"
        )
    if h.num_latent_frames == 0:
        if h.original_num_samples != 0:
            raise BitstreamError("empty payload cannot carry samples")
        return np.zeros(0, dtype=np.float32)
    if h.original_num_samples == 0:
        raise BitstreamError("stream carries frames but zero samples")
    target = h.original_num_samples
    if target < cfg.win_length:
        # mirror the encoder's minimum-window padding before cropping back
        analysis = cfg.win_length
    else:
        analysis = target
    frames = cfg.num_frames(analysis)
    if -(-frames // h.downsample_ratio) != h.num_latent_frames:
        raise BitstreamError(
            f"{h.num_latent_frames} latent frames do not match "
            f"{h.original_num_samples} samples ({frames} analysis frames)"
        )
    tokens = bitstream.tokens()
    audio = model.decode_tokens(torch.from_numpy(tokens), num_samples=analysis)
    return audio.numpy()[:target].astype(np.float32, copy=False)
