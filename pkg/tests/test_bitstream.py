import math

import numpy as np
import pytest
import torch

from stftcodec.audio import write_wav
from stftcodec.bitstream import (
    Bitstream,
    BitstreamError,
    BitstreamHeader,
    bitrate,
    decode_file,
    encode_file,
    model_digest,
    pack_tokens,
    read_bitstream,
    unpack_tokens,
    write_bitstream,
)
from stftcodec.generator import CodecModel, GeneratorConfig
from stftcodec.quantizer import CodebookSpec
from stftcodec.spectral import StftConfig


# Independent bit-string oracle: stream position j is bit j; within a byte,
# bit 0 is the least significant.

def oracle_pack(tokens, sizes):
    bits = ""
    for m in range(tokens.shape[1]):
        for s, size in enumerate(sizes):
            width = int(math.log2(size))
            bits += format(int(tokens[s, m]), f"0{width}b")[::-1]
    out = bytearray()
    for i in range(0, len(bits), 8):
        chunk = bits[i:i + 8].ljust(8, "0")
        out.append(int(chunk[::-1], 2))
    return bytes(out)


def make_header(**overrides):
    base = dict(
        sample_rate=48000, hop_length=40, fft_size=1024, win_length=320,
        downsample_ratio=8, codebook_sizes=(1024,) * 8,
        num_latent_frames=150, original_num_samples=48000,
        model_hash=bytes(range(16)),
    )
    base.update(overrides)
    return BitstreamHeader(**base)


class TestHeader:
    def test_pack_unpack_round_trip(self):
        header = make_header(codebook_sizes=(4096, 256, 2), num_latent_frames=7,
                             original_num_samples=12345)
        data = header.pack()
        parsed, offset = BitstreamHeader.unpack(data)
        assert parsed == header
        assert offset == len(data)

    def test_header_length_law(self):
        for n in (1, 3, 8):
            header = make_header(codebook_sizes=(16,) * n)
            assert len(header.pack()) == 45 + 2 * n
            assert header.header_bytes == 45 + 2 * n

    def test_bad_magic_rejected(self):
        data = bytearray(make_header().pack())
        data[0] = ord("X")
        with pytest.raises(BitstreamError, match="magic"):
            BitstreamHeader.unpack(bytes(data))

    def test_unknown_version_rejected(self):
        data = bytearray(make_header().pack())
        data[4] = 99
        with pytest.raises(BitstreamError, match="version"):
            BitstreamHeader.unpack(bytes(data))

    def test_truncated_header_rejected(self):
        data = make_header().pack()
        for cut in (3, 10, len(data) - 1):
            with pytest.raises(BitstreamError, match="truncated"):
                BitstreamHeader.unpack(data[:cut])

    def test_non_power_of_two_size_rejected(self):
        with pytest.raises(BitstreamError, match="power of two"):
            make_header(codebook_sizes=(1000,))

    def test_hash_must_be_sixteen_bytes(self):
        with pytest.raises(BitstreamError, match="model_hash"):
            make_header(model_hash=b"short")

    def test_field_ranges(self):
        with pytest.raises(BitstreamError):
            make_header(hop_length=0)
        with pytest.raises(BitstreamError):
            make_header(hop_length=1 << 16)
        with pytest.raises(BitstreamError):
            make_header(codebook_sizes=())


class TestPacking:
    def test_matches_bit_oracle_small_case(self):
        sizes = (4, 16)
        tokens = np.array([[3, 0, 1], [15, 2, 9]])
        assert pack_tokens(tokens, sizes) == oracle_pack(tokens, sizes)

    def test_matches_bit_oracle_randomized(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 9))
            sizes = tuple(int(2 ** rng.integers(1, 9)) for _ in range(n))
            frames = int(rng.integers(0, 21))
            tokens = np.stack([rng.integers(0, s, size=frames) for s in sizes])
            packed = pack_tokens(tokens, sizes)
            assert packed == oracle_pack(tokens, sizes)
            assert np.array_equal(unpack_tokens(packed, sizes, frames), tokens)

    def test_payload_sizes_match_bitrate_table(self):
        tokens8 = np.zeros((8, 150), dtype=np.int64)
        assert len(pack_tokens(tokens8, (1024,) * 8)) == 1500
        tokens1 = np.zeros((1, 150), dtype=np.int64)
        assert len(pack_tokens(tokens1, (1024,))) == 188

    def test_out_of_range_token_rejected_at_pack(self):
        with pytest.raises(BitstreamError, match="out of range"):
            pack_tokens(np.array([[4]]), (4,))
        with pytest.raises(BitstreamError, match="out of range"):
            pack_tokens(np.array([[-1]]), (4,))

    def test_float_tokens_rejected(self):
        with pytest.raises(BitstreamError, match="integers"):
            pack_tokens(np.array([[1.0]]), (4,))

    def test_truncated_payload_rejected(self):
        sizes = (16, 16)
        tokens = np.ones((2, 5), dtype=np.int64)
        packed = pack_tokens(tokens, sizes)
        with pytest.raises(BitstreamError, match="truncated"):
            unpack_tokens(packed[:-1], sizes, 5)

    def test_nonzero_padding_rejected(self):
        sizes = (4,)
        tokens = np.zeros((1, 1), dtype=np.int64)
        packed = bytearray(pack_tokens(tokens, sizes))
        packed[0] |= 0x80  # a padding bit, above the 2 token bits
        with pytest.raises(BitstreamError, match="padding"):
            unpack_tokens(bytes(packed), sizes, 1)


class TestBitstreamContainer:
    def test_payload_length_validated(self):
        header = make_header(codebook_sizes=(1024,), num_latent_frames=150)
        good = bytes(188)
        Bitstream(header=header, payload=good)
        for bad in (bytes(187), bytes(189)):
            with pytest.raises(BitstreamError, match="payload"):
                Bitstream(header=header, payload=bad)

    def test_byte_round_trip(self):
        # 2 frames x 6 bits = 12 bits -> 2 payload bytes
        header = make_header(codebook_sizes=(16, 4), num_latent_frames=2)
        payload = bytes([0b10110001, 0b00000010])
        stream = Bitstream(header=header, payload=payload)
        again = Bitstream.from_bytes(stream.to_bytes())
        assert again.header == header
        assert again.payload == payload


SR = 16000
SMALL_STFT = StftConfig(fft_size=64, win_length=32, hop_length=8, sample_rate=SR)
SMALL_GEN = GeneratorConfig(
    freq_bins=33, mag_channels=16, phase_channels=8, grad_channels=8,
    latent_channels=32, convnext_blocks_enc=1, convnext_blocks_dec=1,
    decoder_head_channels=16,
)
SMALL_SPEC = CodebookSpec(sizes=(64, 16), code_dim=4, input_dim=32)


def small_model(seed=0):
    torch.manual_seed(seed)
    model = CodecModel(SMALL_STFT, SMALL_GEN, SMALL_SPEC)
    model.eval()
    return model


@pytest.fixture()
def tone_wav(tmp_path):
    t = np.arange(1000) / SR
    x = (0.4 * np.sin(2 * np.pi * 440.0 * t)).astype(np.float32)
    path = tmp_path / "tone.wav"
    write_wav(path, x, SR, subtype="float32")
    return path, x


class TestFileCodec:
    def test_encode_decode_restores_length_exactly(self, tone_wav):
        path, x = tone_wav
        model = small_model()
        stream = encode_file(path, model)
        out = decode_file(stream, model)
        assert out.shape == x.shape
        assert out.dtype == np.float32

    def test_tokens_survive_pack_unpack(self, tone_wav):
        path, x = tone_wav
        model = small_model()
        stream = encode_file(path, model)
        direct = model.encode_tokens(torch.from_numpy(x)).numpy()
        assert np.array_equal(stream.tokens(), direct)

    def test_header_records_model_geometry(self, tone_wav):
        path, _ = tone_wav
        model = small_model()
        h = encode_file(path, model).header
        assert h.sample_rate == SR
        assert h.hop_length == 8
        assert h.fft_size == 64
        assert h.win_length == 32
        assert h.downsample_ratio == 8
        assert h.codebook_sizes == (64, 16)
        assert h.original_num_samples == 1000
        assert h.num_latent_frames == -(-(-(-1000 // 8)) // 8)

    def test_file_round_trip_on_disk(self, tone_wav, tmp_path):
        path, _ = tone_wav
        model = small_model()
        stream = encode_file(path, model)
        out_path = tmp_path / "tone.stfc"
        write_bitstream(stream, out_path)
        again = read_bitstream(out_path)
        assert again.header == stream.header
        assert again.payload == stream.payload
        a = decode_file(stream, model)
        b = decode_file(again, model)
        assert np.array_equal(a, b)

    def test_truncated_ladder_prefix(self, tone_wav):
        path, x = tone_wav
        model = small_model()
        prefix = CodebookSpec(sizes=(64,), code_dim=4, input_dim=32)
        stream = encode_file(path, model, spec=prefix)
        assert stream.header.codebook_sizes == (64,)
        direct = model.encode_tokens(torch.from_numpy(x), num_stages=1).numpy()
        assert np.array_equal(stream.tokens(), direct)
        out = decode_file(stream, model)
        assert out.shape == x.shape

    def test_non_prefix_spec_rejected(self, tone_wav):
        path, _ = tone_wav
        model = small_model()
        other = CodebookSpec(sizes=(16,), code_dim=4, input_dim=32)
        with pytest.raises(BitstreamError, match="prefix"):
            encode_file(path, model, spec=other)

    def test_model_hash_mismatch_detected(self, tone_wav):
        path, _ = tone_wav
        model = small_model(seed=0)
        other = small_model(seed=1)
        assert model_digest(model) != model_digest(other)
        stream = encode_file(path, model)
        with pytest.raises(BitstreamError, match="hash"):
            decode_file(stream, other)
        out = decode_file(stream, other, ignore_hash=True)
        assert out.shape == (1000,)

    def test_geometry_mismatch_detected(self, tone_wav):
        path, _ = tone_wav
        model = small_model()
        stream = encode_file(path, model)
        torch.manual_seed(0)
        other = CodecModel(
            StftConfig(fft_size=64, win_length=32, hop_length=16, sample_rate=SR),
            SMALL_GEN, SMALL_SPEC,
        )
        with pytest.raises(BitstreamError, match="hop_length"):
            decode_file(stream, other)

    def test_short_file_padded_and_cropped(self, tmp_path):
        x = (0.1 * np.ones(10)).astype(np.float32)
        path = tmp_path / "blip.wav"
        write_wav(path, x, SR)
        model = small_model()
        stream = encode_file(path, model)
        assert stream.header.original_num_samples == 10
        out = decode_file(stream, model)
        assert out.shape == (10,)

    def test_empty_stream_round_trips_to_zero_samples(self):
        model = small_model()
        header = BitstreamHeader(
            sample_rate=SR, hop_length=8, fft_size=64, win_length=32,
            downsample_ratio=8, codebook_sizes=(64, 16),
            num_latent_frames=0, original_num_samples=0,
            model_hash=model_digest(model),
        )
        stream = Bitstream(header=header, payload=b"")
        out = decode_file(stream, model)
        assert out.shape == (0,)

    def test_empty_payload_with_samples_rejected(self):
        model = small_model()
        header = BitstreamHeader(
            sample_rate=SR, hop_length=8, fft_size=64, win_length=32,
            downsample_ratio=8, codebook_sizes=(64, 16),
            num_latent_frames=0, original_num_samples=100,
            model_hash=model_digest(model),
        )
        with pytest.raises(BitstreamError, match="empty payload"):
            decode_file(Bitstream(header=header, payload=b""), model)

    def test_payload_bit_flips_never_crash(self, tone_wav):
        path, x = tone_wav
        model = small_model()
        stream = encode_file(path, model)
        blob = bytearray(stream.to_bytes())
        offset = stream.header.header_bytes
        rng = np.random.default_rng(3)
        outcomes = {"ok": 0, "rejected": 0}
        for _ in range(60):
            flipped = bytearray(blob)
            pos = int(rng.integers(offset, len(blob)))
            flipped[pos] ^= 1 << int(rng.integers(8))
            try:
                out = decode_file(Bitstream.from_bytes(bytes(flipped)), model)
            except BitstreamError:
                outcomes["rejected"] += 1
            else:
                assert out.shape == x.shape
                outcomes["ok"] += 1
        assert outcomes["ok"] > 0


class TestBitrate:
    def test_ladder_operating_points(self):
        spec8 = CodebookSpec.uniform(8, 1024, input_dim=512)
        assert bitrate(spec8, 48000, 40, 8) == 12000.0
        assert bitrate(CodebookSpec.uniform(6, 1024, input_dim=512), 48000, 40, 8) == 9000.0
        assert bitrate(CodebookSpec.uniform(2, 1024, input_dim=512), 48000, 40, 8) == 3000.0
        assert bitrate(CodebookSpec.uniform(1, 1024, input_dim=512), 48000, 40, 8) == 1500.0

    def test_wider_hop_variant(self):
        spec8 = CodebookSpec.uniform(8, 1024, input_dim=512)
        assert bitrate(spec8, 48000, 80, 8) == 6000.0
