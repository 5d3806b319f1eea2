"""Structure and sanity checks for both discriminator families."""

import math

import pytest
import torch

from stftcodec.discriminators import (
    DiscriminatorEnsemble,
    DiscriminatorError,
    DiscriminatorOutput,
    MultiPeriodDiscriminator,
    MultiScaleSTFTDiscriminator,
)


def small_mpd():
    torch.manual_seed(0)
    return MultiPeriodDiscriminator(channels=(4, 8))


def small_msstft():
    torch.manual_seed(0)
    return MultiScaleSTFTDiscriminator(fft_sizes=(256, 128, 64), base_channels=4)


class TestMpd:
    def test_default_period_count_on_full_scale(self):
        torch.manual_seed(1)
        d = MultiPeriodDiscriminator()
        out = d(torch.randn(4096))
        assert len(out.logits) == 5
        assert len(out.feature_maps) == 5
        assert all(len(f) == 6 for f in out.feature_maps)

    def test_zero_audio_finite(self):
        d = small_mpd()
        out = d(torch.zeros(2, 500))
        assert all(torch.isfinite(l).all() for l in out.logits)
        assert all(torch.isfinite(t).all() for f in out.feature_maps for t in f)

    def test_determinism(self):
        d = small_mpd()
        x = torch.randn(1, 700)
        a, b = d(x), d(x)
        for la, lb in zip(a.logits, b.logits):
            assert torch.equal(la, lb)

    def test_too_short_rejected(self):
        d = small_mpd()
        with pytest.raises(DiscriminatorError, match="period"):
            d(torch.randn(7))

    def test_nonmultiple_length_padded(self):
        d = small_mpd()
        out = d(torch.randn(1, 701))  # 701 is prime vs all periods
        assert len(out.logits) == 5

    def test_shift_changes_logits(self):
        d = small_mpd()
        x = torch.randn(1, 600)
        shifted = torch.roll(x, 1, dims=-1)
        a, b = d(x), d(shifted)
        assert any(not torch.allclose(la, lb) for la, lb in zip(a.logits, b.logits))

    def test_weight_normalized(self):
        d = small_mpd()
        conv = d.subs[0].convs[0]
        names = [n for n, _ in conv.named_parameters()]
        assert any("parametrizations.weight" in n for n in names)


class TestMsStft:
    def test_default_resolution_count(self):
        torch.manual_seed(2)
        d = MultiScaleSTFTDiscriminator(base_channels=4)
        out = d(torch.randn(4096))
        assert len(out.logits) == 5
        assert all(len(f) == 6 for f in out.feature_maps)

    def test_hop_is_quarter_fft(self):
        d = small_msstft()
        assert [s.hop * 4 for s in d.subs] == [256, 128, 64]

    def test_zero_audio_finite(self):
        d = small_msstft()
        out = d(torch.zeros(1, 512))
        assert all(torch.isfinite(l).all() for l in out.logits)

    def test_too_short_rejected(self):
        d = small_msstft()
        with pytest.raises(DiscriminatorError, match="FFT"):
            d(torch.randn(100))

    def test_single_scale_variant(self):
        torch.manual_seed(3)
        d = MultiScaleSTFTDiscriminator(fft_sizes=(1024,), base_channels=4)
        out = d(torch.randn(2048))
        assert len(out.logits) == 1

    def test_band_content_changes_logits(self):
        d = small_msstft()
        g = torch.Generator().manual_seed(4)
        base = torch.randn(1, 1024, generator=g)
        # superimpose a high-frequency tone; every resolution must react
        n = torch.arange(1024, dtype=torch.float32)
        probe = base + 0.5 * torch.sin(math.pi * 0.9 * n)
        a, b = d(base), d(probe)
        for la, lb in zip(a.logits, b.logits):
            assert not torch.allclose(la, lb)

    def test_determinism(self):
        d = small_msstft()
        x = torch.randn(1, 700)
        a, b = d(x), d(x)
        for la, lb in zip(a.logits, b.logits):
            assert torch.equal(la, lb)


class TestEnsemble:
    def test_concatenated_outputs(self):
        torch.manual_seed(5)
        d = DiscriminatorEnsemble(
            mpd_channels=(4, 8), fft_sizes=(256, 128), stft_channels=4
        )
        assert d.num_sub_discriminators == 7
        out = d(torch.randn(1, 600))
        assert isinstance(out, DiscriminatorOutput)
        assert len(out.logits) == 7
        assert len(out.feature_maps) == 7

    def test_output_count_mismatch_rejected(self):
        with pytest.raises(DiscriminatorError):
            DiscriminatorOutput(logits=[torch.zeros(1)], feature_maps=[])
