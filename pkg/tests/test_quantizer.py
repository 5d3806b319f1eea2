"""Quantizer tests against a brute-force all-codeword oracle."""

import math

import numpy as np
import pytest
import torch

from stftcodec.quantizer import (
    CodebookSpec,
    QuantizerError,
    ResidualVectorQuantizer,
    StageUtilization,
    utilization_stats,
)


def oracle_quantize(latent_col, in_ws, out_ws, books):
    """Scalar-loop RVQ of one frame: normalize, scan all codewords, subtract."""
    residual = latent_col.astype(np.float64).copy()
    acc = np.zeros_like(residual)
    tokens = []
    for w_in, w_out, book in zip(in_ws, out_ws, books):
        z = w_in @ residual
        zn = z / max(np.linalg.norm(z), 1e-12)
        best_j, best_d = None, np.inf
        for j in range(book.shape[0]):
            c = book[j] / max(np.linalg.norm(book[j]), 1e-12)
            d = float(np.sum((zn - c) ** 2))
            if d < best_d:
                best_j, best_d = j, d
        out = w_out @ book[best_j]
        residual = residual - out
        acc = acc + out
        tokens.append(best_j)
    return tokens, acc


class TestCodebookSpec:
    def test_defaults(self):
        spec = CodebookSpec()
        assert spec.sizes == (1024,) * 8
        assert spec.num_codebooks == 8
        assert spec.code_dim == 8 and spec.input_dim == 512
        assert spec.bits_per_frame == 80

    def test_variable_ladder_bit_budget(self):
        spec = CodebookSpec.variable_ladder()
        assert spec.sizes == (4096, 4096, 256, 256, 1024, 1024, 1024, 1024)
        assert spec.bits_per_frame == 80 == 10 * spec.num_codebooks

    def test_uniform_constructor(self):
        spec = CodebookSpec.uniform(num_codebooks=4, size=1024)
        assert spec.bits_per_frame == 40

    def test_rejects_bad_sizes(self):
        with pytest.raises(QuantizerError):
            CodebookSpec(sizes=(1000,))  # not a power of two
        with pytest.raises(QuantizerError):
            CodebookSpec(sizes=(1,))
        with pytest.raises(QuantizerError):
            CodebookSpec(sizes=(131072,))  # exceeds u16
        with pytest.raises(QuantizerError):
            CodebookSpec(sizes=(1024,) * 9)
        with pytest.raises(QuantizerError):
            CodebookSpec(sizes=())
        with pytest.raises(QuantizerError):
            CodebookSpec(sizes=(64,), code_dim=16, input_dim=8)


class TestQuantize:
    def _small(self, seed=0):
        torch.manual_seed(seed)
        spec = CodebookSpec(sizes=(16, 256, 64), code_dim=4, input_dim=32)
        return ResidualVectorQuantizer(spec).double()

    def test_matches_brute_force_oracle(self):
        q = self._small(seed=1)
        in_ws = [p.weight.detach().numpy() for p in q.in_projs]
        out_ws = [p.weight.detach().numpy() for p in q.out_projs]
        books = [b.detach().numpy() for b in q.codebooks]
        rng = np.random.default_rng(2)
        latent = rng.standard_normal((32, 20))
        res = q.quantize(torch.from_numpy(latent))
        for m in range(20):
            tokens, acc = oracle_quantize(latent[:, m], in_ws, out_ws, books)
            assert res.tokens[:, m].tolist() == tokens
            assert np.max(np.abs(res.quantized[:, m].detach().numpy() - acc)) < 1e-10

    def test_monotone_residual_refinement(self):
        torch.manual_seed(3)
        q = ResidualVectorQuantizer().double()
        latent = torch.randn(512, 2000, dtype=torch.float64)
        res = q.quantize(latent)
        norms = res.per_stage_residual_norm
        assert len(norms) == 8
        for a, b in zip(norms, norms[1:]):
            assert b <= a

    def test_one_stage_fixed_point(self):
        q = self._small(seed=4)
        with torch.no_grad():
            col = q.out_projs[0](q.codebooks[0][7]).reshape(32, 1)
        res = q.quantize(col, num_stages=1)
        assert res.tokens.flatten().item() == 7
        assert res.per_stage_residual_norm[0] < 1e-5

    def test_dequantize_matches_quantized_exactly(self):
        q = self._small(seed=5)
        latent = torch.randn(32, 17, dtype=torch.float64)
        res = q.quantize(latent)
        rebuilt = q.dequantize(res.tokens)
        assert torch.equal(rebuilt, res.quantized.detach())

    def test_determinism(self):
        q = self._small(seed=6)
        latent = torch.randn(32, 9, dtype=torch.float64)
        a = q.quantize(latent)
        b = q.quantize(latent)
        assert torch.equal(a.tokens, b.tokens)
        assert torch.equal(a.quantized, b.quantized)

    def test_positive_scale_argmin_invariance(self):
        q = self._small(seed=7)
        latent = torch.randn(32, 25, dtype=torch.float64)
        base = q.quantize(latent, num_stages=1).tokens
        for scale in (1e-3, 0.5, 3.7, 250.0):
            assert torch.equal(q.quantize(latent * scale, num_stages=1).tokens, base)

    def test_token_ranges_and_shapes(self):
        q = self._small(seed=8)
        latent = torch.randn(2, 32, 11, dtype=torch.float64)
        res = q.quantize(latent)
        assert res.tokens.shape == (2, 3, 11)
        assert res.quantized.shape == (2, 32, 11)
        for i, size in enumerate((16, 256, 64)):
            stage = res.tokens[:, i, :]
            assert stage.min().item() >= 0 and stage.max().item() < size

    def test_batched_consistent_with_single(self):
        q = self._small(seed=9)
        latent = torch.randn(3, 32, 7, dtype=torch.float64)
        batched = q.quantize(latent)
        for i in range(3):
            single = q.quantize(latent[i])
            assert torch.equal(batched.tokens[i], single.tokens)
            assert torch.allclose(batched.quantized[i], single.quantized, atol=1e-12)

    def test_truncated_stages(self):
        q = self._small(seed=10)
        latent = torch.randn(32, 13, dtype=torch.float64)
        res = q.quantize(latent, num_stages=2)
        assert res.tokens.shape == (2, 13)
        assert len(res.per_stage_residual_norm) == 2
        full = q.quantize(latent)
        assert torch.equal(res.tokens, full.tokens[:2])
        assert torch.equal(q.dequantize(res.tokens), res.quantized.detach())

    def test_errors(self):
        q = self._small(seed=11)
        with pytest.raises(QuantizerError, match="zero frames"):
            q.quantize(torch.zeros(32, 0, dtype=torch.float64))
        with pytest.raises(QuantizerError):
            q.quantize(torch.zeros(31, 4, dtype=torch.float64))
        with pytest.raises(QuantizerError):
            q.quantize(torch.zeros(32, 4, dtype=torch.float64), num_stages=0)
        with pytest.raises(QuantizerError):
            q.quantize(torch.zeros(32, 4, dtype=torch.float64), num_stages=4)


class TestStraightThrough:
    def test_forward_value_and_identity_gradient(self):
        torch.manual_seed(12)
        spec = CodebookSpec(sizes=(32, 32), code_dim=4, input_dim=16)
        q = ResidualVectorQuantizer(spec).double()
        latent = torch.randn(16, 10, dtype=torch.float64, requires_grad=True)
        res = q.quantize(latent)
        g = torch.randn_like(res.quantized)
        (res.quantized * g).sum().backward()
        assert torch.allclose(latent.grad, g, atol=0, rtol=0)

    def test_vq_loss_has_no_encoder_gradient(self):
        torch.manual_seed(13)
        spec = CodebookSpec(sizes=(32,), code_dim=4, input_dim=16)
        q = ResidualVectorQuantizer(spec).double()
        latent = torch.randn(16, 6, dtype=torch.float64, requires_grad=True)
        res = q.quantize(latent)
        grads = torch.autograd.grad(res.vq_loss, latent, allow_unused=True)
        assert grads[0] is None or torch.equal(grads[0], torch.zeros_like(latent))
        book_grad = torch.autograd.grad(
            q.quantize(latent).vq_loss, q.codebooks[0], allow_unused=True
        )[0]
        assert book_grad is not None and book_grad.abs().sum() > 0

    def test_commit_loss_has_no_codebook_gradient(self):
        torch.manual_seed(14)
        spec = CodebookSpec(sizes=(32,), code_dim=4, input_dim=16)
        q = ResidualVectorQuantizer(spec).double()
        latent = torch.randn(16, 6, dtype=torch.float64, requires_grad=True)
        res = q.quantize(latent)
        grads = torch.autograd.grad(res.commit_loss, q.codebooks[0], allow_unused=True)
        assert grads[0] is None or torch.equal(grads[0], torch.zeros_like(q.codebooks[0]))
        enc_grad = torch.autograd.grad(q.quantize(latent).commit_loss, latent)[0]
        assert enc_grad.abs().sum() > 0


class TestDequantizeErrors:
    def _q(self):
        torch.manual_seed(15)
        return ResidualVectorQuantizer(CodebookSpec(sizes=(16, 64), code_dim=4, input_dim=8))

    def test_out_of_range_token(self):
        q = self._q()
        bad = torch.tensor([[0, 1], [64, 0]])
        with pytest.raises(QuantizerError, match="out of range"):
            q.dequantize(bad)
        with pytest.raises(QuantizerError, match="out of range"):
            q.dequantize(torch.tensor([[16, 0], [0, 0]]))
        with pytest.raises(QuantizerError):
            q.dequantize(torch.tensor([[-1, 0], [0, 0]]))

    def test_all_zero_tokens_deterministic(self):
        q = self._q().double()
        t = torch.zeros(2, 5, dtype=torch.long)
        with torch.no_grad():
            want = (
                q.out_projs[0](q.codebooks[0][0]) + q.out_projs[1](q.codebooks[1][0])
            ).reshape(8, 1).expand(8, 5)
            got = q.dequantize(t)
        assert torch.allclose(got, want, atol=1e-12)

    def test_rejects_float_and_extra_stage_tokens(self):
        q = self._q()
        with pytest.raises(QuantizerError):
            q.dequantize(torch.zeros(2, 5))
        with pytest.raises(QuantizerError):
            q.dequantize(torch.zeros(3, 5, dtype=torch.long))
        with pytest.raises(QuantizerError):
            q.dequantize(torch.zeros(2, 0, dtype=torch.long))


class TestUtilization:
    def test_uniform_tokens_near_full(self):
        g = torch.Generator().manual_seed(16)
        tokens = torch.randint(0, 1024, (1, 60000), generator=g)
        (s,) = utilization_stats(tokens, sizes=[1024])
        assert s.fraction > 0.99
        assert abs(s.perplexity - 1024) / 1024 < 0.05

    def test_constant_tokens(self):
        tokens = torch.full((1, 500), 7, dtype=torch.long)
        (s,) = utilization_stats(tokens, sizes=[1024])
        assert s.fraction == 1 / 1024
        assert abs(s.perplexity - 1.0) < 1e-9

    def test_history_blocks_pooled(self):
        blocks = [torch.zeros(2, 10, dtype=torch.long), torch.ones(2, 10, dtype=torch.long)]
        stats = utilization_stats(blocks, sizes=[16, 16])
        assert isinstance(stats[0], StageUtilization)
        assert stats[0].fraction == 2 / 16
        assert abs(stats[0].perplexity - 2.0) < 1e-9

    def test_empty_history_rejected(self):
        with pytest.raises(QuantizerError):
            utilization_stats([], sizes=[16])
        with pytest.raises(QuantizerError):
            utilization_stats(torch.zeros(1, 0, dtype=torch.long), sizes=[16])


def test_non_finite_latent_rejected():
    from stftcodec.quantizer import CodebookSpec, QuantizerError, ResidualVectorQuantizer

    torch.manual_seed(0)
    rvq = ResidualVectorQuantizer(CodebookSpec(sizes=(16,), code_dim=4, input_dim=8))
    bad = torch.randn(8, 5)
    bad[3, 2] = float("nan")
    with pytest.raises(QuantizerError, match="non-finite"):
        rvq.quantize(bad)
