import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import module_fd_error
from torch import nn

from textloc.attention import (
    HTMBlock,
    MHSA,
    AttentionConfig,
    MaskedCrossAttention,
    RelPosEmbedder,
    RowColRPA,
    RPCAFusion,
    VARIANTS,
    attention_weights,
    displacement_tensor,
)
from textloc.errors import NumericError

SMALL = AttentionConfig(dim=8, heads=2, ffn_hidden=12)
FD_TOL = 1e-4


def _gelu(h: float) -> float:
    return 0.5 * h * (1.0 + math.erf(h / math.sqrt(2.0)))


def _set_linear(lin: nn.Linear, w: float) -> None:
    with torch.no_grad():
        lin.weight.fill_(w)
        if lin.bias is not None:
            lin.bias.zero_()


def _unit(module: nn.Module, value_scale: float = 1.0) -> nn.Module:
    """All linear maps set to scalar identity; the value projections get ``value_scale``."""
    for name, m in module.named_modules():
        if isinstance(m, nn.Linear):
            _set_linear(m, value_scale if name.endswith("v_proj") else 1.0)
    return module


class TestConfig:
    def test_key_dim(self):
        assert AttentionConfig(dim=128, heads=4).key_dim == 32

    @pytest.mark.parametrize("kw", [dict(dim=10, heads=4), dict(dim=0), dict(variant="diag")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AttentionConfig(**kw)


class TestSoftmax:
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one(self, nq, nk, seed):
        g = torch.Generator().manual_seed(seed)
        q, k = torch.randn(nq, 8, generator=g), torch.randn(nk, 8, generator=g)
        mask = torch.rand(nq, nk, generator=g) > 0.5
        for m in (None, mask):
            w = attention_weights(q, k, 2, m)
            assert torch.allclose(w.sum(-1), torch.ones(2, nq), atol=1e-6)

    def test_masked_entry_is_exactly_zero(self):
        q, k = torch.randn(3, 8), torch.randn(4, 8)
        mask = torch.ones(3, 4, dtype=torch.bool)
        mask[:, 2] = False
        w = attention_weights(q, k, 2, mask)
        assert (w[:, :, 2] == 0).all()


class TestMHSA:
    def test_singleton_is_value_projection(self):
        m = MHSA(SMALL)
        x = torch.randn(1, 8)
        expect = m.attn.out_proj(m.attn.v_proj(x))
        assert torch.allclose(m(x), expect, atol=1e-6)

    def test_permutation_equivariance(self):
        m = MHSA(SMALL)
        x = torch.randn(5, 8)
        perm = torch.randperm(5)
        assert torch.allclose(m(x)[perm], m(x[perm]), atol=1e-6)

    def test_scalar_example(self):
        m = _unit(MHSA(AttentionConfig(dim=1, heads=1, ffn_hidden=1)))
        out = m(torch.tensor([[0.0], [1.0]]))
        assert out[0, 0].item() == pytest.approx(0.5, abs=1e-7)
        w1 = math.exp(1) / (1 + math.exp(1))
        assert out[1, 0].item() == pytest.approx(w1, abs=1e-7)

    def test_non_finite_input(self):
        with pytest.raises(NumericError):
            MHSA(SMALL)(torch.full((2, 8), float("nan")))

    def test_gradients(self):
        x = torch.randn(4, 8)
        err = module_fd_error(MHSA(SMALL), lambda m, t: m(t[0]), [x])
        assert err < FD_TOL


class TestMaskedCrossAttention:
    def setup_method(self):
        self.m = MaskedCrossAttention(SMALL)
        self.q, self.k, self.v = torch.randn(3, 8), torch.randn(4, 8), torch.randn(4, 8)

    def test_all_true_equals_unmasked(self):
        full = torch.ones(3, 4, dtype=torch.bool)
        assert torch.allclose(self.m(self.q, self.k, self.v, full), self.m(self.q, self.k, self.v), atol=1e-6)

    def test_all_false_row_falls_back(self):
        mask = torch.rand(3, 4) > 0.3
        mask[1] = False
        out = self.m(self.q, self.k, self.v, mask)
        assert torch.allclose(out[1], self.m(self.q, self.k, self.v)[1], atol=1e-6)

    def test_excluded_column_has_no_influence(self):
        mask = torch.ones(3, 4, dtype=torch.bool)
        mask[:, 3] = False
        v2 = self.v.clone()
        v2[3] += 100.0
        k2 = self.k.clone()
        k2[3] -= 50.0
        assert torch.allclose(self.m(self.q, self.k, self.v, mask), self.m(self.q, k2, v2, mask), atol=1e-6)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            self.m(self.q, self.k, self.v, torch.ones(2, 4, dtype=torch.bool))
        with pytest.raises(ValueError):
            self.m(self.q, self.k, self.v[:3])

    def test_gradients(self):
        mask = torch.tensor([[1, 0, 1, 1], [0, 0, 0, 0], [1, 1, 0, 1]], dtype=torch.bool)
        err = module_fd_error(self.m, lambda m, t: m(t[0], t[1], t[2], mask), [self.q, self.k, self.v])
        assert err < FD_TOL


class TestRelPos:
    def test_zero_and_linearity(self):
        e = RelPosEmbedder(8)
        assert torch.equal(e(torch.zeros(3, 3, 2)), torch.zeros(3, 3, 8))
        d = torch.randn(3, 3, 2)
        assert torch.allclose(e(2 * d), 2 * e(d), atol=1e-6)

    def test_identity_example(self):
        e = RelPosEmbedder(2)
        with torch.no_grad():
            e.proj.weight.copy_(torch.eye(2))
        D = displacement_tensor(torch.tensor([[3.0, 4.0, 0.0], [0.0, 0.0, 0.0]]))
        assert e(D)[0, 1].tolist() == [3.0, 4.0]
        assert e(D)[0, 0].tolist() == [0.0, 0.0]


class TestRowColRPA:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_gradients(self, variant):
        m = RowColRPA(SMALL.with_variant(variant))
        x, c = torch.randn(4, 8), torch.randn(4, 3) * 5
        err = module_fd_error(m, lambda mod, t: mod(t[0], t[1]), [x, c])
        assert err < FD_TOL

    def test_coincident_centers_reduce_to_naive(self):
        torch.manual_seed(3)
        rc = RowColRPA(SMALL.with_variant("rowcol"))
        nv = RowColRPA(SMALL.with_variant("naive"))
        nv.load_state_dict(rc.state_dict())
        x = torch.randn(5, 8)
        c = torch.tensor([[2.0, -1.0, 0.3]]).repeat(5, 1)
        assert (rc(x, c) - nv(x)).abs().max() <= 1e-6

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_translation_invariance(self, variant):
        m = RowColRPA(SMALL.with_variant(variant))
        x, c = torch.randn(5, 8), torch.randn(5, 3)
        shift = torch.tensor([13.0, -7.5, 2.0])
        assert (m(x, c) - m(x, c + shift)).abs().max() <= 1e-5

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_permutation_equivariance(self, variant):
        m = RowColRPA(SMALL.with_variant(variant))
        x, c = torch.randn(5, 8), torch.randn(5, 3)
        perm = torch.randperm(5)
        assert (m(x, c)[perm] - m(x[perm], c[perm])).abs().max() <= 1e-5

    @pytest.mark.parametrize("variant", ["value", "row", "rowcol"])
    def test_missing_centers(self, variant):
        with pytest.raises(ValueError):
            RowColRPA(SMALL.with_variant(variant))(torch.randn(2, 8))

    def test_variants_differ(self):
        torch.manual_seed(0)
        base = RowColRPA(SMALL)
        x, c = torch.randn(4, 8), torch.randn(4, 3)
        outs = {}
        for v in VARIANTS:
            m = RowColRPA(SMALL.with_variant(v))
            m.load_state_dict(base.state_dict())
            outs[v] = m(x, c)
        for a in VARIANTS:
            for b in VARIANTS:
                if a < b:
                    assert not torch.allclose(outs[a], outs[b])

    def test_scalar_oracle(self):
        cfg = AttentionConfig(dim=1, heads=1, ffn_hidden=1, variant="rowcol", layer_norm=False)
        m = _unit(RowColRPA(cfg))
        a, b = 0.3, -0.2
        with torch.no_grad():
            m.rel.proj.weight.copy_(torch.tensor([[a, b]]))
        x = [0.4, -1.1]
        c = [(1.0, 2.0), (-2.0, 0.5)]
        R = [[a * (c[i][0] - c[j][0]) + b * (c[i][1] - c[j][1]) for j in range(2)] for i in range(2)]
        q = [x[j] + (R[0][j] + R[1][j]) / 2 for j in range(2)]
        k = [x[i] + (R[i][0] + R[i][1]) / 2 for i in range(2)]
        expect = []
        for i in range(2):
            logits = [q[i] * k[j] for j in range(2)]
            z = sum(math.exp(v) for v in logits)
            att = sum(math.exp(logits[j]) / z * x[j] for j in range(2))
            h = x[i] + att
            expect.append(h + _gelu(h))
        got = m.double()(torch.tensor([[v] for v in x], dtype=torch.float64),
                         torch.tensor([[u, v, 0.0] for u, v in c], dtype=torch.float64))
        assert got[:, 0].tolist() == pytest.approx(expect, abs=1e-6)


class TestHTM:
    def test_singleton(self):
        m = HTMBlock(SMALL)
        x = torch.randn(1, 8)
        assert torch.allclose(m(x), m.tokens(x)[0], atol=1e-7)

    def test_permutation_invariance_and_shape(self):
        m = HTMBlock(SMALL)
        for n in (1, 3, 7):
            x = torch.randn(n, 8)
            assert m(x).shape == (8,)
            assert (m(x) - m(x[torch.randperm(n)])).abs().max() <= 1e-5

    def test_definition(self):
        cfg = AttentionConfig(dim=1, heads=1, ffn_hidden=1, layer_norm=False)
        m = _unit(HTMBlock(cfg))
        x = [0.2, 1.5, -0.7]
        outs = []
        for i in range(3):
            logits = [x[i] * x[j] for j in range(3)]
            z = sum(math.exp(v) for v in logits)
            f = x[i] + sum(math.exp(logits[j]) / z * x[j] for j in range(3))
            outs.append(f + _gelu(f))
        assert m(torch.tensor([[v] for v in x])).item() == pytest.approx(max(outs), abs=1e-6)

    def test_gradients(self):
        err = module_fd_error(HTMBlock(SMALL), lambda m, t: m(t[0]), [torch.randn(4, 8)])
        assert err < FD_TOL


class TestRPCA:
    def test_gradients(self):
        m = RPCAFusion(SMALL)
        inputs = [torch.randn(4, 8), torch.randn(4, 3) * 3, torch.randn(3, 8)]
        err = module_fd_error(m, lambda mod, t: mod(t[0], t[1], t[2]), inputs)
        assert err < FD_TOL

    def test_instance_permutation_and_translation(self):
        m = RPCAFusion(SMALL)
        x, c, h = torch.randn(6, 8), torch.randn(6, 3) * 4, torch.randn(3, 8)
        base = m(x, c, h)
        perm = torch.randperm(6)
        assert (base - m(x[perm], c[perm], h)).abs().max() <= 1e-5
        assert (base - m(x, c + torch.tensor([40.0, -3.0, 1.0]), h)).abs().max() <= 1e-5
        assert (base - m(x, c, h[torch.randperm(3)])).abs().max() <= 1e-5
        assert base.shape == (8,)

    def test_missing_inputs(self):
        m = RPCAFusion(SMALL)
        with pytest.raises(ValueError):
            m(torch.randn(2, 8), None, torch.randn(1, 8))
        with pytest.raises(ValueError):
            m(torch.randn(2, 8), torch.randn(2, 3), torch.randn(0, 8))

    def test_scalar_trace(self):
        cfg = AttentionConfig(dim=1, heads=1, ffn_hidden=1, layer_norm=False)
        m = _unit(RPCAFusion(cfg)).double()
        scales = {"rpa1": 2.0, "rpca": 3.0, "rpa2": 0.5, "cross1": -1.0, "cross2": 1.5}
        for name, s in scales.items():
            _set_linear(getattr(m, name).attn.v_proj if name.startswith("rpa")
                        else getattr(m, name).attn.attn.v_proj, s)
        _set_linear(m.text_value, 0.7)
        x, t = 0.6, -0.4
        f = lambda h: h + _gelu(h)  # noqa: E731  residual FFN with unit weights
        p1 = f(x + 2.0 * x)
        fused = f(p1 + 3.0 * (0.7 * t))
        p2 = f(fused + 0.5 * fused)
        t1 = f(t + -1.0 * p1)
        t2 = f(t1 + 1.5 * p2)
        got = m(torch.tensor([[x]], dtype=torch.float64), torch.tensor([[1.0, 2.0, 0.0]], dtype=torch.float64),
                torch.tensor([[t]], dtype=torch.float64))
        assert got.item() == pytest.approx(t2, abs=1e-6)
