import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import module_fd_error

from textloc.attention import AttentionConfig
from textloc.text_encoder import (
    UNK,
    HintEncoder,
    StaticTokenEmbedding,
    Vocabulary,
    sinusoidal_positions,
    split_words,
)

VOCAB = Vocabulary.from_templates()
CFG = AttentionConfig(dim=8, heads=2, ffn_hidden=16)


def encoder(seed=0, **kw):
    torch.manual_seed(seed)
    return HintEncoder(VOCAB, CFG, **kw).eval()


class TestTokenize:
    def test_template_sentence(self):
        ids = VOCAB.tokenize("The pose is on east of a beige parking.")
        words = ["the", "pose", "is", "on", "east", "of", "a", "beige", "parking"]
        assert ids == [VOCAB.stoi[w] for w in words]
        assert VOCAB.unk_id not in ids

    def test_unknown_and_empty(self):
        assert VOCAB.tokenize("zebra") == [VOCAB.unk_id]
        assert VOCAB.tokenize("") == []
        assert VOCAB.itos[0] == UNK

    def test_case_and_punctuation(self):
        assert split_words("On-top, of A GREEN pole!") == ["on-top", "of", "a", "green", "pole"]
        assert VOCAB.tokenize("EAST!!") == VOCAB.tokenize("east")

    def test_deterministic_ordering_and_roundtrip(self):
        again = Vocabulary.from_templates()
        assert again.itos == VOCAB.itos
        assert Vocabulary.from_list(VOCAB.to_list()).stoi == VOCAB.stoi
        with pytest.raises(ValueError):
            Vocabulary.from_list(["zz", UNK])


def test_sinusoidal_positions():
    pe = sinusoidal_positions(3, 4, torch.float64)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert pe[1, 0].item() == pytest.approx(0.8414709848, abs=1e-9)
    assert pe[1, 2].item() == pytest.approx(0.01, abs=1e-6)


class TestIntra:
    def test_shape_any_length(self):
        enc = encoder()
        for n in (1, 2, 7):
            assert enc.intra_encode(torch.randint(0, len(VOCAB), (n,))).shape == (8,)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            encoder().intra_encode(torch.zeros(0, dtype=torch.long))
        with pytest.raises(ValueError):
            encoder()([])

    def test_determinism(self):
        enc = encoder()
        ids = enc.token_ids("The pose is on north of a red pole.")
        assert torch.equal(enc.intra_encode(ids), enc.intra_encode(ids.clone()))

    def test_token_order_matters(self):
        enc = encoder()
        ids = enc.token_ids("the pose is on north of a red pole")
        assert (enc.intra_encode(ids) - enc.intra_encode(ids.flip(0))).abs().max() > 1e-4


class TestInter:
    HINTS = ["The pose is on north of a red pole.", "The pose is on west of a gray building.",
             "The pose is on-top of a dark-green vegetation."]

    def test_unit_norm(self):
        f = encoder()(self.HINTS)
        assert abs(f.norm().item() - 1) <= 1e-6

    @settings(max_examples=12, deadline=None)
    @given(st.permutations(range(3)))
    def test_hint_order_invariance(self, perm):
        enc = encoder()
        with torch.no_grad():
            base = enc(self.HINTS)
            other = enc([self.HINTS[i] for i in perm])
        assert (base - other).abs().max() <= 1e-5

    def test_singleton(self):
        enc = encoder()
        with torch.no_grad():
            h = enc.hint_features(self.HINTS[:1])
            expect = enc.inter(h)
        assert torch.allclose(enc(self.HINTS[:1]), expect / expect.norm(), atol=1e-6)

    def test_without_inter(self):
        enc = encoder(with_inter=False)
        assert enc.hint_features(self.HINTS).shape == (3, 8)
        with pytest.raises(RuntimeError):
            enc(self.HINTS)


def test_static_embedding_slot():
    vectors = torch.randn(len(VOCAB), 5)
    emb = StaticTokenEmbedding(vectors, freeze=True, out_dim=8)
    enc = HintEncoder(VOCAB, CFG, embedder=emb)
    assert enc(TestInter.HINTS).shape == (8,)
    assert not emb.table.weight.requires_grad
    same = StaticTokenEmbedding(torch.randn(len(VOCAB), 8))
    assert isinstance(same.adapter, torch.nn.Identity)


class TestGradients:
    def test_intra(self):
        enc = encoder(1)
        ids = enc.token_ids("the pose is on east")

        def call(m, inputs):
            return m.intra_encode(ids) * torch.arange(1.0, 9.0, dtype=torch.float64)

        assert module_fd_error(enc, call, []) < 1e-4

    def test_inter(self):
        enc = encoder(2)

        def call(m, inputs):
            return m.inter_encode(inputs[0]) * torch.arange(1.0, 9.0, dtype=torch.float64)

        assert module_fd_error(enc, call, [torch.randn(3, 8)]) < 1e-4
