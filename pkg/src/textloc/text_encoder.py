"""Hint tokenization and the intra/inter hint encoders.

Token vectors come from a pluggable embedder: by default a trainable
table over the template vocabulary; :class:`StaticTokenEmbedding` accepts
externally produced per-token vectors instead.
"""
from __future__ import annotations

import re
from typing import Iterable, Sequence

import torch
from torch import Tensor, nn

from .attention import AttentionConfig, HTMBlock
from .scene_synth import DEFAULT_CLASSES, DEFAULT_COLORS, DIRECTIONS, HINT_TEMPLATE, ON_TOP_TEMPLATE

UNK = "<unk>"
_PUNCT = re.compile(r"[^\w\s-]")


def split_words(text: str) -> list[str]:
    """Lowercase, strip punctuation (intra-word hyphens survive), split on whitespace."""
    words = _PUNCT.sub(" ", text.lower()).split()
    return [w.strip("-") for w in words if w.strip("-")]


class Vocabulary:
    """Deterministic token -> id map; id 0 is reserved for unknown words."""

    def __init__(self, tokens: Iterable[str]):
        ordered = sorted(set(tokens) - {UNK})
        self.itos = [UNK] + ordered
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def from_templates(cls, colors: Sequence[str] = tuple(c for c, _ in DEFAULT_COLORS),
                       classes: Sequence[str] = DEFAULT_CLASSES,
                       directions: Sequence[str] = DIRECTIONS) -> "Vocabulary":
        words = set(split_words(HINT_TEMPLATE.format(direction="", color="", cls="")))
        words |= set(split_words(ON_TOP_TEMPLATE.format(color="", cls="")))
        for group in (colors, classes, directions):
            for item in group:
                words |= set(split_words(item))
        return cls(words)

    @property
    def unk_id(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self.itos)

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        vocab = cls(itos)
        if vocab.itos != list(itos):
            raise ValueError("vocabulary list is not in canonical order")
        return vocab

    def tokenize(self, text: str) -> list[int]:
        return [self.stoi.get(w, self.unk_id) for w in split_words(text)]


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(dim, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, (2 * (i // 2)) / dim)
    pe = torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))
    return pe.to(dtype)


class StaticTokenEmbedding(nn.Module):
    """Token vectors supplied from outside (e.g. a pretrained model), optionally frozen."""

    def __init__(self, vectors: Tensor, freeze: bool = True, out_dim: int | None = None):
        super().__init__()
        self.table = nn.Embedding.from_pretrained(vectors.clone(), freeze=freeze)
        in_dim = vectors.shape[1]
        self.adapter = nn.Identity() if out_dim in (None, in_dim) else nn.Linear(in_dim, out_dim)

    def forward(self, ids: Tensor) -> Tensor:
        return self.adapter(self.table(ids))


class HintEncoder(nn.Module):
    """Intra-hint HTM over token embeddings (+ sinusoidal positions), then
    an inter-hint HTM over the unordered hint set, L2-normalized."""

    def __init__(self, vocab: Vocabulary, cfg: AttentionConfig, embedder: nn.Module | None = None,
                 with_inter: bool = True):
        super().__init__()
        self.vocab = vocab
        self.dim = cfg.dim
        self.embed = embedder if embedder is not None else nn.Embedding(len(vocab), cfg.dim)
        self.intra = HTMBlock(cfg)
        self.inter = HTMBlock(cfg) if with_inter else None

    def token_ids(self, text: str) -> Tensor:
        return torch.tensor(self.vocab.tokenize(text), dtype=torch.long)

    def intra_encode(self, ids: Tensor) -> Tensor:
        if ids.numel() == 0:
            raise ValueError("cannot encode an empty token sequence")
        tokens = self.embed(ids)
        tokens = tokens + sinusoidal_positions(len(ids), self.dim, tokens.dtype)
        return self.intra(tokens)

    def intra_encode_many(self, id_lists: Sequence[Tensor]) -> Tensor:
        return torch.stack([self.intra_encode(ids) for ids in id_lists])

    def inter_encode(self, hint_vectors: Tensor) -> Tensor:
        if self.inter is None:
            raise RuntimeError("this encoder was built without the inter-hint block")
        pooled = self.inter(hint_vectors)
        return pooled / pooled.norm().clamp_min(1e-12)

    def hint_features(self, hints: Sequence[str]) -> Tensor:
        """Per-hint vectors ``(m, d)``."""
        if not hints:
            raise ValueError("at least one hint is required")
        return self.intra_encode_many([self.token_ids(h) for h in hints])

    def forward(self, hints: Sequence[str]) -> Tensor:
        """Unit-norm description feature."""
        return self.inter_encode(self.hint_features(hints))
