"""Attention building blocks.

All blocks operate on unbatched token matrices of shape ``(n, d)``. Cells
carry a variable number of instances, so batching happens one level up by
looping over cells.

Relative-position variants (``AttentionConfig.variant``):

``naive``
    plain multi-head self-attention.
``value``
    the value matrix is augmented with the column-pooled relation embedding.
``row``
    only the query matrix is augmented with the row-pooled relation embedding.
``rowcol``
    query augmented with ``mean(R, dim=0)``, key with ``mean(R, dim=1)``.

where ``R[i, j] = W_r (c_i - c_j)`` embeds horizontal center displacements.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import NumericError

VARIANTS = ("naive", "value", "row", "rowcol")


@dataclass(frozen=True)
class AttentionConfig:
    dim: int = 128
    heads: int = 4
    ffn_hidden: int = 256
    variant: str = "rowcol"
    layer_norm: bool = True

    def __post_init__(self):
        if self.dim < 1 or self.heads < 1 or self.ffn_hidden < 1:
            raise ValueError("attention dims must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def key_dim(self) -> int:
        return self.dim // self.heads

    def with_variant(self, variant: str) -> "AttentionConfig":
        return AttentionConfig(self.dim, self.heads, self.ffn_hidden, variant, self.layer_norm)


def _check_finite(*tensors: Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite values in attention input")


def _norm(cfg: AttentionConfig) -> nn.Module:
    return nn.LayerNorm(cfg.dim) if cfg.layer_norm else nn.Identity()


def attention_weights(q: Tensor, k: Tensor, heads: int, mask: Tensor | None = None) -> Tensor:
    """Softmax attention weights, shape ``(heads, nq, nk)``.

    ``mask`` is ``(nq, nk)`` with True meaning "may attend". Masked entries
    receive weight exactly zero; a row with no True entry falls back to
    unmasked attention.
    """
    nq, d = q.shape
    nk = k.shape[0]
    dk = d // heads
    qh = q.reshape(nq, heads, dk).transpose(0, 1)
    kh = k.reshape(nk, heads, dk).transpose(0, 1)
    logits = qh @ kh.transpose(1, 2) / math.sqrt(dk)
    if mask is not None:
        if mask.shape != (nq, nk):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match ({nq}, {nk})")
        empty = ~mask.any(dim=1, keepdim=True)
        allowed = mask | empty
        logits = logits.masked_fill(~allowed.unsqueeze(0), float("-inf"))
    return torch.softmax(logits, dim=-1)


class MultiHeadAttention(nn.Module):
    """Projections + scaled dot-product attention, without residual.

    ``q_extra``/``k_extra``/``v_extra`` are added to the projected Q/K/V
    before the heads are split; the relative-position variants use them.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, mask: Tensor | None = None,
                q_extra: Tensor | None = None, k_extra: Tensor | None = None,
                v_extra: Tensor | None = None) -> Tensor:
        if key.shape[0] != value.shape[0]:
            raise ValueError("key and value must have the same number of rows")
        if query.shape[-1] != self.cfg.dim or key.shape[-1] != self.cfg.dim:
            raise ValueError(f"expected feature dim {self.cfg.dim}")
        q, k, v = self.q_proj(query), self.k_proj(key), self.v_proj(value)
        if q_extra is not None:
            q = q + q_extra
        if k_extra is not None:
            k = k + k_extra
        if v_extra is not None:
            v = v + v_extra
        w = attention_weights(q, k, self.cfg.heads, mask)
        nk, d = v.shape
        vh = v.reshape(nk, self.cfg.heads, d // self.cfg.heads).transpose(0, 1)
        out = (w @ vh).transpose(0, 1).reshape(query.shape[0], d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class MHSA(nn.Module):
    """Multi-head self-attention; callers add the residual."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg)

    def forward(self, x: Tensor) -> Tensor:
        _check_finite(x)
        return self.attn(x, x, x)


class MaskedCrossAttention(nn.Module):
    """Multi-head cross-attention restricted by a boolean ``(q, v)`` mask; no residual."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
        _check_finite(q, k, v)
        return self.attn(q, k, v, mask=mask)


class RelPosEmbedder(nn.Module):
    """Bias-free linear map from 2D displacements to ``dim``-d embeddings."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(2, dim, bias=False)

    def forward(self, displacements: Tensor) -> Tensor:
        return self.proj(displacements)


def displacement_tensor(centers: Tensor) -> Tensor:
    """``D[i, j] = (c_i - c_j)[:2]`` for an ``(n, 3)`` (or ``(n, 2)``) center tensor."""
    c = centers[:, :2]
    return c[:, None, :] - c[None, :, :]


class RowColRPA(nn.Module):
    """Self-attention block with pooled relative-position terms.

    ``x -> x + Attn(LN(x)) -> h + FFN(LN(h))``; the attention receives the
    pooled relation embedding according to ``cfg.variant``.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.norm1 = _norm(cfg)
        self.attn = MultiHeadAttention(cfg)
        self.rel = RelPosEmbedder(cfg.dim)
        self.norm2 = _norm(cfg)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_hidden)

    def relation_terms(self, centers: Tensor | None) -> dict[str, Tensor]:
        variant = self.cfg.variant
        if variant == "naive":
            return {}
        if centers is None:
            raise ValueError(f"variant {variant!r} requires instance centers")
        rel = self.rel(displacement_tensor(centers))
        if variant == "value":
            return {"v_extra": rel.mean(dim=1)}
        if variant == "row":
            return {"q_extra": rel.mean(dim=0)}
        return {"q_extra": rel.mean(dim=0), "k_extra": rel.mean(dim=1)}

    def forward(self, x: Tensor, centers: Tensor | None = None) -> Tensor:
        _check_finite(x)
        h = self.norm1(x)
        x = x + self.attn(h, h, h, **self.relation_terms(centers))
        return x + self.ffn(self.norm2(x))


class HTMBlock(nn.Module):
    """Transformer block followed by max-pooling over tokens."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.norm1 = _norm(cfg)
        self.attn = MHSA(cfg)
        self.norm2 = _norm(cfg)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_hidden)

    def tokens(self, x: Tensor) -> Tensor:
        if x.shape[0] < 1:
            raise ValueError("HTM block needs at least one token")
        f = x + self.attn(self.norm1(x))
        return f + self.ffn(self.norm2(f))

    def forward(self, x: Tensor) -> Tensor:
        return self.tokens(x).max(dim=0).values


class CrossAttentionBlock(nn.Module):
    """``q + MHCA(LN(q), LN(k), LN(v))`` followed by a residual FFN."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.norm_q = _norm(cfg)
        self.norm_kv = _norm(cfg)
        self.attn = MaskedCrossAttention(cfg)
        self.norm2 = _norm(cfg)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_hidden)

    def forward(self, q: Tensor, k: Tensor, v: Tensor | None = None, mask: Tensor | None = None) -> Tensor:
        v = k if v is None else v
        x = q + self.attn(self.norm_q(q), self.norm_kv(k), self.norm_kv(v), mask)
        return x + self.ffn(self.norm2(x))


class RPCAFusion(nn.Module):
    """Relative position-aware multi-modal fusion.

    1. ``p1 = RowColRPA_1(instances)`` serves as RPCA query and as ``(k1, v1)``.
    2. Hint features pass two linear layers to become RPCA key / value.
    3. ``rpca = CrossAttn(p1, text_k, text_v)`` (residual inside), then
       ``p2 = RowColRPA_2(rpca)`` gives ``(k2, v2)``.
    4. ``t1 = CrossAttn(hints, p1)``; 5. ``t2 = CrossAttn(t1, p2)``.
    6. Output is the element-wise max over the rows of ``t2``.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.rpa1 = RowColRPA(cfg)
        self.text_key = nn.Linear(cfg.dim, cfg.dim)
        self.text_value = nn.Linear(cfg.dim, cfg.dim)
        self.rpca = CrossAttentionBlock(cfg)
        self.rpa2 = RowColRPA(cfg)
        self.cross1 = CrossAttentionBlock(cfg)
        self.cross2 = CrossAttentionBlock(cfg)

    def forward(self, instance_feats: Tensor, centers: Tensor, hint_feats: Tensor) -> Tensor:
        if centers is None:
            raise ValueError("RPCA fusion requires instance centers")
        if instance_feats.shape[0] < 1 or hint_feats.shape[0] < 1:
            raise ValueError("RPCA fusion needs at least one instance and one hint")
        p1 = self.rpa1(instance_feats, centers)
        fused = self.rpca(p1, self.text_key(hint_feats), self.text_value(hint_feats))
        p2 = self.rpa2(fused, centers)
        t1 = self.cross1(hint_feats, p1)
        t2 = self.cross2(t1, p2)
        return t2.max(dim=0).values
