"""Instance query extractor: raw cell points to instance queries with masks.

Pipeline per cell::

    voxelize -> 3-level voxel encoder/decoder -> FPS-initialized queries
             -> N masked refinement layers (coarse -> fine) -> mask + class heads
             -> confidence filter -> per-query center / count / mean RGB

Cells are preprocessed once into a :class:`PreparedCell` that caches every
parameter-independent quantity (voxel grid, level maps, FPS anchors, ground
truth masks) as tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .attention import AttentionConfig, FeedForward, MaskedCrossAttention, MHSA
from .errors import DegenerateInputError
from .geometry import VoxelGrid, farthest_point_sample, fps_start_index, voxelize
from .scene_synth import Cell

NUM_LEVELS = 3
FOURIER_BANDS = 4
# mean color (3) | centroid offset (3) | normalized position (3) | Fourier features
VOXEL_INPUT_DIM = 9 + 3 * 2 * FOURIER_BANDS
ANCHOR_INPUT_DIM = 6 + 3 * 2 * FOURIER_BANDS


@dataclass(frozen=True)
class ExtractorConfig:
    num_classes: int
    dim: int = 128
    heads: int = 4
    ffn_hidden: int = 256
    query_count: int = 24
    refine_layers: int = 3
    voxel_size_m: float = 0.15
    confidence_threshold: float = 0.5
    mask_threshold: float = 0.5
    layer_norm: bool = True

    def __post_init__(self):
        if self.query_count < 1 or self.refine_layers < 1:
            raise ValueError("query_count and refine_layers must be >= 1")
        for name in ("confidence_threshold", "mask_threshold"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.dim, self.heads, self.ffn_hidden, "naive", self.layer_norm)


def fourier_features(x: np.ndarray, bands: int = FOURIER_BANDS) -> np.ndarray:
    freqs = (2.0 ** np.arange(bands)) * math.pi
    ang = x[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).reshape(*x.shape[:-1], -1)


@dataclass
class PreparedCell:
    """Parameter-independent preprocessing of one cell."""

    cell: Cell
    grid: VoxelGrid
    voxel_inputs: Tensor  # (V0, VOXEL_INPUT_DIM)
    level_parents: list[Tensor]  # level r -> r+1 index map, one per transition
    level_sizes: list[int]
    anchor_inputs: Tensor  # (q, ANCHOR_INPUT_DIM)
    anchor_points: np.ndarray  # (q, 3) world meters
    voxel_counts: Tensor  # (V0,)
    voxel_centroids: Tensor  # (V0, 3) meters, float64
    voxel_colors: Tensor  # (V0, 3)
    gt_masks: Tensor  # (g, V0) bool
    gt_classes: Tensor  # (g,) long
    gt_instance_ids: list[int] = field(default_factory=list)

    @property
    def num_voxels(self) -> int:
        return self.voxel_inputs.shape[0]


def _parents(idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    coarse = np.floor_divide(idx, 2)
    uniq, inverse = np.unique(coarse, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


def prepare_cell(cell: Cell, voxel_size_m: float, query_count: int) -> PreparedCell:
    if cell.num_points == 0:
        raise DegenerateInputError(f"cell {cell.id} has no points")
    grid = voxelize(cell.points, cell.colors, voxel_size_m, origin=cell.origin)
    size = cell.size_m
    norm_pos = (grid.centroids - cell.origin) / size
    inputs = np.concatenate([grid.voxel_features, norm_pos, fourier_features(norm_pos)], axis=1)

    parents, sizes = [], [grid.num_voxels]
    idx = grid.occupied
    for _ in range(NUM_LEVELS - 1):
        idx, inv = _parents(idx)
        parents.append(torch.from_numpy(inv.astype(np.int64)))
        sizes.append(len(idx))

    pts = cell.points.astype(np.float64)
    k = min(query_count, len(pts))
    chosen = farthest_point_sample(pts, k, fps_start_index(pts, cell.center))
    if k < query_count:  # pad by cycling through the available anchors
        chosen = np.resize(chosen, query_count)
    anchor_pos = (pts[chosen] - cell.origin) / size
    anchor_in = np.concatenate(
        [anchor_pos, cell.colors[chosen].astype(np.float64), fourier_features(anchor_pos)], axis=1
    )

    # ground truth: majority instance per voxel
    inst = cell.point_instance_ids.astype(np.int64)
    uniq_inst, inst_inv = np.unique(inst, return_inverse=True)
    votes = np.zeros((grid.num_voxels, len(uniq_inst)), dtype=np.int64)
    np.add.at(votes, (grid.point_to_voxel, inst_inv.reshape(-1)), 1)
    voxel_inst = np.argmax(votes, axis=1)
    cls_of = {}
    for iid, cid in zip(cell.point_instance_ids, cell.point_class_ids):
        cls_of.setdefault(int(iid), int(cid))
    present = np.unique(voxel_inst)
    gt_masks = voxel_inst[None, :] == present[:, None]
    gt_ids = [int(uniq_inst[p]) for p in present]

    return PreparedCell(
        cell=cell,
        grid=grid,
        voxel_inputs=torch.from_numpy(inputs.astype(np.float32)),
        level_parents=parents,
        level_sizes=sizes,
        anchor_inputs=torch.from_numpy(anchor_in.astype(np.float32)),
        anchor_points=pts[chosen],
        voxel_counts=torch.from_numpy(grid.counts.astype(np.float64)),
        voxel_centroids=torch.from_numpy(grid.centroids),
        voxel_colors=torch.from_numpy(grid.voxel_features[:, :3].copy()),
        gt_masks=torch.from_numpy(gt_masks),
        gt_classes=torch.tensor([cls_of[i] for i in gt_ids], dtype=torch.long),
        gt_instance_ids=gt_ids,
    )


def _scatter_mean(x: Tensor, index: Tensor, size: int) -> Tensor:
    out = x.new_zeros(size, x.shape[1]).index_add_(0, index, x)
    count = x.new_zeros(size).index_add_(0, index, x.new_ones(index.shape[0]))
    return out / count[:, None]


def _mlp(i: int, o: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(i, o), nn.GELU(), nn.Linear(o, o))


@dataclass
class BackboneFeatures:
    levels: list[Tensor]  # [F_0 (finest), F_1, F_2]
    parents: list[Tensor]

    @property
    def finest(self) -> Tensor:
        return self.levels[0]


class VoxelBackbone(nn.Module):
    """Three-level voxel encoder/decoder with skip connections.

    Coarser levels pool members of stride-2 parent voxels; the decoder
    gathers parent features back down and fuses them with the encoder skip.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.enc0 = _mlp(VOXEL_INPUT_DIM, dim)
        self.enc1 = _mlp(dim, dim)
        self.enc2 = _mlp(dim, dim)
        self.dec1 = _mlp(2 * dim, dim)
        self.dec0 = _mlp(2 * dim, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, prepared: PreparedCell) -> BackboneFeatures:
        if prepared.num_voxels == 0:
            raise DegenerateInputError("backbone input grid is empty")
        p01, p12 = prepared.level_parents
        s1, s2 = prepared.level_sizes[1], prepared.level_sizes[2]
        e0 = self.enc0(prepared.voxel_inputs.to(self.enc0[0].weight.dtype))
        e1 = self.enc1(_scatter_mean(e0, p01, s1))
        e2 = self.enc2(_scatter_mean(e1, p12, s2))
        d1 = self.dec1(torch.cat([e1, e2[p12]], dim=1))
        d0 = self.norm(self.dec0(torch.cat([e0, d1[p01]], dim=1)))
        return BackboneFeatures([d0, d1, e2], [p01, p12])


class QueryRefineLayer(nn.Module):
    """Masked cross-attention, self-attention and FFN, each with a residual."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        norm = (lambda: nn.LayerNorm(cfg.dim)) if cfg.layer_norm else nn.Identity
        self.norm_q, self.norm_kv = norm(), norm()
        self.cross = MaskedCrossAttention(cfg)
        self.norm_sa = norm()
        self.self_attn = MHSA(cfg)
        self.norm_ffn = norm()
        self.ffn = FeedForward(cfg.dim, cfg.ffn_hidden)

    def forward(self, queries: Tensor, feats: Tensor, mask: Tensor | None = None) -> Tensor:
        if mask is not None and mask.shape != (queries.shape[0], feats.shape[0]):
            raise ValueError(f"mask shape {tuple(mask.shape)} != ({queries.shape[0]}, {feats.shape[0]})")
        kv = self.norm_kv(feats)
        q_ca = self.cross(self.norm_q(queries), kv, kv, mask) + queries
        q_sa = self.self_attn(self.norm_sa(q_ca)) + q_ca
        return self.ffn(self.norm_ffn(q_sa)) + q_sa


@dataclass
class ExtractorOutput:
    queries: Tensor  # (q, d)
    heatmaps: Tensor  # (q, V0) sigmoid probabilities
    class_logits: Tensor  # (q, C + 1), last column = no-object
    features: BackboneFeatures
    prepared: PreparedCell
    attention_masks: list[Tensor] = field(default_factory=list)  # one per refinement layer

    @property
    def finest(self) -> Tensor:
        return self.features.finest


@dataclass
class InstanceQuery:
    index: int
    feature: np.ndarray
    center: np.ndarray
    point_count: int
    mean_rgb: np.ndarray
    confidence: float
    mask: np.ndarray
    class_logits: np.ndarray


@dataclass
class Selection:
    """Surviving queries of one cell with mask-derived statistics."""

    indices: Tensor  # (k,) into the q queries
    masks: Tensor  # (k, V0) bool
    centers: Tensor  # (k, 3) meters, float64
    point_counts: Tensor  # (k,)
    mean_rgb: Tensor  # (k, 3)
    confidence: Tensor  # (k,)
    fallback: bool = False


def mask_statistics(masks: Tensor, prepared: PreparedCell) -> tuple[Tensor, Tensor, Tensor]:
    """Point-weighted center, point count and mean color of each voxel mask."""
    w = masks.to(torch.float64) * prepared.voxel_counts[None, :]
    n = w.sum(dim=1)
    denom = n.clamp_min(1.0)[:, None]
    centers = (w @ prepared.voxel_centroids) / denom
    rgb = (w @ prepared.voxel_colors) / denom
    return centers, n, rgb


class InstanceQueryExtractor(nn.Module):
    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.backbone = VoxelBackbone(d)
        self.query_embed = _mlp(ANCHOR_INPUT_DIM, d)
        acfg = cfg.attention
        self.layers = nn.ModuleList([QueryRefineLayer(acfg) for _ in range(cfg.refine_layers)])
        self.mask_embed = _mlp(d, d)
        self.class_head = nn.Linear(d, cfg.num_classes + 1)
        self.out_norm = nn.LayerNorm(d)

    def prepare(self, cell: Cell) -> PreparedCell:
        return prepare_cell(cell, self.cfg.voxel_size_m, self.cfg.query_count)

    def init_queries(self, prepared: PreparedCell) -> tuple[Tensor, np.ndarray]:
        dtype = self.query_embed[0].weight.dtype
        return self.query_embed(prepared.anchor_inputs.to(dtype)), prepared.anchor_points

    def heads(self, queries: Tensor, finest: Tensor) -> tuple[Tensor, Tensor]:
        q = self.out_norm(queries)
        logits = self.mask_embed(q) @ finest.T / math.sqrt(finest.shape[1])
        return torch.sigmoid(logits), self.class_head(q)

    def predict_masks(self, queries: Tensor, finest: Tensor) -> tuple[Tensor, Tensor]:
        """Binary masks (heatmap >= threshold) and the heatmaps themselves."""
        heat, _ = self.heads(queries, finest)
        return heat >= self.cfg.mask_threshold, heat

    def _level_mask(self, heat: Tensor, feats: BackboneFeatures, level: int) -> Tensor:
        mask = heat.detach() >= self.cfg.mask_threshold
        for r in range(level):
            parent = feats.parents[r]
            size = feats.levels[r + 1].shape[0]
            hits = torch.zeros(mask.shape[0], size).index_add_(1, parent, mask.float())
            mask = hits > 0
        return mask

    def forward(self, prepared: PreparedCell, attention_masks: list[Tensor] | None = None) -> ExtractorOutput:
        """Backbone, refinement cycling coarse to fine, then the heads.

        ``attention_masks`` replaces the thresholded intermediate masks
        (a piecewise-constant function of the parameters), e.g. to hold
        them fixed during finite-difference checks.
        """
        feats = self.backbone(prepared)
        queries, _ = self.init_queries(prepared)
        order = [NUM_LEVELS - 1 - (i % NUM_LEVELS) for i in range(self.cfg.refine_layers)]
        used = []
        for i, (layer, level) in enumerate(zip(self.layers, order)):
            if attention_masks is not None:
                mask = attention_masks[i]
            else:
                heat, _ = self.heads(queries, feats.finest)
                mask = self._level_mask(heat, feats, level)
            used.append(mask)
            queries = layer(queries, feats.levels[level], mask)
        heat, logits = self.heads(queries, feats.finest)
        return ExtractorOutput(queries, heat, logits, feats, prepared, used)

    def confidence(self, class_logits: Tensor) -> Tensor:
        return 1.0 - torch.softmax(class_logits, dim=-1)[:, -1]

    def select(self, out: ExtractorOutput) -> Selection:
        """Confidence filter; falls back to one whole-cell query if nothing survives."""
        with torch.no_grad():
            masks = out.heatmaps >= self.cfg.mask_threshold
            conf = self.confidence(out.class_logits)
            keep = (conf >= self.cfg.confidence_threshold) & masks.any(dim=1)
            fallback = not bool(keep.any())
            if fallback:
                idx = torch.argmax(conf).reshape(1)
                masks = torch.ones(1, out.heatmaps.shape[1], dtype=torch.bool)
            else:
                idx = torch.nonzero(keep).reshape(-1)
                masks = masks[idx]
            centers, counts, rgb = mask_statistics(masks, out.prepared)
        return Selection(idx, masks, centers, counts, rgb, conf[idx], fallback)

    @torch.no_grad()
    def extract(self, cell: Cell | PreparedCell) -> list[InstanceQuery]:
        prepared = cell if isinstance(cell, PreparedCell) else self.prepare(cell)
        out = self(prepared)
        sel = self.select(out)
        return [
            InstanceQuery(
                index=int(i),
                feature=out.queries[i].numpy().copy(),
                center=sel.centers[j].numpy().copy(),
                point_count=int(sel.point_counts[j]),
                mean_rgb=sel.mean_rgb[j].numpy().copy(),
                confidence=float(sel.confidence[j]),
                mask=sel.masks[j].numpy().copy(),
                class_logits=out.class_logits[i].numpy().copy(),
            )
            for j, i in enumerate(sel.indices.tolist())
        ]


class QueryEnhancer(nn.Module):
    """Fuses each query with its mask-pooled backbone feature and mask statistics.

    ``concat(query, mean F_0 under mask, normalized center, log(1 + count), mean RGB)``
    passes a bias-free linear projection.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(2 * dim + 7, dim, bias=False)

    def forward(self, queries: Tensor, masks: Tensor, finest: Tensor, centers: Tensor,
                point_counts: Tensor, mean_rgb: Tensor, cell: Cell) -> Tensor:
        dtype = queries.dtype
        m = masks.to(dtype)
        pooled = (m @ finest) / m.sum(dim=1, keepdim=True).clamp_min(1.0)
        origin = torch.as_tensor(cell.origin, dtype=torch.float64)
        norm_center = ((centers - origin) / cell.size_m).to(dtype)
        extra = torch.cat(
            [norm_center, torch.log1p(point_counts.to(dtype))[:, None], mean_rgb.to(dtype)], dim=1
        )
        return self.proj(torch.cat([queries, pooled, extra], dim=1))

    def enhance(self, out: ExtractorOutput, sel: Selection) -> tuple[Tensor, Tensor]:
        """Enhanced features ``(k, d)`` and cell-frame centers ``(k, 3)`` (cell-size units)."""
        feats = self(out.queries[sel.indices], sel.masks, out.finest, sel.centers,
                     sel.point_counts, sel.mean_rgb, out.prepared.cell)
        cell = out.prepared.cell
        origin = torch.as_tensor(cell.origin, dtype=torch.float64)
        centers = ((sel.centers - origin) / cell.size_m).to(feats.dtype)
        return feats, centers
