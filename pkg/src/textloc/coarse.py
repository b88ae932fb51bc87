"""Coarse stage: dual-branch text/cell encoder, contrastive training, cell index, retrieval."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .attention import AttentionConfig, RowColRPA
from .config import ModelConfig, RunConfig, version_string
from .dataset import DatasetManifest, atomic_write_bytes, atomic_write_text
from .errors import EmptyDatasetError, IndexFingerprintError, SchemaVersionError
from .extractor import ExtractorConfig, InstanceQueryExtractor, PreparedCell, QueryEnhancer
from .runtime import check_finite, fingerprint, load_checkpoint, save_checkpoint, seed_everything
from .scene_synth import Cell, PoseSample
from .supervision import Temperature, coarse_loss, contrastive_batch_loss, instance_loss
from .text_encoder import HintEncoder, Vocabulary
from .training import PreparedCache, distinct_cell_batches, pretrain_extractor

log = logging.getLogger(__name__)

INDEX_MAGIC = b"TLIDX\x00\x00\x00"
INDEX_SCHEMA_VERSION = 1
_HEADER = struct.Struct("<8sIII64s")


def extractor_config(model: ModelConfig, num_classes: int, query_count: int | None = None) -> ExtractorConfig:
    return ExtractorConfig(
        num_classes=num_classes, dim=model.dim, heads=model.heads, ffn_hidden=model.ffn_hidden,
        query_count=query_count or model.query_count, refine_layers=model.refine_layers,
        voxel_size_m=model.voxel_size_m, confidence_threshold=model.confidence_threshold,
        mask_threshold=model.mask_threshold, layer_norm=model.layer_norm,
    )


def attention_config(model: ModelConfig) -> AttentionConfig:
    return AttentionConfig(model.dim, model.heads, model.ffn_hidden, model.variant, model.layer_norm)


class CellEncoder(nn.Module):
    """extract -> enhance -> RowColRPA -> max-pool -> L2 normalize."""

    def __init__(self, ext_cfg: ExtractorConfig, att_cfg: AttentionConfig):
        super().__init__()
        self.extractor = InstanceQueryExtractor(ext_cfg)
        self.enhancer = QueryEnhancer(ext_cfg.dim)
        self.rpa = RowColRPA(att_cfg)

    def pool(self, feats: Tensor, centers: Tensor) -> Tensor:
        fused = self.rpa(feats, centers).max(dim=0).values
        return fused / fused.norm().clamp_min(1e-12)

    def forward(self, prepared: PreparedCell):
        out = self.extractor(prepared)
        sel = self.extractor.select(out)
        feats, centers = self.enhancer.enhance(out, sel)
        return self.pool(feats, centers), out


class CoarseModel(nn.Module):
    def __init__(self, model_cfg: ModelConfig, class_names: Sequence[str], vocab: Vocabulary,
                 tau_init: float = 0.07):
        super().__init__()
        self.model_cfg = model_cfg
        self.class_names = tuple(class_names)
        self.vocab = vocab
        self.cell_encoder = CellEncoder(extractor_config(model_cfg, len(class_names)), attention_config(model_cfg))
        self.text_encoder = HintEncoder(vocab, attention_config(model_cfg))
        self.temperature = Temperature(tau_init)

    @property
    def extractor(self) -> InstanceQueryExtractor:
        return self.cell_encoder.extractor

    def prepare(self, cell: Cell) -> PreparedCell:
        return self.extractor.prepare(cell)

    def encode_cell(self, cell: Cell | PreparedCell) -> Tensor:
        prepared = cell if isinstance(cell, PreparedCell) else self.prepare(cell)
        return self.cell_encoder(prepared)[0]

    def encode_text(self, hints: Sequence[str]) -> Tensor:
        return self.text_encoder(list(hints))

    def sidecar(self) -> dict:
        return {"model": asdict(self.model_cfg), "class_names": list(self.class_names),
                "vocab": self.vocab.to_list()}

    @classmethod
    def from_sidecar(cls, meta: dict) -> "CoarseModel":
        return cls(ModelConfig(**_tuples(meta["model"])), meta["class_names"], Vocabulary.from_list(meta["vocab"]))


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


@dataclass
class TrainResult:
    model: nn.Module
    loss_curve: list[float]
    initial_loss: float
    final_loss: float
    pretrain_curve: list[float] = field(default_factory=list)


def build_coarse_model(dataset: DatasetManifest, cfg: RunConfig) -> CoarseModel:
    vocab = Vocabulary.from_templates(dataset.color_names, dataset.class_names)
    return CoarseModel(cfg.model, dataset.class_names, vocab, cfg.coarse.tau_init)


def coarse_batch_loss(model: CoarseModel, cache: PreparedCache, batch: Sequence[PoseSample],
                      lambda_c: float, lambda_inst: float) -> tuple[Tensor, Tensor, Tensor]:
    text = torch.stack([model.encode_text(p.texts) for p in batch])
    cell_feats, inst_terms = {}, []
    for p in batch:
        if p.cell_id not in cell_feats:
            prepared = cache[p.cell_id]
            fc, out = model.cell_encoder(prepared)
            cell_feats[p.cell_id] = fc
            if lambda_inst > 0:
                inst, _ = instance_loss(out.heatmaps, out.class_logits, prepared.gt_masks,
                                        prepared.gt_classes, lambda_c)
                inst_terms.append(inst)
    cells = torch.stack([cell_feats[p.cell_id] for p in batch])
    l_cl = contrastive_batch_loss(text, cells, model.temperature())
    l_inst = torch.stack(inst_terms).mean() if inst_terms else l_cl.new_zeros(())
    return coarse_loss(l_cl, l_inst, lambda_inst), l_cl, l_inst


def train_coarse(dataset: DatasetManifest, cfg: RunConfig, model: CoarseModel | None = None,
                 split: str = "train") -> TrainResult:
    """AdamW with a step decay; minimizes contrastive + weighted instance loss."""
    tc = cfg.coarse
    rng = seed_everything(cfg.seed)
    model = model or build_coarse_model(dataset, cfg)
    poses = dataset.split(split)
    if not poses:
        raise EmptyDatasetError(f"dataset has no {split!r} poses")
    cache = PreparedCache(model.extractor, dataset.cells)
    train_cells = sorted({p.cell_id for p in poses})
    pretrain_curve = pretrain_extractor(model.extractor, cache, train_cells, tc.pretrain_epochs,
                                        tc.pretrain_lr, rng, lambda_c=tc.lambda_c)
    opt = torch.optim.AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=max(1, tc.decay_epoch), gamma=tc.decay_factor)
    curve: list[float] = []
    step = 0
    for epoch in range(tc.epochs):
        model.train()
        total, count = 0.0, 0
        for batch in distinct_cell_batches(poses, tc.batch_size, rng):
            loss, l_cl, l_inst = coarse_batch_loss(model, cache, batch, tc.lambda_c, tc.lambda_inst)
            check_finite(loss, "coarse training", epoch=epoch, step=step,
                         contrastive=l_cl.item(), instance=l_inst.item(), tau=model.temperature().item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
            step += 1
        sched.step()
        curve.append(total / count)
        log.info("coarse epoch %d loss %.4f lr %.2e", epoch, curve[-1], sched.get_last_lr()[0])
    model.eval()
    return TrainResult(model, curve, curve[0] if curve else float("nan"),
                       curve[-1] if curve else float("nan"), pretrain_curve)


def save_coarse(path, model: CoarseModel, cfg: RunConfig, loss_curve: Sequence[float] = ()) -> dict:
    return save_checkpoint(path, "coarse", model, {
        **model.sidecar(), "config_hash": cfg.hash(), "run_config": cfg.to_dict(),
        "loss_curve": list(loss_curve),
    })


def load_coarse(path) -> tuple[CoarseModel, dict]:
    tensors, meta = load_checkpoint(path, "coarse")
    model = CoarseModel.from_sidecar(meta)
    model.load_state_dict(tensors)
    model.eval()
    return model, meta


@dataclass
class EmbeddingIndex:
    embeddings: np.ndarray  # (N, d) float32, unit rows
    cell_ids: list[int]
    origins: np.ndarray  # (N, 3)
    cell_size_m: float
    fingerprint: str
    config_hash: str = ""
    extra: dict = field(default_factory=dict)  # free-form sidecar entries (artifact paths)

    def __len__(self) -> int:
        return len(self.cell_ids)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def append(self, other: "EmbeddingIndex") -> "EmbeddingIndex":
        if other.fingerprint != self.fingerprint:
            raise IndexFingerprintError(
                f"cannot append: index fingerprint {other.fingerprint} != {self.fingerprint}"
            )
        return EmbeddingIndex(np.vstack([self.embeddings, other.embeddings]), self.cell_ids + other.cell_ids,
                              np.vstack([self.origins, other.origins]), self.cell_size_m, self.fingerprint,
                              self.config_hash, dict(self.extra))

    def save(self, path) -> Path:
        p = Path(path)
        fp = self.fingerprint.encode().ljust(64, b"\0")[:64]
        header = _HEADER.pack(INDEX_MAGIC, INDEX_SCHEMA_VERSION, self.dim, len(self), fp)
        body = np.ascontiguousarray(self.embeddings, dtype="<f4").tobytes()
        atomic_write_bytes(p, header + body)
        meta = {
            "schema_version": INDEX_SCHEMA_VERSION, "dim": self.dim, "count": len(self),
            "fingerprint": self.fingerprint, "config_hash": self.config_hash,
            "cell_ids": self.cell_ids, "origins": self.origins.tolist(), "cell_size_m": self.cell_size_m,
            "version": version_string(), "extra": self.extra,
        }
        atomic_write_text(p.with_suffix(p.suffix + ".json"), json.dumps(meta, indent=1, sort_keys=True))
        return p

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"index file not found: {p}")
        buf = p.read_bytes()
        magic, version, dim, count, fp = _HEADER.unpack_from(buf, 0)
        if magic != INDEX_MAGIC:
            raise ValueError(f"{p} is not an embedding index file")
        if version != INDEX_SCHEMA_VERSION:
            raise SchemaVersionError(f"index schema_version {version} unsupported (expected {INDEX_SCHEMA_VERSION})")
        emb = np.frombuffer(buf, dtype="<f4", count=dim * count, offset=_HEADER.size).reshape(count, dim)
        meta = json.loads(p.with_suffix(p.suffix + ".json").read_text())
        fingerprint_str = fp.rstrip(b"\0").decode()
        if meta["fingerprint"] != fingerprint_str:
            raise IndexFingerprintError("index header and sidecar fingerprints disagree")
        return cls(emb.astype(np.float32), [int(i) for i in meta["cell_ids"]],
                   np.asarray(meta["origins"], dtype=np.float64), float(meta["cell_size_m"]),
                   fingerprint_str, meta.get("config_hash", ""), meta.get("extra", {}))


@torch.no_grad()
def embed_cells(model: CoarseModel, cells: Sequence[Cell], cache: PreparedCache | None = None) -> np.ndarray:
    model.eval()
    rows = []
    for c in cells:
        prepared = cache[c.id] if cache is not None else model.prepare(c)
        rows.append(model.encode_cell(prepared).numpy())
    return np.stack(rows).astype(np.float32)


def build_index(cells: Sequence[Cell], model: CoarseModel, config_hash_: str = "",
                cache: PreparedCache | None = None) -> EmbeddingIndex:
    cells = sorted(cells, key=lambda c: c.id)
    return EmbeddingIndex(
        embeddings=embed_cells(model, cells, cache),
        cell_ids=[c.id for c in cells],
        origins=np.stack([c.origin for c in cells]),
        cell_size_m=cells[0].size_m,
        fingerprint=fingerprint(model),
        config_hash=config_hash_,
    )


def rank_cells(query: np.ndarray, index: EmbeddingIndex, k: int | None = None) -> list[tuple[int, float]]:
    """Cells by descending similarity, ties to the lower cell id."""
    sims = index.embeddings @ np.asarray(query, dtype=np.float32)
    ids = np.asarray(index.cell_ids)
    order = np.lexsort((ids, -sims))
    k = len(order) if k is None else min(max(int(k), 1), len(order))
    return [(int(ids[i]), float(sims[i])) for i in order[:k]]


@torch.no_grad()
def retrieve(hints: Sequence[str], index: EmbeddingIndex, model: CoarseModel, k: int = 5) -> list[tuple[int, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if fingerprint(model) != index.fingerprint:
        raise IndexFingerprintError("index was built by a different coarse checkpoint")
    query = model.encode_text(list(hints)).numpy()
    return rank_cells(query, index, k)
