"""Fine stage: fuse hints with instance queries and regress the 2D position."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .attention import RPCAFusion
from .coarse import TrainResult, _tuples, attention_config, extractor_config
from .config import ModelConfig, RunConfig
from .dataset import DatasetManifest
from .errors import EmptyDatasetError
from .extractor import InstanceQueryExtractor, PreparedCell, QueryEnhancer
from .runtime import check_finite, load_checkpoint, save_checkpoint, seed_everything
from .scene_synth import Cell, PoseSample
from .supervision import fine_loss, instance_loss, mse_loss
from .text_encoder import HintEncoder, Vocabulary
from .training import PreparedCache, pretrain_extractor

log = logging.getLogger(__name__)


@dataclass
class FinePrediction:
    normalized: tuple[float, float]
    world: tuple[float, float]
    cell_id: int


def to_world(normalized, cell: Cell, clamp: bool = True) -> tuple[float, float]:
    """``origin + normalized * size`` on the horizontal axes; clamps to the cell by default."""
    n = np.asarray(normalized, dtype=np.float64)
    if clamp:
        n = np.clip(n, 0.0, 1.0)
    w = cell.origin[:2] + n * cell.size_m
    return float(w[0]), float(w[1])


def to_normalized(position, cell: Cell) -> tuple[float, float]:
    n = (np.asarray(position[:2], dtype=np.float64) - cell.origin[:2]) / cell.size_m
    return float(n[0]), float(n[1])


class FineModel(nn.Module):
    def __init__(self, model_cfg: ModelConfig, class_names: Sequence[str], vocab: Vocabulary):
        super().__init__()
        self.model_cfg = model_cfg
        self.class_names = tuple(class_names)
        self.vocab = vocab
        d = model_cfg.dim
        self.extractor = InstanceQueryExtractor(extractor_config(model_cfg, len(class_names)))
        self.enhancer = QueryEnhancer(d)
        self.text_encoder = HintEncoder(vocab, attention_config(model_cfg), with_inter=False)
        self.fusion = RPCAFusion(attention_config(model_cfg))
        self.head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, 2))
        with torch.no_grad():  # start from the cell center
            self.head[2].bias.fill_(0.5)

    def prepare(self, cell: Cell) -> PreparedCell:
        return self.extractor.prepare(cell)

    def cell_side(self, prepared: PreparedCell):
        """Enhanced instance features, cell-frame centers and the raw extractor output."""
        out = self.extractor(prepared)
        sel = self.extractor.select(out)
        feats, centers = self.enhancer.enhance(out, sel)
        return feats, centers, out

    def regress(self, feats: Tensor, centers: Tensor, hint_feats: Tensor) -> Tensor:
        return self.head(self.fusion(feats, centers, hint_feats))

    def forward(self, prepared: PreparedCell, hints: Sequence[str]) -> Tensor:
        feats, centers, _ = self.cell_side(prepared)
        return self.regress(feats, centers, self.text_encoder.hint_features(list(hints)))

    @torch.no_grad()
    def fuse_and_regress(self, cell: Cell | PreparedCell, hints: Sequence[str]) -> FinePrediction:
        prepared = cell if isinstance(cell, PreparedCell) else self.prepare(cell)
        n = self(prepared, hints).numpy()
        c = prepared.cell
        return FinePrediction((float(n[0]), float(n[1])), to_world(n, c, clamp=False), c.id)

    def sidecar(self) -> dict:
        return {"model": asdict(self.model_cfg), "class_names": list(self.class_names),
                "vocab": self.vocab.to_list()}

    @classmethod
    def from_sidecar(cls, meta: dict) -> "FineModel":
        return cls(ModelConfig(**_tuples(meta["model"])), meta["class_names"], Vocabulary.from_list(meta["vocab"]))


def build_fine_model(dataset: DatasetManifest, cfg: RunConfig) -> FineModel:
    vocab = Vocabulary.from_templates(dataset.color_names, dataset.class_names)
    return FineModel(cfg.model, dataset.class_names, vocab)


def fine_batch_loss(model: FineModel, cache: PreparedCache, batch: Sequence[PoseSample], dataset: DatasetManifest,
                    lambda_c: float, lambda_inst: float) -> tuple[Tensor, Tensor, Tensor]:
    sides, inst_terms = {}, []
    for p in batch:
        if p.cell_id not in sides:
            prepared = cache[p.cell_id]
            feats, centers, out = model.cell_side(prepared)
            sides[p.cell_id] = (feats, centers)
            if lambda_inst > 0:
                inst, _ = instance_loss(out.heatmaps, out.class_logits, prepared.gt_masks,
                                        prepared.gt_classes, lambda_c)
                inst_terms.append(inst)
    preds, targets = [], []
    for p in batch:
        feats, centers = sides[p.cell_id]
        preds.append(model.regress(feats, centers, model.text_encoder.hint_features(p.texts)))
        targets.append(to_normalized(p.position, dataset.cell_by_id(p.cell_id)))
    pred = torch.stack(preds)
    target = torch.tensor(targets, dtype=pred.dtype)
    l_inst = torch.stack(inst_terms).mean() if inst_terms else pred.new_zeros(())
    return fine_loss(pred, target, l_inst, lambda_inst), mse_loss(pred, target), l_inst


def train_fine(dataset: DatasetManifest, cfg: RunConfig, model: FineModel | None = None,
               split: str = "train") -> TrainResult:
    """Adam on position regression + weighted instance loss over (positive cell, hints) pairs."""
    tc = cfg.fine
    rng = seed_everything(cfg.seed + 1)
    model = model or build_fine_model(dataset, cfg)
    poses = dataset.split(split)
    if not poses:
        raise EmptyDatasetError(f"dataset has no {split!r} poses")
    cache = PreparedCache(model.extractor, dataset.cells)
    pretrain_curve = pretrain_extractor(model.extractor, cache, sorted({p.cell_id for p in poses}),
                                        tc.pretrain_epochs, tc.pretrain_lr, rng, lambda_c=tc.lambda_c)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    curve = []
    for epoch in range(tc.epochs):
        model.train()
        total, count = 0.0, 0
        order = rng.permutation(len(poses))
        for start in range(0, len(order), tc.batch_size):
            batch = [poses[i] for i in order[start:start + tc.batch_size]]
            loss, l_mse, l_inst = fine_batch_loss(model, cache, batch, dataset, tc.lambda_c, tc.lambda_inst)
            check_finite(loss, "fine training", epoch=epoch, mse=l_mse.item(), instance=l_inst.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += l_mse.item() * len(batch)
            count += len(batch)
        curve.append(total / count)
        log.info("fine epoch %d position error %.4f", epoch, curve[-1])
    model.eval()
    return TrainResult(model, curve, curve[0] if curve else float("nan"),
                       curve[-1] if curve else float("nan"), pretrain_curve)


def save_fine(path, model: FineModel, cfg: RunConfig, loss_curve: Sequence[float] = ()) -> dict:
    return save_checkpoint(path, "fine", model, {
        **model.sidecar(), "config_hash": cfg.hash(), "run_config": cfg.to_dict(),
        "loss_curve": list(loss_curve),
    })


def load_fine(path) -> tuple[FineModel, dict]:
    tensors, meta = load_checkpoint(path, "fine")
    model = FineModel.from_sidecar(meta)
    model.load_state_dict(tensors)
    model.eval()
    return model, meta


@torch.no_grad()
def localize(hints: Sequence[str], cell: Cell | PreparedCell, model: FineModel) -> FinePrediction:
    """World position inside ``cell``; the normalized prediction is clamped to [0, 1]^2."""
    pred = model.fuse_and_regress(cell, hints)
    c = cell.cell if isinstance(cell, PreparedCell) else cell
    return FinePrediction(pred.normalized, to_world(pred.normalized, c, clamp=True), c.id)
