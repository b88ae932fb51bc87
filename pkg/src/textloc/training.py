"""Helpers shared by the coarse and fine training loops."""
from __future__ import annotations

import logging
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from .dataset import DatasetManifest
from .extractor import InstanceQueryExtractor, PreparedCell
from .runtime import check_finite
from .scene_synth import Cell, PoseSample
from .supervision import instance_loss

log = logging.getLogger(__name__)


class PreparedCache:
    """Lazily prepared cells keyed by cell id."""

    def __init__(self, extractor: InstanceQueryExtractor, cells: Iterable[Cell]):
        self.extractor = extractor
        self.cells = {c.id: c for c in cells}
        self._cache: dict[int, PreparedCell] = {}

    def __getitem__(self, cell_id: int) -> PreparedCell:
        if cell_id not in self._cache:
            self._cache[cell_id] = self.extractor.prepare(self.cells[cell_id])
        return self._cache[cell_id]

    def __len__(self) -> int:
        return len(self.cells)


def distinct_cell_batches(poses: Sequence[PoseSample], batch_size: int,
                          rng: np.random.Generator) -> Iterator[list[PoseSample]]:
    """Shuffle, then fill each batch greedily with poses of not-yet-used cells.

    Poses whose cell already appears in the batch are deferred, so batch
    members act as true negatives for each other whenever possible.
    """
    remaining = [poses[i] for i in rng.permutation(len(poses))]
    while remaining:
        batch, used, rest = [], set(), []
        for p in remaining:
            if len(batch) < batch_size and p.cell_id not in used:
                batch.append(p)
                used.add(p.cell_id)
            else:
                rest.append(p)
        yield batch
        remaining = rest


def cell_instance_loss(extractor: InstanceQueryExtractor, prepared: PreparedCell, out=None,
                       lambda_c: float = 1.0) -> torch.Tensor:
    out = extractor(prepared) if out is None else out
    loss, _ = instance_loss(out.heatmaps, out.class_logits, prepared.gt_masks, prepared.gt_classes, lambda_c)
    return loss


def pretrain_extractor(extractor: InstanceQueryExtractor, cache: PreparedCache, cell_ids: Sequence[int],
                       epochs: int, lr: float, rng: np.random.Generator, batch_size: int = 8,
                       lambda_c: float = 1.0) -> list[float]:
    """Instance-segmentation pretraining of the extractor alone."""
    if epochs <= 0:
        return []
    opt = torch.optim.AdamW(extractor.parameters(), lr=lr)
    ids = list(cell_ids)
    curve = []
    for epoch in range(epochs):
        order = [ids[i] for i in rng.permutation(len(ids))]
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            loss = torch.stack([cell_instance_loss(extractor, cache[c], lambda_c=lambda_c) for c in batch]).mean()
            check_finite(loss, "extractor pretraining", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss) * len(batch)
        curve.append(total / len(order))
        log.info("pretrain epoch %d inst_loss %.4f", epoch, curve[-1])
    return curve


def positive_cell_ids(dataset: DatasetManifest, poses: Sequence[PoseSample]) -> list[int]:
    return sorted({p.cell_id for p in poses})
