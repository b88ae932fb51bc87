"""Training objectives.

Instance supervision follows the usual set-prediction recipe: a cost
matrix (BCE + dice + weighted class NLL) is solved with the Hungarian
algorithm, matched queries receive the mask + class loss and unmatched
queries are pushed toward the trailing "no-object" class.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor, nn

PROB_EPS = 1e-7
DICE_SMOOTH = 1.0
TAU_MIN, TAU_MAX = 1e-3, 10.0


@dataclass
class LossWeights:
    lambda_c: float = 1.0
    lambda_inst: float = 0.5
    tau_init: float = 0.07

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_inst < 0:
            raise ValueError("loss weights must be non-negative")
        if not TAU_MIN <= self.tau_init <= TAU_MAX:
            raise ValueError(f"tau_init must lie in [{TAU_MIN}, {TAU_MAX}]")


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    num_preds: int
    num_gts: int
    total_cost: float = 0.0

    @property
    def unmatched_preds(self) -> list[int]:
        matched = {p for p, _ in self.pairs}
        return [i for i in range(self.num_preds) if i not in matched]


def hungarian_match(cost) -> Assignment:
    """Minimum-cost injective assignment of ``min(p, g)`` pairs."""
    c = cost.detach().cpu().numpy() if isinstance(cost, Tensor) else np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a 2D matrix")
    p, g = c.shape
    if p == 0 or g == 0:
        return Assignment([], p, g, 0.0)
    if not np.isfinite(c).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(c)
    pairs = sorted((int(r), int(k)) for r, k in zip(rows, cols))
    return Assignment(pairs, p, g, float(c[rows, cols].sum()))


def bce(m: Tensor, target: Tensor) -> Tensor:
    m = m.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(target * torch.log(m) + (1 - target) * torch.log1p(-m)).mean(dim=-1)


def dice_loss(m: Tensor, target: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    inter = (m * target).sum(dim=-1)
    return 1.0 - (2.0 * inter + smooth) / (m.sum(dim=-1) + target.sum(dim=-1) + smooth)


def mask_loss(m: Tensor, target: Tensor) -> Tensor:
    """BCE + dice between a soft heatmap and a binary mask (last dim = voxels)."""
    if m.shape != target.shape:
        raise ValueError(f"heatmap shape {tuple(m.shape)} != mask shape {tuple(target.shape)}")
    target = target.to(m.dtype)
    return bce(m, target) + dice_loss(m, target)


def match_cost(heatmaps: Tensor, class_logits: Tensor, gt_masks: Tensor, gt_classes: Tensor,
               lambda_c: float = 1.0) -> Tensor:
    """Pairwise ``(q, g)`` cost: BCE + dice + lambda_c * (-log p(gt class))."""
    t = gt_masks.to(heatmaps.dtype)
    v = heatmaps.shape[1]
    m = heatmaps.clamp(PROB_EPS, 1.0 - PROB_EPS)
    bce_cost = -(torch.log(m) @ t.T + torch.log1p(-m) @ (1 - t).T) / v
    inter = heatmaps @ t.T
    dice_cost = 1.0 - (2.0 * inter + DICE_SMOOTH) / (
        heatmaps.sum(1, keepdim=True) + t.sum(1)[None, :] + DICE_SMOOTH
    )
    nll = -F.log_softmax(class_logits, dim=-1)[:, gt_classes]
    return bce_cost + dice_cost + lambda_c * nll


def instance_loss(heatmaps: Tensor, class_logits: Tensor, gt_masks: Tensor, gt_classes: Tensor,
                  lambda_c: float = 1.0) -> tuple[Tensor, Assignment]:
    """Matched mask + class loss, no-object loss for unmatched predictions.

    The last column of ``class_logits`` is the no-object class. The sum is
    divided by ``max(1, num_gt)``.
    """
    q = heatmaps.shape[0]
    g = gt_masks.shape[0]
    no_object = class_logits.shape[1] - 1
    with torch.no_grad():
        cost = match_cost(heatmaps, class_logits, gt_masks, gt_classes, lambda_c) if g else torch.zeros(q, 0)
    assignment = hungarian_match(cost)
    log_p = F.log_softmax(class_logits, dim=-1)
    targets = torch.full((q,), no_object, dtype=torch.long)
    total = heatmaps.new_zeros(())
    if assignment.pairs:
        pi = torch.tensor([p for p, _ in assignment.pairs], dtype=torch.long)
        gi = torch.tensor([k for _, k in assignment.pairs], dtype=torch.long)
        total = total + mask_loss(heatmaps[pi], gt_masks[gi]).sum()
        targets[pi] = gt_classes[gi]
    total = total + lambda_c * (-log_p[torch.arange(q), targets]).sum()
    return total / max(1, g), assignment


class Temperature(nn.Module):
    """Learnable contrastive temperature, stored as a log and clamped on read."""

    def __init__(self, init: float = 0.07):
        super().__init__()
        self.log_tau = nn.Parameter(torch.tensor(math.log(init)))

    def forward(self) -> Tensor:
        return self.log_tau.exp().clamp(TAU_MIN, TAU_MAX)


def contrastive_pair_losses(text: Tensor, cell: Tensor, tau) -> Tensor:
    """Per-pair symmetric log-softmax losses for a batch of matched pairs."""
    tau_t = torch.as_tensor(tau, dtype=text.dtype)
    if (tau_t <= 0).any():
        raise ValueError(f"temperature must be positive, got {float(tau_t)}")
    logits = text @ cell.T / tau_t
    idx = torch.arange(text.shape[0])
    t2c = -F.log_softmax(logits, dim=1)[idx, idx]
    c2t = -F.log_softmax(logits.T, dim=1)[idx, idx]
    return t2c + c2t


def contrastive_pair_loss(i: int, text: Tensor, cell: Tensor, tau) -> Tensor:
    return contrastive_pair_losses(text, cell, tau)[i]


def contrastive_batch_loss(text: Tensor, cell: Tensor, tau) -> Tensor:
    return contrastive_pair_losses(text, cell, tau).mean()


def coarse_loss(contrastive: Tensor, inst: Tensor, lambda_inst: float) -> Tensor:
    return contrastive + lambda_inst * inst


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Euclidean distance ``||P - P_hat||_2``; batches average the per-row distances."""
    diff = pred - target
    sq = (diff * diff).sum(dim=-1)
    # sqrt has an infinite derivative at 0; route exact zeros through a safe branch
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    dist = torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))
    return dist.mean() if dist.ndim else dist


def fine_loss(pred: Tensor, target: Tensor, inst: Tensor, lambda_inst: float) -> Tensor:
    return mse_loss(pred, target) + lambda_inst * inst
