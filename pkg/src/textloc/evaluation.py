"""Metrics, end-to-end evaluation, ablation grids and the point-masking study."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .coarse import CoarseModel, EmbeddingIndex, build_index, rank_cells, train_coarse
from .config import RunConfig
from .dataset import DatasetManifest, atomic_write_text
from .errors import IndexFingerprintError
from .fine import FineModel, to_world, train_fine
from .geometry import mask_points
from .runtime import fingerprint
from .scene_synth import Cell, PoseSample

log = logging.getLogger(__name__)


def retrieval_recall(rank_lists: Sequence[Sequence[int]], positives: Sequence[set[int]],
                     ks: Sequence[int] = (1, 3, 5)) -> dict[int, float]:
    """Fraction of queries whose top-k contains at least one positive cell."""
    if len(rank_lists) == 0:
        raise ValueError("retrieval_recall needs at least one query")
    if len(rank_lists) != len(positives):
        raise ValueError("rank_lists and positives differ in length")
    out = {}
    for k in ks:
        hits = sum(1 for ranked, pos in zip(rank_lists, positives) if any(c in pos for c in list(ranked)[:k]))
        out[int(k)] = hits / len(rank_lists)
    return out


def localization_recall(predictions: Sequence[np.ndarray], gts: np.ndarray, ks: Sequence[int] = (1, 5, 10),
                        epsilons: Sequence[float] = (5.0, 10.0, 15.0)) -> dict[int, dict[float, float]]:
    """Recall over ``ks x epsilons``.

    ``predictions[i]`` holds the refined world positions for query ``i``'s
    ranked candidates (rank order); a query counts at ``(k, eps)`` when any
    of its first ``k`` predictions is closer than ``eps`` to the truth.
    """
    if len(predictions) == 0:
        raise ValueError("localization_recall needs at least one query")
    gts = np.asarray(gts, dtype=np.float64)
    best = []  # running minimum error along the rank axis
    for pred, gt in zip(predictions, gts):
        err = np.linalg.norm(np.asarray(pred, dtype=np.float64).reshape(-1, 2) - gt[:2], axis=1)
        best.append(np.minimum.accumulate(err) if len(err) else np.array([np.inf]))
    out: dict[int, dict[float, float]] = {}
    for k in ks:
        row = {}
        first_k = np.array([b[min(k, len(b)) - 1] for b in best])
        for eps in epsilons:
            row[float(eps)] = float(np.mean(first_k < eps))
        out[int(k)] = row
    return out


def normalized_error(predictions: np.ndarray, gts: np.ndarray, cell_size: float) -> float:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    return float(np.mean(np.linalg.norm(p - g, axis=1)) / cell_size)


@dataclass
class QueryRecord:
    pose_id: int
    gt: tuple[float, float]
    positive_cells: list[int]
    ranked_cells: list[int]
    similarities: list[float]
    predictions: list[tuple[float, float]]  # world, one per ranked candidate
    matched_prediction: tuple[float, float]  # world, in the pose's own positive cell


@dataclass
class EvalReport:
    split: str
    num_queries: int
    retrieval_recall: dict[int, float]
    localization_recall: dict[int, dict[float, float]]
    mean_normalized_error: float
    center_baseline_error: float
    records: list[QueryRecord] = field(default_factory=list)
    provenance: dict[str, Any] = field(default_factory=dict)

    def summary(self) -> dict[str, Any]:
        return {
            "split": self.split,
            "num_queries": self.num_queries,
            "retrieval_recall": {str(k): v for k, v in self.retrieval_recall.items()},
            "localization_recall": {str(k): {_eps(e): v for e, v in row.items()}
                                    for k, row in self.localization_recall.items()},
            "mean_normalized_error": self.mean_normalized_error,
            "center_baseline_error": self.center_baseline_error,
            "provenance": self.provenance,
        }

    def to_dict(self) -> dict[str, Any]:
        return {**self.summary(), "records": [asdict(r) for r in self.records]}

    def write(self, out_dir: str | Path, stem: str = "eval_report") -> dict[str, Path]:
        out = Path(out_dir)
        paths = {"json": out / f"{stem}.json", "csv": out / f"{stem}.csv"}
        atomic_write_text(paths["json"], json.dumps(self.to_dict(), indent=1, sort_keys=True))
        rows = [("metric", "k", "epsilon_m", "value")]
        rows += [("retrieval_recall", k, "", v) for k, v in self.retrieval_recall.items()]
        rows += [("localization_recall", k, e, v)
                 for k, row in self.localization_recall.items() for e, v in row.items()]
        rows += [("mean_normalized_error", "", "", self.mean_normalized_error),
                 ("center_baseline_error", "", "", self.center_baseline_error)]
        write_csv(paths["csv"], rows)
        return paths


def _eps(e: float) -> str:
    return "inf" if math.isinf(e) else f"{e:g}"


def write_csv(path: Path, rows: Sequence[Sequence[Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def positive_cells(position, cells: Sequence[Cell]) -> set[int]:
    """Any cell whose footprint contains the position."""
    return {c.id for c in cells if c.contains_xy(position)}


@torch.no_grad()
def text_embeddings(model: CoarseModel, poses: Sequence[PoseSample]) -> np.ndarray:
    model.eval()
    return np.stack([model.encode_text(p.texts).numpy() for p in poses]).astype(np.float32)


def evaluate(dataset: DatasetManifest, coarse: CoarseModel, fine: FineModel | None, cfg: RunConfig,
             split: str | None = None, index: EmbeddingIndex | None = None,
             cells: Sequence[Cell] | None = None) -> EvalReport:
    """Retrieval, localization and matched-pair fine error on one split.

    ``cells`` overrides the dataset cells (the robustness study passes
    masked copies); the index is rebuilt from them unless supplied.
    """
    split = split or cfg.eval.split
    cells = list(cells) if cells is not None else list(dataset.cells)
    by_id = {c.id: c for c in cells}
    if index is None:
        index = build_index(cells, coarse)
    elif index.fingerprint != fingerprint(coarse):
        raise IndexFingerprintError("evaluation index does not match the coarse checkpoint")
    poses = dataset.split(split)
    if not poses:
        raise ValueError(f"split {split!r} has no poses")
    ks_r, ks_l, eps = cfg.eval.retrieval_ks, cfg.eval.localization_ks, cfg.eval.epsilons_m
    k_max = max(max(ks_r), max(ks_l))
    queries = text_embeddings(coarse, poses)

    fine_sides: dict[int, tuple] = {}

    def side(cell_id: int):
        if cell_id not in fine_sides:
            feats, centers, _ = fine.cell_side(fine.prepare(by_id[cell_id]))
            fine_sides[cell_id] = (feats, centers)
        return fine_sides[cell_id]

    records = []
    with torch.no_grad():
        if fine is not None:
            fine.eval()
        for pose, q in zip(poses, queries):
            ranked = rank_cells(q, index, k_max)
            preds, matched = [], (math.nan, math.nan)
            if fine is not None:
                hint_feats = fine.text_encoder.hint_features(pose.texts)
                for cid, _ in ranked:
                    n = fine.regress(*side(cid), hint_feats).numpy()
                    preds.append(to_world(n, by_id[cid], clamp=True))
                n = fine.regress(*side(pose.cell_id), hint_feats).numpy()
                matched = to_world(n, by_id[pose.cell_id], clamp=True)
            records.append(QueryRecord(
                pose_id=pose.id, gt=tuple(pose.position),
                positive_cells=sorted(positive_cells(pose.position, cells)),
                ranked_cells=[c for c, _ in ranked], similarities=[s for _, s in ranked],
                predictions=preds, matched_prediction=matched,
            ))

    rr = retrieval_recall([r.ranked_cells for r in records], [set(r.positive_cells) for r in records], ks_r)
    gts = np.array([r.gt for r in records])
    size = cells[0].size_m
    if fine is not None:
        lr = localization_recall([np.array(r.predictions) for r in records], gts, ks_l, eps)
        nerr = normalized_error(np.array([r.matched_prediction for r in records]), gts, size)
    else:
        lr, nerr = {}, math.nan
    centers = np.array([by_id[p.cell_id].center[:2] for p in poses])
    base = normalized_error(centers, gts, size)
    return EvalReport(split, len(records), rr, lr, nerr, base, records, {
        "config_hash": cfg.hash(), "seed": cfg.seed, "dataset_hash": dataset.content_hash(),
        "coarse_fingerprint": index.fingerprint,
        "fine_fingerprint": fingerprint(fine) if fine is not None else None,
    })


def _mean_sd(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "sd": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0}


def run_ablation_attention(dataset: DatasetManifest, cfg: RunConfig,
                           variants: Sequence[str] | None = None,
                           seeds: Sequence[int] | None = None) -> dict[str, Any]:
    """Coarse model per (variant, seed); retrieval recall on ``cfg.eval.split``."""
    variants = tuple(variants or cfg.eval.ablation_variants)
    seeds = tuple(seeds if seeds is not None else cfg.eval.ablation_seeds)
    results: dict[str, Any] = {}
    for variant in variants:
        runs = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, model=replace(cfg.model, variant=variant))
            model = train_coarse(dataset, run_cfg).model
            report = evaluate(dataset, model, None, run_cfg)
            runs.append({"seed": seed, "retrieval_recall": report.retrieval_recall})
            log.info("ablation variant=%s seed=%d recall=%s", variant, seed, report.retrieval_recall)
        ks = runs[0]["retrieval_recall"].keys()
        results[variant] = {
            "runs": runs,
            "retrieval_recall": {k: _mean_sd([r["retrieval_recall"][k] for r in runs]) for k in ks},
        }
    return {"grid": "attention", "split": cfg.eval.split, "seeds": list(seeds), "results": results}


def run_ablation_queries(dataset: DatasetManifest, cfg: RunConfig, counts: Sequence[int] | None = None,
                         seeds: Sequence[int] | None = None) -> dict[str, Any]:
    """Coarse + fine pipeline per (query count, seed); localization recall."""
    counts = tuple(counts or cfg.eval.ablation_query_counts)
    seeds = tuple(seeds if seeds is not None else cfg.eval.ablation_seeds)
    results: dict[str, Any] = {}
    for count in counts:
        runs = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, model=replace(cfg.model, query_count=count))
            coarse = train_coarse(dataset, run_cfg).model
            fine = train_fine(dataset, run_cfg).model
            report = evaluate(dataset, coarse, fine, run_cfg)
            runs.append({"seed": seed, "retrieval_recall": report.retrieval_recall,
                         "localization_recall": report.localization_recall,
                         "mean_normalized_error": report.mean_normalized_error})
        ks = runs[0]["localization_recall"].keys()
        eps = cfg.eval.epsilons_m
        results[str(count)] = {
            "runs": runs,
            "localization_recall": {
                k: {e: _mean_sd([r["localization_recall"][k][e] for r in runs]) for e in eps} for k in ks
            },
            "mean_normalized_error": _mean_sd([r["mean_normalized_error"] for r in runs]),
        }
    return {"grid": "queries", "split": cfg.eval.split, "seeds": list(seeds), "results": results}


def masked_cells(cells: Sequence[Cell], fraction: float, seed: int) -> list[Cell]:
    return [mask_points(c, fraction, seed + c.id) for c in cells]


def run_robustness(dataset: DatasetManifest, coarse: CoarseModel, fine: FineModel, cfg: RunConfig,
                   fraction: float | None = None, seed: int | None = None) -> dict[str, Any]:
    """Evaluate on raw cells and on cells with ``fraction`` of points removed."""
    fraction = cfg.eval.mask_fraction if fraction is None else fraction
    seed = cfg.seed if seed is None else seed
    raw = evaluate(dataset, coarse, fine, cfg)
    masked = evaluate(dataset, coarse, fine, cfg, cells=masked_cells(dataset.cells, fraction, seed))

    def degradation(a: float, b: float) -> float | None:
        return (a - b) / a if a > 0 else None  # undefined when the raw recall is zero

    return {
        "fraction": fraction,
        "seed": seed,
        "split": raw.split,
        "raw": raw.summary(),
        "masked": masked.summary(),
        "degradation": {
            "retrieval_recall": {str(k): degradation(raw.retrieval_recall[k], masked.retrieval_recall[k])
                                 for k in raw.retrieval_recall},
            "localization_recall": {
                str(k): {_eps(e): degradation(raw.localization_recall[k][e], masked.localization_recall[k][e])
                         for e in raw.localization_recall[k]}
                for k in raw.localization_recall
            },
        },
    }
