"""Report figures (PNG) and their delimited companions (CSV)."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport, write_csv  # noqa: E402


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_loss_curve(curve: Sequence[float], path: str | Path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(len(curve)), curve, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    path = Path(path)
    write_csv(path.with_suffix(".csv"), [("epoch", "loss"), *enumerate(curve)])
    return _save(fig, path)


def plot_eval_report(report: EvalReport, out_dir: str | Path, stem: str = "eval") -> list[Path]:
    out = Path(out_dir)
    paths = []
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ks = list(report.retrieval_recall)
    ax.bar([str(k) for k in ks], [report.retrieval_recall[k] for k in ks], color="tab:blue")
    ax.set_ylim(0, 1)
    ax.set_xlabel("top-k")
    ax.set_ylabel("retrieval recall")
    ax.set_title(f"retrieval ({report.split})")
    paths.append(_save(fig, out / f"{stem}_retrieval.png"))

    if report.localization_recall:
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ks = list(report.localization_recall)
        for eps in report.localization_recall[ks[0]]:
            label = "inf" if math.isinf(eps) else f"{eps:g} m"
            ax.plot(ks, [report.localization_recall[k][eps] for k in ks], marker="o", label=label)
        ax.set_ylim(0, 1)
        ax.set_xlabel("top-k")
        ax.set_ylabel("localization recall")
        ax.legend(title="epsilon")
        ax.grid(alpha=0.3)
        paths.append(_save(fig, out / f"{stem}_localization.png"))

    matched = np.array([r.matched_prediction for r in report.records], dtype=np.float64)
    if len(matched) and np.isfinite(matched).all():
        gts = np.array([r.gt for r in report.records])
        errs = np.linalg.norm(matched - gts, axis=1)
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.hist(errs, bins=20, color="tab:green")
        ax.set_xlabel("matched-pair error (m)")
        ax.set_ylabel("queries")
        paths.append(_save(fig, out / f"{stem}_fine_error.png"))
        write_csv(out / f"{stem}_fine_error.csv",
                  [("pose_id", "error_m"), *((r.pose_id, e) for r, e in zip(report.records, errs))])
    return paths


def plot_ablation(result: dict[str, Any], out_dir: str | Path) -> list[Path]:
    """Grouped bars of mean recall with one-sd error bars per grid entry."""
    out = Path(out_dir)
    grid = result["grid"]
    names = list(result["results"])
    if grid == "attention":
        series = {f"R@{k}": [result["results"][n]["retrieval_recall"][k] for n in names]
                  for k in result["results"][names[0]]["retrieval_recall"]}
    else:
        first = result["results"][names[0]]["localization_recall"]
        k1 = next(iter(first))
        series = {f"k={k1} {e:g} m": [result["results"][n]["localization_recall"][k1][e] for n in names]
                  for e in first[k1]}
    rows = [("entry", "metric", "mean", "sd")]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(series), 1)
    x = np.arange(len(names))
    for i, (label, stats) in enumerate(series.items()):
        ax.bar(x + i * width, [s["mean"] for s in stats], width, yerr=[s["sd"] for s in stats],
               capsize=3, label=label)
        rows += [(n, label, s["mean"], s["sd"]) for n, s in zip(names, stats)]
    ax.set_xticks(x + width * (len(series) - 1) / 2, names)
    ax.set_ylim(0, 1)
    ax.set_ylabel("recall")
    ax.set_title(f"{grid} ablation ({result['split']}, {len(result['seeds'])} seeds)")
    ax.legend(fontsize=8)
    write_csv(out / f"ablation_{grid}.csv", rows)
    return [_save(fig, out / f"ablation_{grid}.png"), out / f"ablation_{grid}.csv"]


def plot_robustness(result: dict[str, Any], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    raw, masked = result["raw"], result["masked"]
    labels, a, b = [], [], []
    for k, v in raw["retrieval_recall"].items():
        labels.append(f"R@{k}")
        a.append(v)
        b.append(masked["retrieval_recall"][k])
    for k, row in raw["localization_recall"].items():
        for e, v in row.items():
            labels.append(f"L@{k},{e}")
            a.append(v)
            b.append(masked["localization_recall"][k][e])
    fig, ax = plt.subplots(figsize=(7, 3.5))
    x = np.arange(len(labels))
    ax.bar(x - 0.2, a, 0.4, label="raw")
    ax.bar(x + 0.2, b, 0.4, label=f"masked {result['fraction']:.2f}")
    ax.set_xticks(x, labels, rotation=60, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_ylabel("recall")
    ax.legend()
    write_csv(out / "robustness.csv", [("metric", "raw", "masked"), *zip(labels, a, b)])
    return [_save(fig, out / "robustness.png"), out / "robustness.csv"]
