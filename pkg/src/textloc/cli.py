"""``textloc`` command-line entry point.

Artifacts land in ``output_dir`` (coarse/fine checkpoints, index, reports,
figures); the dataset lives in ``dataset_dir``. Both come from the run
config and may be overridden by ``TEXTLOC_DATASET_DIR`` / ``TEXTLOC_OUTPUT_DIR``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from .coarse import EmbeddingIndex, build_index, load_coarse, retrieve, save_coarse, train_coarse
from .config import RunConfig, version_string
from .dataset import atomic_write_text, build_dataset, load_dataset, save_dataset
from .errors import ConfigurationError, IndexFingerprintError, SchemaVersionError, TextLocError
from .evaluation import evaluate, run_ablation_attention, run_ablation_queries, run_robustness
from .fine import load_fine, localize, save_fine, train_fine

log = logging.getLogger("textloc")

EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_MISMATCH = 1, 2, 3, 4

COARSE_NAME, FINE_NAME, INDEX_NAME = "coarse", "fine", "index.bin"


def resolve_config_path(name: str | None) -> str | Path | None:
    """A file path, or the name of a bundled config such as ``smoke``."""
    if name is None or Path(name).exists():
        return name
    bundled = resources.files("textloc") / "configs" / f"{name}.json"
    if bundled.is_file():
        return Path(str(bundled))
    return name


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(resolve_config_path(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _persist_config(cfg: RunConfig, out: Path, command: str) -> None:
    atomic_write_text(out / f"resolved_config.{command}.json", json.dumps(
        {**cfg.to_dict(), "config_hash": cfg.hash(), "version": version_string()}, indent=1, sort_keys=True))


def _check_pair(coarse_meta: dict, index: EmbeddingIndex, fine_meta: dict | None = None) -> None:
    if coarse_meta["fingerprint"] != index.fingerprint:
        raise IndexFingerprintError(
            f"index fingerprint {index.fingerprint} does not match coarse checkpoint {coarse_meta['fingerprint']}")
    if index.config_hash and index.config_hash != coarse_meta.get("config_hash"):
        raise IndexFingerprintError(
            f"index config hash {index.config_hash} does not match coarse checkpoint {coarse_meta.get('config_hash')}")
    if fine_meta is not None and fine_meta.get("config_hash") != coarse_meta.get("config_hash"):
        raise IndexFingerprintError(
            f"fine checkpoint config hash {fine_meta.get('config_hash')} does not match "
            f"coarse checkpoint {coarse_meta.get('config_hash')}")


def cmd_gen_data(args, cfg: RunConfig) -> dict[str, Any]:
    manifest = build_dataset(cfg.data)
    path = save_dataset(manifest, cfg.dataset_dir)
    return {"dataset_dir": str(path), "dataset_hash": manifest.content_hash(), "cells": len(manifest.cells),
            "poses": len(manifest.poses),
            "splits": {s: len(manifest.split(s)) for s in ("train", "val", "test")}}


def _train(args, cfg: RunConfig, stage: str) -> dict[str, Any]:
    from .plotting import plot_loss_curve

    dataset = load_dataset(cfg.dataset_dir)
    out = _out(cfg)
    _persist_config(cfg, out, f"train-{stage}")
    if stage == "coarse":
        res = train_coarse(dataset, cfg)
        meta = save_coarse(out / COARSE_NAME, res.model, cfg, res.loss_curve)
    else:
        res = train_fine(dataset, cfg)
        meta = save_fine(out / FINE_NAME, res.model, cfg, res.loss_curve)
    plot_loss_curve(res.loss_curve, out / f"{stage}_loss.png", f"{stage} training loss")
    return {"checkpoint": str(out / f"{stage}.pt"), "fingerprint": meta["fingerprint"],
            "config_hash": meta["config_hash"], "initial_loss": res.initial_loss, "final_loss": res.final_loss,
            "loss_curve": res.loss_curve}


def cmd_build_index(args, cfg: RunConfig) -> dict[str, Any]:
    dataset = load_dataset(cfg.dataset_dir)
    out = _out(cfg)
    ckpt = Path(args.coarse_ckpt) if args.coarse_ckpt else out / COARSE_NAME
    model, meta = load_coarse(ckpt)
    index = build_index(dataset.cells, model, meta["config_hash"])
    index.extra = {"coarse_checkpoint": str(ckpt.resolve()), "dataset_dir": str(Path(cfg.dataset_dir).resolve())}
    path = index.save(Path(args.out) if args.out else out / INDEX_NAME)
    return {"index": str(path), "cells": len(index), "dim": index.dim, "fingerprint": index.fingerprint}


def cmd_localize(args, cfg: RunConfig) -> dict[str, Any]:
    hints = [h.strip() for h in args.text.split("|") if h.strip()]
    if not hints:
        raise ConfigurationError("--text must contain at least one hint")
    index = EmbeddingIndex.load(args.index)
    coarse_path = args.coarse_ckpt or index.extra.get("coarse_checkpoint")
    if not coarse_path:
        raise ConfigurationError("index does not record its coarse checkpoint; pass --coarse-ckpt")
    coarse, coarse_meta = load_coarse(coarse_path)
    fine, fine_meta = load_fine(args.fine_ckpt)
    _check_pair(coarse_meta, index, fine_meta)
    dataset = load_dataset(args.dataset or index.extra.get("dataset_dir") or cfg.dataset_dir)
    candidates = []
    for cell_id, sim in retrieve(hints, index, coarse, args.k):
        pred = localize(hints, dataset.cell_by_id(cell_id), fine)
        candidates.append({"cell_id": cell_id, "similarity": sim, "position": list(pred.world),
                           "normalized": list(pred.normalized)})
    return {"hints": hints, "k": args.k, "candidates": candidates}


def cmd_evaluate(args, cfg: RunConfig) -> dict[str, Any]:
    dataset = load_dataset(cfg.dataset_dir)
    out = _out(cfg)
    coarse, coarse_meta = load_coarse(Path(args.coarse_ckpt) if args.coarse_ckpt else out / COARSE_NAME)
    fine, fine_meta = load_fine(Path(args.fine_ckpt) if args.fine_ckpt else out / FINE_NAME)
    index = EmbeddingIndex.load(Path(args.index) if args.index else out / INDEX_NAME)
    _check_pair(coarse_meta, index, fine_meta)
    if args.split:
        cfg = replace(cfg, eval=replace(cfg.eval, split=args.split))
    _persist_config(cfg, out, "evaluate")
    report = evaluate(dataset, coarse, fine, cfg, index=index)
    report.provenance.update(version=version_string(), checkpoint_config_hash=coarse_meta["config_hash"])
    paths = report.write(out)
    result: dict[str, Any] = {"report": str(paths["json"]), **report.summary()}
    if args.robustness:
        rob = run_robustness(dataset, coarse, fine, cfg)
        rob.update(config_hash=cfg.hash(), version=version_string())
        atomic_write_text(out / "robustness.json", json.dumps(rob, indent=1, sort_keys=True))
        result["robustness"] = rob["degradation"]
    if args.plots:
        from .plotting import plot_eval_report, plot_robustness

        figs = plot_eval_report(report, out)
        if args.robustness:
            figs += plot_robustness(rob, out)
        result["figures"] = [str(p) for p in figs]
    return result


def cmd_ablate(args, cfg: RunConfig) -> dict[str, Any]:
    dataset = load_dataset(cfg.dataset_dir)
    out = _out(cfg)
    _persist_config(cfg, out, f"ablate-{args.grid}")
    seeds = args.seeds if args.seeds else None
    if args.grid == "attention":
        result = run_ablation_attention(dataset, cfg, seeds=seeds)
    else:
        result = run_ablation_queries(dataset, cfg, seeds=seeds)
    result.update(config_hash=cfg.hash(), version=version_string())
    path = out / f"ablation_{args.grid}.json"
    atomic_write_text(path, json.dumps(result, indent=1, sort_keys=True, default=str))
    if args.plots:
        from .plotting import plot_ablation

        result["figures"] = [str(p) for p in plot_ablation(result, out)]
    return {"report": str(path), **result}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (or a bundled name such as 'smoke')")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="textloc", description="Text-to-point-cloud localization toolkit.")
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("train-coarse", parents=[common], help="train the retrieval model")
    sub.add_parser("train-fine", parents=[common], help="train the position regressor")

    p = sub.add_parser("build-index", parents=[common], help="embed every cell into an index file")
    p.add_argument("--coarse-ckpt")
    p.add_argument("--out")

    p = sub.add_parser("localize", parents=[common], help="localize one text query")
    p.add_argument("--text", required=True, help='hints separated by "|"')
    p.add_argument("--index", required=True)
    p.add_argument("--fine-ckpt", required=True)
    p.add_argument("--coarse-ckpt")
    p.add_argument("--dataset")
    p.add_argument("--k", type=int, default=3)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate the trained pipeline")
    p.add_argument("--coarse-ckpt")
    p.add_argument("--fine-ckpt")
    p.add_argument("--index")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--robustness", action="store_true", help="also run the point-masking study")
    p.add_argument("--plots", action="store_true", help="render PNG figures next to the CSV output")

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("--grid", choices=("attention", "queries"), required=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--plots", action="store_true")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-coarse": lambda a, c: _train(a, c, "coarse"),
    "train-fine": lambda a, c: _train(a, c, "fine"),
    "build-index": cmd_build_index,
    "localize": cmd_localize,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def _print_human(command: str, result: dict[str, Any]) -> None:
    if command == "localize":
        for rank, c in enumerate(result["candidates"], 1):
            x, y = c["position"]
            print(f"{rank}. cell {c['cell_id']}  similarity {c['similarity']:.4f}  position ({x:.2f}, {y:.2f})")
        return
    for key, value in result.items():
        if key in ("loss_curve", "results", "records"):
            continue
        print(f"{key}: {value}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "k", 1) < 1:
        parser.error("--k must be >= 1")
    try:
        cfg = load_config(args)
        result = COMMANDS[args.command](args, cfg)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (IndexFingerprintError, SchemaVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (TextLocError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.json:
        print(json.dumps(result, sort_keys=True, default=str))
    else:
        _print_human(args.command, result)
    return 0
