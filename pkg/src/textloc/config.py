"""Declarative run configuration.

A run config is JSON with five sections (``data``, ``model``, ``coarse``,
``fine``, ``eval``) plus top-level ``seed`` and path entries. Unknown keys
are rejected. Paths may be overridden through ``TEXTLOC_*`` environment
variables; nothing else is read from the environment.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import subprocess
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints

from . import __version__
from .errors import ConfigurationError


@dataclass
class DataConfig:
    extent_m: tuple[float, float] = (100.0, 100.0)
    instance_count_range: tuple[int, int] = (60, 60)
    points_per_instance_range: tuple[int, int] = (80, 160)
    cell_size_m: float = 30.0
    stride_m: float = 10.0
    anchor_spacing_m: float = 14.0
    extras_per_anchor: int = 8
    min_nearby_instances: int = 6
    k_hints: int = 3
    on_top_radius_m: float = 2.0
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0


@dataclass
class ModelConfig:
    dim: int = 128
    heads: int = 4
    ffn_hidden: int = 256
    query_count: int = 24
    refine_layers: int = 3
    voxel_size_m: float = 0.15
    confidence_threshold: float = 0.5
    mask_threshold: float = 0.5
    variant: str = "rowcol"
    layer_norm: bool = True


@dataclass
class CoarseTrainConfig:
    lr: float = 1e-3
    epochs: int = 24
    decay_epoch: int = 12
    decay_factor: float = 0.1
    batch_size: int = 16
    weight_decay: float = 1e-2
    lambda_c: float = 1.0
    lambda_inst: float = 0.5
    tau_init: float = 0.07
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-3


@dataclass
class FineTrainConfig:
    lr: float = 3e-4
    epochs: int = 12
    batch_size: int = 8
    lambda_c: float = 1.0
    lambda_inst: float = 0.5
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-3


@dataclass
class EvalConfig:
    retrieval_ks: tuple[int, ...] = (1, 3, 5)
    localization_ks: tuple[int, ...] = (1, 5, 10)
    epsilons_m: tuple[float, ...] = (5.0, 10.0, 15.0)
    split: str = "val"
    mask_fraction: float = 1.0 / 3.0
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    ablation_variants: tuple[str, ...] = ("naive", "value", "row", "rowcol")
    ablation_query_counts: tuple[int, ...] = (16, 24, 32)


@dataclass
class RunConfig:
    seed: int = 0
    dataset_dir: str = "runs/dataset"
    output_dir: str = "runs/out"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    coarse: CoarseTrainConfig = field(default_factory=CoarseTrainConfig)
    fine: FineTrainConfig = field(default_factory=FineTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        cfg = _build(cls, raw, "config")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "RunConfig":
        raw: dict[str, Any] = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigurationError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
        cfg = cls.from_dict(raw)
        for key, env in (("dataset_dir", "TEXTLOC_DATASET_DIR"), ("output_dir", "TEXTLOC_OUTPUT_DIR")):
            if os.environ.get(env):
                setattr(cfg, key, os.environ[env])
        return cfg

    def validate(self) -> None:
        m = self.model
        if m.dim < 1 or m.heads < 1 or m.dim % m.heads:
            raise ConfigurationError(f"model.dim ({m.dim}) must be a positive multiple of heads ({m.heads})")
        if m.variant not in ("naive", "value", "row", "rowcol"):
            raise ConfigurationError(f"unknown attention variant {m.variant!r}")
        if m.query_count < 1 or m.refine_layers < 1:
            raise ConfigurationError("query_count and refine_layers must be >= 1")
        for name in ("confidence_threshold", "mask_threshold"):
            if not 0.0 < getattr(m, name) < 1.0:
                raise ConfigurationError(f"model.{name} must lie in (0, 1)")
        if m.voxel_size_m <= 0:
            raise ConfigurationError("model.voxel_size_m must be positive")
        if self.coarse.tau_init <= 0:
            raise ConfigurationError("coarse.tau_init must be positive")
        for section in (self.coarse, self.fine):
            if section.lr <= 0 or section.epochs < 0 or section.batch_size < 1:
                raise ConfigurationError("training lr/epochs/batch_size out of range")
            if section.lambda_c < 0 or section.lambda_inst < 0:
                raise ConfigurationError("loss weights must be non-negative")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigurationError(f"eval.split must be train/val/test, got {self.eval.split!r}")

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls: type, raw: Any, where: str) -> Any:
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(tp, value, f"{where}.{name}")
    return cls(**kwargs)


def _coerce(tp: Any, value: Any, where: str) -> Any:
    origin = getattr(tp, "__origin__", None)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where} must be a list")
        args = tp.__args__
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigurationError(f"{where} must have {len(args)} entries")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string")
        return value
    return value


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def version_string() -> str:
    """``git describe``-style version, falling back to the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__
