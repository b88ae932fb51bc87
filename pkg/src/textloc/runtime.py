"""Seeding, checkpoint persistence and parameter fingerprints.

A checkpoint is two files: ``<name>.pt`` holds a versioned dict of named
parameter tensors, ``<name>.json`` holds the config sidecar (model config,
vocabulary, fingerprint, config hash, version string, loss curve).
"""
from __future__ import annotations

import hashlib
import io
import json
import random
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .config import version_string
from .dataset import atomic_write_bytes, atomic_write_text
from .errors import DivergenceError, SchemaVersionError

CHECKPOINT_SCHEMA_VERSION = 1


def seed_everything(seed: int) -> np.random.Generator:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def fingerprint(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def check_finite(loss: torch.Tensor, where: str, **diagnostics: Any) -> None:
    if not torch.isfinite(loss):
        details = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        raise DivergenceError(f"non-finite loss during {where} ({details})")


def checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".pt", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".pt"), p.with_suffix(".json")


def save_checkpoint(path: str | Path, kind: str, module: nn.Module, sidecar: dict[str, Any]) -> dict[str, Any]:
    pt, js = checkpoint_paths(path)
    buf = io.BytesIO()
    torch.save({"schema_version": CHECKPOINT_SCHEMA_VERSION, "kind": kind,
                "tensors": module.state_dict()}, buf)
    meta = {
        **sidecar,
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": kind,
        "fingerprint": fingerprint(module),
        "version": version_string(),
    }
    atomic_write_bytes(pt, buf.getvalue())
    atomic_write_text(js, json.dumps(meta, indent=1, sort_keys=True))
    return meta


def load_checkpoint(path: str | Path, kind: str) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    pt, js = checkpoint_paths(path)
    if not pt.exists() or not js.exists():
        raise FileNotFoundError(f"checkpoint files missing: {pt} / {js}")
    meta = json.loads(js.read_text())
    blob = torch.load(pt, map_location="cpu", weights_only=True)
    for where, version in (("sidecar", meta.get("schema_version")), ("tensor blob", blob.get("schema_version"))):
        if version != CHECKPOINT_SCHEMA_VERSION:
            raise SchemaVersionError(
                f"checkpoint {where} schema_version {version!r} unsupported (expected {CHECKPOINT_SCHEMA_VERSION})"
            )
    if meta.get("kind") != kind or blob.get("kind") != kind:
        raise ValueError(f"{pt} is a {meta.get('kind')!r} checkpoint, expected {kind!r}")
    return blob["tensors"], meta
