"""Dataset manifest and its on-disk layout.

Layout of a dataset directory::

    manifest.json        metadata, instance table, cell records, poses
    cells/00000.bin      per-cell payload, little-endian:
                         points f4[n,3] | colors f4[n,3] | instance ids i4[n] | class ids i4[n]
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import DataConfig, canonical_json, config_hash, version_string
from .errors import SchemaVersionError
from .scene_synth import (
    Cell,
    Hint,
    PoseSample,
    Scene,
    SceneSpec,
    generate_scene,
    sample_poses,
    slice_cells,
)

SCHEMA_VERSION = 1


@dataclass
class InstanceRecord:
    id: int
    class_name: str
    color_name: str
    center: tuple[float, float, float]
    point_count: int


@dataclass
class DatasetManifest:
    extent_m: tuple[float, float]
    class_names: tuple[str, ...]
    color_names: tuple[str, ...]
    instances: list[InstanceRecord]
    cells: list[Cell]
    poses: list[PoseSample]
    seed: int
    spec_hash: str
    data_config: dict[str, Any] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @property
    def cell_size_m(self) -> float:
        return self.cells[0].size_m

    def cell_by_id(self, cell_id: int) -> Cell:
        return self._cell_index()[cell_id]

    def _cell_index(self) -> dict[int, Cell]:
        cache = self.__dict__.get("_cells_by_id")
        if cache is None or len(cache) != len(self.cells):
            cache = {c.id: c for c in self.cells}
            self.__dict__["_cells_by_id"] = cache
        return cache

    def instance_by_id(self, iid: int) -> InstanceRecord:
        cache = self.__dict__.get("_inst_by_id")
        if cache is None:
            cache = {r.id: r for r in self.instances}
            self.__dict__["_inst_by_id"] = cache
        return cache[iid]

    def split(self, name: str) -> list[PoseSample]:
        return [p for p in self.poses if p.split == name]

    def with_cells(self, cells: list[Cell]) -> "DatasetManifest":
        """Copy sharing everything but the cell list (e.g. masked cells)."""
        return DatasetManifest(
            self.extent_m, self.class_names, self.color_names, self.instances, cells,
            self.poses, self.seed, self.spec_hash, self.data_config, self.schema_version,
        )

    def content_hash(self) -> str:
        h = hashlib.sha256(canonical_json(_manifest_json(self)).encode())
        for cell in self.cells:
            h.update(_cell_bytes(cell))
        return h.hexdigest()[:16]


def scene_spec_from_config(cfg: DataConfig) -> SceneSpec:
    return SceneSpec(
        extent_m=tuple(cfg.extent_m),
        instance_count_range=tuple(cfg.instance_count_range),
        points_per_instance_range=tuple(cfg.points_per_instance_range),
        rng_seed=cfg.seed,
        min_cell_size_m=cfg.cell_size_m,
    )


def build_dataset(cfg: DataConfig) -> DatasetManifest:
    """Generate scene, cells and poses for one data config."""
    spec = scene_spec_from_config(cfg)
    scene = generate_scene(spec)
    cells = slice_cells(scene, cfg.cell_size_m, cfg.stride_m)
    poses = sample_poses(
        scene, cells,
        anchor_spacing_m=cfg.anchor_spacing_m,
        extras_per_anchor=cfg.extras_per_anchor,
        min_nearby_instances=cfg.min_nearby_instances,
        k_hints=cfg.k_hints,
        on_top_radius_m=cfg.on_top_radius_m,
        split_fractions=tuple(cfg.split_fractions),
        seed=cfg.seed + 1,
    )
    return manifest_from_scene(scene, cells, poses, cfg)


def manifest_from_scene(scene: Scene, cells: list[Cell], poses: list[PoseSample],
                        cfg: DataConfig) -> DatasetManifest:
    records = [
        InstanceRecord(i.id, i.class_name, i.color_name,
                       tuple(float(v) for v in i.center), int(len(i.points)))
        for i in scene.instances
    ]
    cfg_dict = json.loads(canonical_json(asdict(cfg)))
    return DatasetManifest(
        extent_m=scene.extent,
        class_names=tuple(scene.spec.class_palette),
        color_names=tuple(name for name, _ in scene.spec.color_palette),
        instances=records,
        cells=cells,
        poses=poses,
        seed=cfg.seed,
        spec_hash=config_hash(cfg_dict),
        data_config=cfg_dict,
    )


def _cell_bytes(cell: Cell) -> bytes:
    return b"".join([
        np.ascontiguousarray(cell.points, dtype="<f4").tobytes(),
        np.ascontiguousarray(cell.colors, dtype="<f4").tobytes(),
        np.ascontiguousarray(cell.point_instance_ids, dtype="<i4").tobytes(),
        np.ascontiguousarray(cell.point_class_ids, dtype="<i4").tobytes(),
    ])


def _manifest_json(m: DatasetManifest) -> dict[str, Any]:
    return {
        "schema_version": m.schema_version,
        "extent_m": list(m.extent_m),
        "class_names": list(m.class_names),
        "color_names": list(m.color_names),
        "seed": m.seed,
        "spec_hash": m.spec_hash,
        "data_config": m.data_config,
        "instances": [asdict(r) for r in m.instances],
        "cells": [
            {"id": c.id, "origin": [float(v) for v in c.origin], "size_m": c.size_m,
             "num_points": c.num_points, "file": f"cells/{c.id:05d}.bin"}
            for c in m.cells
        ],
        "poses": [
            {"id": p.id, "position": list(p.position), "cell_id": p.cell_id, "split": p.split,
             "anchor_id": p.anchor_id, "hints": [asdict(h) for h in p.hints]}
            for p in m.poses
        ],
        "splits": {s: [p.id for p in m.poses if p.split == s] for s in ("train", "val", "test")},
    }


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def save_dataset(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    root = Path(path)
    for cell in manifest.cells:
        atomic_write_bytes(root / "cells" / f"{cell.id:05d}.bin", _cell_bytes(cell))
    doc = {**_manifest_json(manifest), "version": version_string()}
    atomic_write_text(root / "manifest.json", json.dumps(doc, indent=1, sort_keys=True))
    return root


def load_dataset(path: str | os.PathLike) -> DatasetManifest:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"dataset manifest not found: {mpath}")
    raw = json.loads(mpath.read_text())
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"dataset schema_version {version!r} in {mpath} is not supported (expected {SCHEMA_VERSION})"
        )
    cells = []
    for rec in raw["cells"]:
        n = int(rec["num_points"])
        buf = (root / rec["file"]).read_bytes()
        expected = n * (12 + 12 + 4 + 4)
        if len(buf) != expected:
            raise OSError(f"cell payload {rec['file']} has {len(buf)} bytes, expected {expected}")
        o = 0
        pts = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=o).reshape(n, 3).astype(np.float32)
        o += 12 * n
        cols = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=o).reshape(n, 3).astype(np.float32)
        o += 12 * n
        iids = np.frombuffer(buf, dtype="<i4", count=n, offset=o).astype(np.int32)
        o += 4 * n
        cids = np.frombuffer(buf, dtype="<i4", count=n, offset=o).astype(np.int32)
        cells.append(Cell(int(rec["id"]), np.asarray(rec["origin"], dtype=np.float64),
                          float(rec["size_m"]), pts, cols, iids, cids))
    poses = [
        PoseSample(
            position=tuple(p["position"]), cell_id=int(p["cell_id"]),
            hints=[Hint(**h) for h in p["hints"]], split=p["split"],
            anchor_id=int(p["anchor_id"]), id=int(p["id"]),
        )
        for p in raw["poses"]
    ]
    return DatasetManifest(
        extent_m=tuple(raw["extent_m"]),
        class_names=tuple(raw["class_names"]),
        color_names=tuple(raw["color_names"]),
        instances=[InstanceRecord(**{**r, "center": tuple(r["center"])}) for r in raw["instances"]],
        cells=cells,
        poses=poses,
        seed=int(raw["seed"]),
        spec_hash=raw["spec_hash"],
        data_config=raw["data_config"],
        schema_version=version,
    )
