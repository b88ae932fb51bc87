"""Procedural city scenes, cell slicing, pose sampling and templated hints."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DatasetGenerationError, EmptyDatasetError

DIRECTIONS = (
    "north", "south", "east", "west",
    "north-east", "north-west", "south-east", "south-west", "on-top",
)
# 45 degree sectors counter-clockwise from east; +y is north.
_SECTORS = ("east", "north-east", "north", "north-west", "west", "south-west", "south", "south-east")

DEFAULT_CLASSES = (
    "building", "vegetation", "parking", "road", "pole", "traffic-sign", "fence", "sidewalk",
)
DEFAULT_COLORS = (
    ("dark-green", (0.10, 0.35, 0.12)),
    ("beige", (0.87, 0.80, 0.62)),
    ("gray", (0.50, 0.50, 0.50)),
    ("white", (0.95, 0.95, 0.95)),
    ("black", (0.08, 0.08, 0.08)),
    ("red", (0.85, 0.15, 0.12)),
    ("blue", (0.15, 0.25, 0.85)),
    ("yellow", (0.92, 0.85, 0.15)),
    ("brown", (0.45, 0.28, 0.12)),
    ("bright-green", (0.40, 0.90, 0.30)),
)

# (footprint x range, footprint y range, height range, base z range, shape)
_CLASS_PRIORS = {
    "building": ((6.0, 12.0), (6.0, 12.0), (6.0, 15.0), (0.0, 0.0), "box"),
    "vegetation": ((3.0, 6.0), (3.0, 6.0), (3.0, 6.0), (0.5, 2.0), "ellipsoid"),
    "parking": ((5.0, 10.0), (4.0, 8.0), (0.1, 0.3), (0.0, 0.0), "box"),
    "road": ((14.0, 24.0), (4.0, 6.0), (0.05, 0.15), (0.0, 0.0), "box"),
    "pole": ((0.2, 0.4), (0.2, 0.4), (4.0, 8.0), (0.0, 0.0), "box"),
    "traffic-sign": ((0.6, 1.0), (0.1, 0.3), (0.6, 1.0), (2.0, 3.0), "box"),
    "fence": ((6.0, 12.0), (0.1, 0.3), (1.0, 2.0), (0.0, 0.0), "box"),
    "sidewalk": ((8.0, 15.0), (1.5, 3.0), (0.1, 0.25), (0.0, 0.0), "box"),
}
_FALLBACK_PRIOR = ((2.0, 6.0), (2.0, 6.0), (1.0, 4.0), (0.0, 0.0), "ellipsoid")

HINT_TEMPLATE = "The pose is on {direction} of a {color} {cls}."
ON_TOP_TEMPLATE = "The pose is on-top of a {color} {cls}."


@dataclass(frozen=True)
class SceneSpec:
    extent_m: tuple[float, float] = (100.0, 100.0)
    instance_count_range: tuple[int, int] = (60, 60)
    class_palette: tuple[str, ...] = DEFAULT_CLASSES
    color_palette: tuple[tuple[str, tuple[float, float, float]], ...] = DEFAULT_COLORS
    points_per_instance_range: tuple[int, int] = (80, 160)
    rng_seed: int = 0
    min_cell_size_m: float = 30.0
    color_noise: float = 0.03

    def validate(self) -> None:
        if not self.class_palette:
            raise ConfigurationError("class_palette must not be empty")
        if not self.color_palette:
            raise ConfigurationError("color_palette must not be empty")
        if min(self.extent_m) <= 0:
            raise ConfigurationError(f"extent must be positive, got {self.extent_m}")
        if min(self.extent_m) < self.min_cell_size_m:
            raise ConfigurationError(
                f"extent {self.extent_m} is smaller than one cell ({self.min_cell_size_m} m)"
            )
        for name, (lo, hi) in (
            ("instance_count_range", self.instance_count_range),
            ("points_per_instance_range", self.points_per_instance_range),
        ):
            if lo > hi or lo < 1:
                raise ConfigurationError(f"{name} must satisfy 1 <= min <= max, got {(lo, hi)}")


@dataclass
class Instance:
    id: int
    class_name: str
    color_name: str
    points: np.ndarray  # (N, 3) float64
    colors: np.ndarray  # (N, 3) in [0, 1]

    @property
    def center(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass
class Scene:
    spec: SceneSpec
    instances: list[Instance]

    @property
    def extent(self) -> tuple[float, float]:
        return (float(self.spec.extent_m[0]), float(self.spec.extent_m[1]))

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(self.spec.class_palette)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Flatten to (points, colors, instance ids, class ids)."""
        cls_index = {c: i for i, c in enumerate(self.spec.class_palette)}
        pts = np.concatenate([inst.points for inst in self.instances])
        cols = np.concatenate([inst.colors for inst in self.instances])
        ids = np.concatenate([np.full(len(inst.points), inst.id, dtype=np.int32) for inst in self.instances])
        cls = np.concatenate(
            [np.full(len(inst.points), cls_index[inst.class_name], dtype=np.int32) for inst in self.instances]
        )
        return pts, cols, ids, cls


@dataclass
class Cell:
    id: int
    origin: np.ndarray  # (3,)
    size_m: float
    points: np.ndarray  # (n, 3) float32, world frame
    colors: np.ndarray  # (n, 3) float32
    point_instance_ids: np.ndarray  # (n,) int32
    point_class_ids: np.ndarray  # (n,) int32

    @property
    def center(self) -> np.ndarray:
        return self.origin + self.size_m / 2.0

    @property
    def num_points(self) -> int:
        return len(self.points)

    def instance_ids(self) -> np.ndarray:
        return np.unique(self.point_instance_ids)

    def contains_xy(self, xy: Sequence[float]) -> bool:
        x, y = float(xy[0]), float(xy[1])
        ox, oy = float(self.origin[0]), float(self.origin[1])
        return ox <= x <= ox + self.size_m and oy <= y <= oy + self.size_m

    def translated(self, offset: Sequence[float]) -> "Cell":
        off = np.asarray(offset, dtype=np.float64)
        return Cell(
            id=self.id,
            origin=self.origin + off,
            size_m=self.size_m,
            points=(self.points.astype(np.float64) + off).astype(np.float32),
            colors=self.colors.copy(),
            point_instance_ids=self.point_instance_ids.copy(),
            point_class_ids=self.point_class_ids.copy(),
        )


@dataclass
class Hint:
    direction: str
    color_name: str
    class_name: str
    text: str
    instance_id: int


@dataclass
class PoseSample:
    position: tuple[float, float]
    cell_id: int
    hints: list[Hint]
    split: str = "train"
    anchor_id: int = 0
    id: int = 0

    @property
    def texts(self) -> list[str]:
        return [h.text for h in self.hints]


def render_hint(direction: str, color_name: str, class_name: str) -> str:
    if direction == "on-top":
        return ON_TOP_TEMPLATE.format(color=color_name, cls=class_name)
    return HINT_TEMPLATE.format(direction=direction, color=color_name, cls=class_name)


def _sample_instance(rng: np.random.Generator, spec: SceneSpec, iid: int, center_xy: np.ndarray,
                     class_name: str, color_name: str, rgb: np.ndarray) -> Instance:
    sx_r, sy_r, h_r, z_r, shape = _CLASS_PRIORS.get(class_name, _FALLBACK_PRIOR)
    sx, sy = rng.uniform(*sx_r), rng.uniform(*sy_r)
    if rng.random() < 0.5:  # random axis-aligned orientation
        sx, sy = sy, sx
    h = rng.uniform(*h_r)
    z0 = rng.uniform(*z_r)
    n = int(rng.integers(spec.points_per_instance_range[0], spec.points_per_instance_range[1] + 1))
    if shape == "ellipsoid":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True) + 1e-12
        r = rng.random(n) ** (1.0 / 3.0)
        local = d * r[:, None] * np.array([sx / 2, sy / 2, h / 2])
        local[:, 2] += h / 2
    else:
        local = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([sx, sy, h])
        local[:, 2] += h / 2
    pts = local + np.array([center_xy[0], center_xy[1], z0])
    ex, ey = spec.extent_m
    pts[:, 0] = np.clip(pts[:, 0], 0.0, ex)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, ey)
    pts[:, 2] = np.maximum(pts[:, 2], 0.0)
    cols = np.clip(rgb + rng.normal(scale=spec.color_noise, size=(n, 3)), 0.0, 1.0)
    return Instance(iid, class_name, color_name, pts, cols)


def generate_scene(spec: SceneSpec) -> Scene:
    """Place randomly sized, colored instances over the scene footprint.

    Deterministic given ``spec.rng_seed``. Instance centers are spread by
    rejection sampling against a minimum horizontal separation.
    """
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    lo, hi = spec.instance_count_range
    count = int(rng.integers(lo, hi + 1))
    ex, ey = spec.extent_m
    min_sep = 0.5 * math.sqrt(ex * ey / count)
    centers: list[np.ndarray] = []
    instances = []
    for iid in range(count):
        c = rng.uniform([0.0, 0.0], [ex, ey])
        for _ in range(30):
            if not centers or np.min(np.linalg.norm(np.asarray(centers) - c, axis=1)) >= min_sep:
                break
            c = rng.uniform([0.0, 0.0], [ex, ey])
        centers.append(c)
        class_name = spec.class_palette[int(rng.integers(len(spec.class_palette)))]
        color_name, rgb = spec.color_palette[int(rng.integers(len(spec.color_palette)))]
        instances.append(
            _sample_instance(rng, spec, iid, c, class_name, color_name, np.asarray(rgb, dtype=np.float64))
        )
    return Scene(spec, instances)


def cell_origins_1d(extent: float, cell_size: float, stride: float) -> list[float]:
    """Origins ``o`` with ``o + cell_size <= extent`` on a stride grid.

    A final origin flush with the far edge is appended when the stride grid
    does not reach it, so the cells always tile the full extent.
    """
    if cell_size <= 0 or not 0 < stride <= cell_size:
        raise ConfigurationError(f"need cell_size > 0 and 0 < stride <= cell_size, got {cell_size}, {stride}")
    if extent < cell_size - 1e-9:
        raise ConfigurationError(f"extent {extent} smaller than cell size {cell_size}")
    n = int(math.floor((extent - cell_size) / stride + 1e-9)) + 1
    origins = [i * stride for i in range(n)]
    if origins[-1] + cell_size < extent - 1e-9:
        origins.append(extent - cell_size)
    return origins


def slice_cells(scene: Scene, cell_size_m: float = 30.0, stride_m: float = 10.0) -> list[Cell]:
    """Cut the scene into cubic cells on a horizontal stride grid.

    Boxes are half-open ``[o, o + size)`` except on the far edge of the
    scene, which is closed, so ``stride == size`` partitions the points.
    Empty cells are dropped and the remaining cells numbered consecutively.
    """
    pts, cols, ids, cls = scene.arrays()
    ex, ey = scene.extent
    xs = cell_origins_1d(ex, cell_size_m, stride_m)
    ys = cell_origins_1d(ey, cell_size_m, stride_m)
    z = pts[:, 2]
    z_in = (z >= 0.0) & (z <= cell_size_m)
    cells = []
    for ox in xs:
        in_x = (pts[:, 0] >= ox) & ((pts[:, 0] < ox + cell_size_m) | ((ox + cell_size_m >= ex) & (pts[:, 0] <= ex)))
        for oy in ys:
            in_y = (pts[:, 1] >= oy) & (
                (pts[:, 1] < oy + cell_size_m) | ((oy + cell_size_m >= ey) & (pts[:, 1] <= ey))
            )
            sel = in_x & in_y & z_in
            if not sel.any():
                continue
            cells.append(
                Cell(
                    id=len(cells),
                    origin=np.array([ox, oy, 0.0]),
                    size_m=float(cell_size_m),
                    points=pts[sel].astype(np.float32),
                    colors=cols[sel].astype(np.float32),
                    point_instance_ids=ids[sel].astype(np.int32),
                    point_class_ids=cls[sel].astype(np.int32),
                )
            )
    return cells


def direction_label(pose_xy: Sequence[float], instance_center_xy: Sequence[float],
                    on_top_radius_m: float = 2.0) -> str:
    """Compass word for where the pose lies relative to an instance."""
    dx = float(pose_xy[0]) - float(instance_center_xy[0])
    dy = float(pose_xy[1]) - float(instance_center_xy[1])
    if math.hypot(dx, dy) < on_top_radius_m:
        return "on-top"
    angle = math.degrees(math.atan2(dy, dx))
    sector = int(math.floor((angle + 22.5) / 45.0)) % 8
    return _SECTORS[sector]


def nearest_cell(position: Sequence[float], cells: Sequence[Cell]) -> Cell:
    """Cell whose center is horizontally closest; ties go to the lower id."""
    p = np.asarray(position[:2], dtype=np.float64)
    best, best_d = None, math.inf
    for cell in sorted(cells, key=lambda c: c.id):
        d = float(np.sum((cell.center[:2] - p) ** 2))
        if d < best_d:
            best, best_d = cell, d
    assert best is not None
    return best


def generate_hints(position: Sequence[float], cell: Cell, instances: Mapping[int, Instance],
                   k_hints: int = 3, on_top_radius_m: float = 2.0) -> list[Hint]:
    """Describe the ``k_hints`` instances of ``cell`` nearest to ``position``."""
    ids = [int(i) for i in cell.instance_ids()]
    if len(ids) < k_hints:
        raise DatasetGenerationError(
            f"cell {cell.id} has {len(ids)} instances, fewer than k_hints={k_hints}"
        )
    p = np.asarray(position[:2], dtype=np.float64)

    def key(iid: int) -> tuple[float, int]:
        return float(np.linalg.norm(instances[iid].center[:2] - p)), iid

    hints = []
    for iid in sorted(ids, key=key)[:k_hints]:
        inst = instances[iid]
        direction = direction_label(p, inst.center[:2], on_top_radius_m)
        hints.append(
            Hint(direction, inst.color_name, inst.class_name,
                 render_hint(direction, inst.color_name, inst.class_name), iid)
        )
    return hints


def anchor_grid(extent: tuple[float, float], spacing: float) -> np.ndarray:
    axes = [np.arange(spacing / 2.0, e, spacing) for e in extent]
    gx, gy = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def sample_poses(
    scene: Scene,
    cells: Sequence[Cell],
    anchor_spacing_m: float = 14.0,
    extras_per_anchor: int = 8,
    min_nearby_instances: int = 6,
    k_hints: int = 3,
    on_top_radius_m: float = 2.0,
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
    seed: int = 0,
) -> list[PoseSample]:
    """Anchor grid plus random extra positions, filtered by instance density.

    Extras are drawn uniformly from the anchor's own grid tile. A pose is
    kept only when its positive cell (closest center) holds at least
    ``min_nearby_instances`` distinct instances. Splits are assigned per
    anchor group so that an anchor and its extras never straddle splits.
    """
    if not cells:
        raise EmptyDatasetError("no cells to sample poses from")
    rng = np.random.default_rng(seed)
    anchors = anchor_grid(scene.extent, anchor_spacing_m)
    order = rng.permutation(len(anchors))
    n_train = int(round(split_fractions[0] * len(anchors)))
    n_val = int(round(split_fractions[1] * len(anchors)))
    split_of = {}
    for rank, a in enumerate(order):
        split_of[int(a)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    inst_by_id = {inst.id: inst for inst in scene.instances}
    instance_counts = {c.id: len(c.instance_ids()) for c in cells}
    ex, ey = scene.extent
    poses: list[PoseSample] = []
    for a_idx, anchor in enumerate(anchors):
        offsets = rng.uniform(-anchor_spacing_m / 2, anchor_spacing_m / 2, size=(extras_per_anchor, 2))
        candidates = np.vstack([anchor[None, :], anchor[None, :] + offsets])
        candidates[:, 0] = np.clip(candidates[:, 0], 0.0, ex)
        candidates[:, 1] = np.clip(candidates[:, 1], 0.0, ey)
        for pos in candidates:
            cell = nearest_cell(pos, cells)
            if not cell.contains_xy(pos):
                continue
            if instance_counts[cell.id] < min_nearby_instances:
                continue
            hints = generate_hints(pos, cell, inst_by_id, k_hints, on_top_radius_m)
            poses.append(
                PoseSample(
                    position=(float(pos[0]), float(pos[1])),
                    cell_id=cell.id,
                    hints=hints,
                    split=split_of[a_idx],
                    anchor_id=a_idx,
                    id=len(poses),
                )
            )
    if not poses:
        raise EmptyDatasetError(
            f"scene too sparse: no pose has >= {min_nearby_instances} instances in its cell"
        )
    return poses
