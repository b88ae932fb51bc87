"""Voxelization, farthest point sampling, displacement matrices, point masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError
from .scene_synth import Cell

DEFAULT_VOXEL_SIZE = 0.15


@dataclass
class VoxelGrid:
    voxel_size_m: float
    origin: np.ndarray  # (3,)
    occupied: np.ndarray  # (V, 3) int64, unique, lexicographically sorted
    point_to_voxel: np.ndarray  # (n,) int64
    voxel_features: np.ndarray  # (V, 6): mean color | centroid offset from voxel center (voxel units)
    centroids: np.ndarray  # (V, 3) mean member point, meters
    counts: np.ndarray  # (V,) member point count

    @property
    def num_voxels(self) -> int:
        return len(self.occupied)


def _segment_mean(values: np.ndarray, inverse: np.ndarray, counts: np.ndarray) -> np.ndarray:
    out = np.zeros((len(counts), values.shape[1]), dtype=np.float64)
    np.add.at(out, inverse, values)
    return out / counts[:, None]


def voxelize(points: np.ndarray, colors: np.ndarray, voxel_size_m: float = DEFAULT_VOXEL_SIZE,
             origin: np.ndarray | None = None) -> VoxelGrid:
    """Quantize points to a regular grid; voxel features are member means."""
    pts = np.asarray(points, dtype=np.float64)
    cols = np.asarray(colors, dtype=np.float64)
    if len(pts) == 0:
        raise DegenerateInputError("cannot voxelize an empty point set")
    if voxel_size_m <= 0:
        raise ValueError("voxel_size_m must be positive")
    org = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
    idx = np.floor((pts - org) / voxel_size_m).astype(np.int64)
    occupied, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    centroids = _segment_mean(pts, inverse, counts)
    mean_color = _segment_mean(cols, inverse, counts)
    centers = org + (occupied + 0.5) * voxel_size_m
    offset = (centroids - centers) / voxel_size_m
    return VoxelGrid(
        voxel_size_m=float(voxel_size_m),
        origin=org,
        occupied=occupied,
        point_to_voxel=inverse.astype(np.int64),
        voxel_features=np.concatenate([mean_color, offset], axis=1),
        centroids=centroids,
        counts=counts.astype(np.int64),
    )


def farthest_point_sample(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min sampling; ties resolve to the lowest index."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"farthest_point_sample needs 1 <= k <= n, got k={k}, n={n}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    min_d = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_d))  # argmax returns the first maximum
        chosen[i] = nxt
        min_d = np.minimum(min_d, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


def fps_start_index(points: np.ndarray, center: np.ndarray) -> int:
    """Index of the point closest to ``center`` (lowest index on ties)."""
    d = np.sum((np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64)) ** 2, axis=1)
    return int(np.argmin(d))


def pairwise_displacements(centers: np.ndarray) -> np.ndarray:
    """Horizontal displacement tensor ``D[i, j] = (c_i - c_j)[:2]``, shape (n, n, 2)."""
    c = np.asarray(centers)[:, :2]
    return c[:, None, :] - c[None, :, :]


def mask_points(cell: Cell, fraction: float, seed: int) -> Cell:
    """Drop ``round(n * fraction)`` points uniformly at random."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    n = cell.num_points
    drop = int(round(n * fraction))
    if drop == 0:
        return cell
    if n - drop < 1:
        raise DegenerateInputError(f"masking {fraction} of {n} points leaves an empty cell")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.permutation(n)[drop:])
    return Cell(
        id=cell.id,
        origin=cell.origin.copy(),
        size_m=cell.size_m,
        points=cell.points[keep],
        colors=cell.colors[keep],
        point_instance_ids=cell.point_instance_ids[keep],
        point_class_ids=cell.point_class_ids[keep],
    )
