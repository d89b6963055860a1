"""Deterministic synthetic scenes standing in for lifted camera features.

A labeled world (ground slab plus car- and building-like boxes) is ray-cast
from a sensor near the grid center. First hits score highest; voxels near a
hit along its ray score by a depth-uncertainty band that widens with range.
Scores decay with range and are blurred with a small Gaussian so the selection
forms coherent surfaces. The top ``round(density * H * W * D)`` voxels become
the active set, so the active fraction is exact up to rounding.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import FEATURE_DTYPE, GridShape, SparseVoxelTensor, read_scene, write_scene
from .head import OccupancyGrid

GROUND = 1
SMOOTHING = 1.0   # voxels; spatial coherence of the selected set


def make_world(shape: GridShape, rng: np.random.Generator, num_classes: int = 16) -> np.ndarray:
    """Label grid: ground slab (class 1) and boxes (classes 2..num_classes)."""
    h, w, d = shape.dims
    labels = np.zeros(shape.dims, dtype=np.uint16)
    ground = max(1, d // 8)
    labels[:, :, :ground] = GROUND
    if num_classes < 2:
        return labels
    cx, cy = h / 2, w / 2
    n_boxes = max(2, (h * w) // 300)
    for i in range(n_boxes):
        building = rng.random() < 0.3
        if building:
            sx, sy = rng.integers(max(2, h // 16), max(3, h // 6), size=2)
            sz = rng.integers(max(1, d // 2), d + 1)
        else:
            sx, sy = rng.integers(2, max(3, h // 24) + 2, size=2)
            sz = rng.integers(1, max(2, d // 4) + 1)
        for _ in range(20):
            x0 = rng.integers(0, max(1, h - sx))
            y0 = rng.integers(0, max(1, w - sy))
            # keep the sensor's neighbourhood clear
            if abs(x0 + sx / 2 - cx) > sx / 2 + 3 or abs(y0 + sy / 2 - cy) > sy / 2 + 3:
                break
        cls = 2 + (i % (num_classes - 1))
        labels[x0:x0 + sx, y0:y0 + sy, ground:min(d, ground + sz)] = cls
    return labels


def observation_scores(world: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Ray-cast visibility scores per voxel (0 = never observed)."""
    h, w, d = world.shape
    origin = np.array([h / 2, w / 2, min(d - 0.5, max(1.5, d * 0.3))])
    max_range = float(np.hypot(h, w)) / 2 * 1.05
    n_az = 4 * max(h, w)
    n_el = max(8, 2 * d)
    az = np.linspace(0, 2 * np.pi, n_az, endpoint=False) + rng.uniform(0, 2 * np.pi / n_az)
    el = np.linspace(-np.arctan2(origin[2], 4.0), np.arctan2(d - origin[2], max_range / 2), n_el)
    A, E = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], -1).reshape(-1, 3)
    step = 0.5
    t = np.arange(step, max_range, step, dtype=np.float64)
    dims = np.array(world.shape)
    occupied = world > 0
    scores = np.zeros(world.size, dtype=np.float64)
    range_scale = max_range / 2
    for chunk in np.array_split(dirs, max(1, dirs.shape[0] // 2048)):
        pts = origin + chunk[:, None, :] * t[None, :, None]
        idx = np.floor(pts).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < dims), axis=-1)
        ci = np.clip(idx, 0, dims - 1)
        hit = inside & occupied[ci[..., 0], ci[..., 1], ci[..., 2]]
        has_hit = hit.any(axis=1)
        first = np.where(has_hit, hit.argmax(axis=1), t.size)
        t_hit = np.where(has_hit, t[np.minimum(first, t.size - 1)], np.inf)
        sigma = 1.0 + 0.04 * np.where(has_hit, t_hit, 0.0)
        band = np.exp(-(((t[None, :] - t_hit[:, None]) / sigma[:, None]) ** 2))
        band = np.where(has_hit[:, None], band, 0.0)
        # weak depth tail in front of the hit (and along rays that never hit)
        band += np.where(t[None, :] <= t_hit[:, None], 0.02, 0.0)
        band *= np.exp(-t / range_scale)[None, :]
        band[np.arange(chunk.shape[0])[has_hit], first[has_hit]] += 1.0
        keep = inside & (band > 1e-4)
        flat = (ci[..., 0] * dims[1] + ci[..., 1]) * dims[2] + ci[..., 2]
        np.maximum.at(scores, flat[keep], band[keep])
    return scores.reshape(world.shape)


def gen_scene(shape: GridShape, density: float = 0.2, seed: int = 0, channels: int = 128,
              num_classes: int = 16):
    """Return ``(scene, ground_truth)`` for the given seed and target density."""
    if not 0 < density <= 1:
        raise ValueError(f"density target {density} is infeasible; must lie in (0, 1]")
    n = int(round(density * shape.size))
    if n < 1:
        raise ValueError(f"density target {density} is infeasible for grid {shape}: "
                         "no voxel would be active")
    rng = np.random.default_rng(seed)
    world = make_world(shape, rng, num_classes)
    scores = gaussian_filter(observation_scores(world, rng), SMOOTHING, mode="constant").ravel()
    jitter = rng.uniform(0.0, 1e-9, size=scores.size)
    # lexsort: primary key last; descending score, random tie-break
    order = np.lexsort((-jitter, -scores))
    chosen = np.sort(order[:n])
    z = chosen % shape.d
    xy = chosen // shape.d
    coords = np.stack([xy // shape.w, xy % shape.w, z], axis=1)
    feats = rng.standard_normal((n, channels)).astype(FEATURE_DTYPE)
    feats[feats == 0] = FEATURE_DTYPE(1e-3)
    scene = SparseVoxelTensor(shape, coords, feats, _sorted=True)
    return scene, OccupancyGrid(shape, world)


def write_labels(path, grid: OccupancyGrid) -> None:
    """Labels in the scene format: one channel, non-empty voxels only, labels as floats."""
    coords = np.stack(np.nonzero(grid.labels), axis=1)
    vals = grid.labels[grid.labels > 0].astype(FEATURE_DTYPE)[:, None]
    write_scene(path, SparseVoxelTensor(grid.shape, coords, vals, _sorted=True))


def read_labels(path) -> OccupancyGrid:
    t = read_scene(path)
    if t.channels != 1:
        raise ValueError(f"{path}: label files carry exactly one channel")
    labels = np.zeros(t.shape.dims, dtype=np.uint16)
    c = t.coords
    labels[c[:, 0], c[:, 1], c[:, 2]] = np.rint(t.features[:, 0]).astype(np.uint16)
    return OccupancyGrid(t.shape, labels)
