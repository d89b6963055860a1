"""Multi-scale sparse feature pyramid and interpolation-based scale fusion.

Voxel ``(x, y, z)`` of a scale with stride ``s`` has its center at
``((x + .5) s, (y + .5) s, (z + .5) s)`` in base-grid units. A collapsed
(2D) scale spans the full height, so its z center is ``D / 2`` and its
features are treated as constant along z.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import FEATURE_DTYPE, GridShape, SparseVoxelTensor
from .spconv import (ConvMode, aggregation_block, completion_block, conv,
                     downsample, init_conv)

DECODER_CHANNELS = 192


@dataclass(frozen=True)
class ScaleMeta:
    level: int                # 1-based
    stride_factor: int
    collapsed: bool
    shape: GridShape
    base_shape: GridShape

    def centers(self, coords) -> np.ndarray:
        """Continuous voxel centers in base-grid units."""
        c = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        out = (c + 0.5) * self.stride_factor
        if self.collapsed:
            out[:, 2] = self.base_shape.d / 2.0
        return out

    def to_grid(self, points) -> np.ndarray:
        """Base-unit points to this scale's continuous voxel-index coordinates."""
        u = np.asarray(points, dtype=np.float64) / self.stride_factor - 0.5
        if self.collapsed:
            u[:, 2] = 0.0
        return u


def scale_metas(base: GridShape, levels: int, collapsed_levels: int = 2) -> list:
    """Metadata for each level; the last ``collapsed_levels`` drop the height axis.

    Level 1 always keeps the base grid, so at most ``levels - 1`` levels collapse.
    """
    first_2d = max(levels - collapsed_levels, 1)
    metas = []
    for i in range(levels):
        s = 2 ** i
        collapsed = i >= first_2d
        shape = base.ceil_div((s, s, s))
        if collapsed:
            shape = GridShape(shape.h, shape.w, 1)
        metas.append(ScaleMeta(i + 1, s, collapsed, shape, base))
    return metas


@dataclass
class FeaturePyramid:
    scales: list                     # [(ScaleMeta, SparseVoxelTensor)]
    fuse_weights: np.ndarray

    def __post_init__(self):
        self.fuse_weights = np.asarray(self.fuse_weights, dtype=np.float64).reshape(-1)
        if self.fuse_weights.size != len(self.scales):
            raise ValueError("one fuse weight per scale required")
        for meta, t in self.scales:
            if t.shape != meta.shape:
                raise ValueError(f"level {meta.level}: tensor grid {t.shape} != {meta.shape}")

    @property
    def levels(self) -> int:
        return len(self.scales)

    def occupancy(self) -> list:
        return [t.occupancy for _, t in self.scales]


@dataclass
class DiffuserParams:
    completion: list
    aggregation: list


@dataclass
class PyramidParams:
    diffusers: list                  # one DiffuserParams per level
    downsamples: list                # levels - 1 strided convs
    projections: list                # 1x1x1 convs to the decoder width
    fuse_weights: np.ndarray


def init_diffuser(rng, channels: int, k: int, collapsed: bool) -> DiffuserParams:
    sub = ConvMode.SUBMANIFOLD
    if collapsed:
        comp = [init_conv(rng, (3, 3, 1), channels, channels)]
        agg = [init_conv(rng, (5, 5, 1), channels, channels, mode=sub) for _ in range(2)]
    else:
        comp = [init_conv(rng, kern, channels, channels)
                for kern in ((k, k, 1), (k, 1, k), (1, k, k))]
        agg = [init_conv(rng, kern, channels, channels, mode=sub)
               for kern in ((1, k, k), (k, 1, k), (k, 1, k), (1, k, k))]
    return DiffuserParams(comp, agg)


def init_pyramid(rng: np.random.Generator, channels: int, levels: int = 4, k: int = 3,
                 decoder_channels: int = DECODER_CHANNELS,
                 collapsed_levels: int = 2) -> PyramidParams:
    first_2d = max(levels - collapsed_levels, 1)
    collapsed = [i >= first_2d for i in range(levels)]
    diffusers = [init_diffuser(rng, channels, k, c) for c in collapsed]
    downs = []
    for i in range(1, levels):
        if collapsed[i]:
            downs.append(init_conv(rng, (k, k, 1), channels, channels, stride=(2, 2, 1)))
        else:
            downs.append(init_conv(rng, (k, k, k), channels, channels, stride=(2, 2, 2)))
    projs = [init_conv(rng, 1, channels, decoder_channels, mode=ConvMode.SUBMANIFOLD)
             for _ in range(levels)]
    weights = rng.uniform(0.0, 1.0, size=levels)
    return PyramidParams(diffusers, downs, projs, weights)


def diffuser(x: SparseVoxelTensor, params: DiffuserParams, *, linear: bool = False,
             counter=None, prefix: str = "") -> SparseVoxelTensor:
    """Completion block followed by aggregation block."""
    x = completion_block(x, params.completion, linear=linear, counter=counter,
                         stage=prefix + "completion")
    return aggregation_block(x, params.aggregation, linear=linear, counter=counter,
                             stage=prefix + "aggregation")


def collapse_height(x: SparseVoxelTensor) -> SparseVoxelTensor:
    """Drop the z axis: each (x, y) column becomes one voxel holding the mean of its active voxels."""
    shape = GridShape(x.shape.h, x.shape.w, 1)
    if x.n == 0:
        return SparseVoxelTensor.empty(shape, x.channels)
    col_keys = x.coords[:, 0] * x.shape.w + x.coords[:, 1]
    uniq, inverse, counts = np.unique(col_keys, return_inverse=True, return_counts=True)
    sums = np.zeros((uniq.size, x.channels), dtype=np.float64)
    np.add.at(sums, inverse, x.features)
    coords = np.stack([uniq // x.shape.w, uniq % x.shape.w, np.zeros_like(uniq)], axis=1)
    return SparseVoxelTensor(shape, coords, (sums / counts[:, None]).astype(FEATURE_DTYPE),
                             _sorted=True)


def build_pyramid(x: SparseVoxelTensor, params: PyramidParams, *, linear: bool = False,
                  counter=None) -> FeaturePyramid:
    """Diffuse every level, downsampling between levels, then project to the decoder width.

    Level 1 is ``diffuser(x)``; level ``l+1`` is ``diffuser(downsample(level l))``,
    with a height collapse in front of the first 2D level. Every level is then
    projected to the decoder width by a 1x1x1 convolution.
    """
    levels = len(params.diffusers)
    collapsed_levels = sum(len(d.completion) == 1 for d in params.diffusers)
    metas = scale_metas(x.shape, levels, collapsed_levels)
    raw = []
    h = x
    for i, meta in enumerate(metas):
        if i > 0:
            if meta.collapsed and not metas[i - 1].collapsed:
                h = collapse_height(h)
            h = downsample(h, params.downsamples[i - 1], counter=counter,
                           stage=f"l{meta.level}.downsample")
        h = diffuser(h, params.diffusers[i], linear=linear, counter=counter,
                     prefix=f"l{meta.level}.")
        if h.shape != meta.shape:
            raise ValueError(f"level {meta.level} produced grid {h.shape}, expected {meta.shape}")
        raw.append(h)
    scales = [(meta, conv(t, proj, counter, f"l{meta.level}.projection"))
              for meta, t, proj in zip(metas, raw, params.projections)]
    return FeaturePyramid(scales, params.fuse_weights)


def _stencil(source_meta: ScaleMeta, target_meta: ScaleMeta, target_coords):
    """Yield ``(corner_index_triples, weights)`` for each interpolation corner."""
    u = source_meta.to_grid(target_meta.centers(target_coords))
    base = np.floor(u).astype(np.int64)
    frac = u - base
    zs = (0,) if source_meta.collapsed else (0, 1)
    for corner in itertools.product((0, 1), (0, 1), zs):
        c = np.array(corner)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        yield base + c, w


def interp_weights(source, target_meta: ScaleMeta, target_coords):
    """Per-corner source rows (``-1`` if inactive) and weights, shape ``(corners, M)``."""
    meta, tensor = source
    rows, weights = [], []
    for idx, w in _stencil(meta, target_meta, target_coords):
        rows.append(tensor.lookup(idx))
        weights.append(w)
    return np.array(rows).reshape(len(rows), -1), np.array(weights).reshape(len(rows), -1)


def sparse_interp(source, target_meta: ScaleMeta, target_coords, counter=None,
                  stage: str = "fusion") -> np.ndarray:
    """Trilinear (bilinear for a 2D source) interpolation of sparse features at target centers.

    Inactive neighbours count as zero vectors; weights are not renormalized.
    """
    _, tensor = source
    rows, weights = interp_weights(source, target_meta, target_coords)
    m = rows.shape[1]
    out = np.zeros((m, tensor.channels), dtype=np.float64)
    for r, w in zip(rows, weights):
        hit = np.flatnonzero(r >= 0)
        out[hit] += w[hit, None] * tensor.features[r[hit]]
    if counter is not None:
        counter.add(stage, int(np.count_nonzero(rows >= 0)) * tensor.channels,
                    rows.shape[0] * target_meta.shape.size * tensor.channels)
    return out


def fuse_scales(pyramid: FeaturePyramid, counter=None) -> FeaturePyramid:
    """Add the weighted interpolations of every other scale to each scale's own features."""
    fused = []
    for l, (meta, tensor) in enumerate(pyramid.scales):
        acc = tensor.features.astype(np.float64)
        for j, source in enumerate(pyramid.scales):
            if j == l:
                continue
            acc = acc + pyramid.fuse_weights[j] * sparse_interp(source, meta, tensor.coords,
                                                                counter)
            if counter is not None:
                counter.add("fusion", tensor.n * tensor.channels, meta.shape.size * tensor.channels)
        fused.append((meta, tensor.with_features(acc.astype(FEATURE_DTYPE))))
    return FeaturePyramid(fused, pyramid.fuse_weights)
