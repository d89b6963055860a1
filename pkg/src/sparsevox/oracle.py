"""Slow dense reference implementations.

Nothing here touches rulebooks, coordinate hashing or the sparse fast path;
the tests and ``verify`` pair each fast-path routine with one of these.
All arithmetic is float64.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from .core import DenseVolume, GridShape
from .match import Assignment


def dense_conv_oracle(volume: DenseVolume, spec) -> DenseVolume:
    """Direct dense cross-correlation with implicit zero padding.

    Output ``o`` accumulates ``volume[stride*o + tap - pad] @ weights[tap]`` over
    every kernel tap; ``pad`` per dimension is ``(k-1)//2`` for stride 1 and 0
    otherwise. Bias is added everywhere.
    """
    vals = np.asarray(volume.values, dtype=np.float64)
    dims = volume.shape.dims
    out_dims = tuple(-(-n // s) for n, s in zip(dims, spec.stride))
    pads = [(k - 1) // 2 if s == 1 else 0 for k, s in zip(spec.kernel, spec.stride)]
    out = np.zeros(out_dims + (spec.out_channels,), dtype=np.float64)
    w = np.asarray(spec.weights, dtype=np.float64)
    tap = 0
    for ix in range(spec.kernel[0]):
        for iy in range(spec.kernel[1]):
            for iz in range(spec.kernel[2]):
                idx, ok = [], []
                for n, n_out, s, p, t in zip(dims, out_dims, spec.stride, pads, (ix, iy, iz)):
                    i = np.arange(n_out) * s + t - p
                    ok.append((i >= 0) & (i < n))
                    idx.append(np.clip(i, 0, n - 1))
                patch = vals[np.ix_(*idx)]
                valid = ok[0][:, None, None] & ok[1][None, :, None] & ok[2][None, None, :]
                patch = patch * valid[..., None]
                out += patch @ w[tap]
                tap += 1
    if spec.bias is not None:
        out += np.asarray(spec.bias, dtype=np.float64)
    return DenseVolume(GridShape(*out_dims), out)


def dense_interp_oracle(volume: DenseVolume, points) -> np.ndarray:
    """Trilinear interpolation at continuous voxel-index coordinates.

    Voxel ``i`` has its center at coordinate ``i``; samples outside the grid
    read zeros.
    """
    vals = np.asarray(volume.values, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.array(volume.shape.dims)
    base = np.floor(pts).astype(np.int64)
    frac = pts - base
    out = np.zeros((pts.shape[0], volume.channels), dtype=np.float64)
    for corner in itertools.product((0, 1), repeat=3):
        c = np.array(corner)
        idx = base + c
        weight = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        sel = np.flatnonzero(inside)
        out[sel] += weight[sel, None] * vals[idx[sel, 0], idx[sel, 1], idx[sel, 2]]
    return out


def dense_head_oracle(queries, volume: DenseVolume):
    """Outer product of every query with every voxel feature.

    Returns the ``N_q x H x W x D`` mask stack and its MAC count
    ``N_q * H * W * D * C``.
    """
    q = np.asarray(queries, dtype=np.float64)
    v = np.asarray(volume.values, dtype=np.float64)
    masks = np.einsum("qc,hwdc->qhwd", q, v)
    macs = q.shape[0] * volume.shape.size * q.shape[1]
    return masks, macs


def brute_force_match(cost, max_dim: int = 8) -> Assignment:
    """Exhaustive minimum-cost injection of the smaller side into the larger."""
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = cost.shape
    if min(rows, cols) > max_dim:
        raise ValueError(f"brute force limited to min dimension {max_dim}, got {cost.shape}")
    best, best_pairs = math.inf, []
    if rows <= cols:
        for perm in itertools.permutations(range(cols), rows):
            pairs = list(zip(range(rows), perm))
            total = math.fsum(cost[r, c] for r, c in pairs)
            if total < best:
                best, best_pairs = total, pairs
    else:
        for perm in itertools.permutations(range(rows), cols):
            pairs = sorted(zip(perm, range(cols)))
            total = math.fsum(cost[r, c] for r, c in pairs)
            if total < best:
                best, best_pairs = total, pairs
    return Assignment.from_pairs(best_pairs, rows, cols)


def active_set_oracle(coords, shape: GridShape, kernel, stride=(1, 1, 1)) -> set:
    """Output cells whose receptive window holds an active input, by set enumeration.

    Each active input ``p`` is pushed through every tap ``t``: it feeds output
    ``o`` when ``stride * o + t - pad == p`` for some in-grid ``o``.
    """
    pads = [(k - 1) // 2 if s == 1 else 0 for k, s in zip(kernel, stride)]
    out_dims = [-(-n // s) for n, s in zip(shape.dims, stride)]
    result = set()
    for p in map(tuple, np.asarray(coords).tolist()):
        for t in itertools.product(*(range(k) for k in kernel)):
            o = []
            for pi, ti, s, pad, n_out in zip(p, t, stride, pads, out_dims):
                num = pi - ti + pad
                if num % s or not 0 <= num // s < n_out:
                    break
                o.append(num // s)
            else:
                result.add(tuple(o))
    return result


def masked_dense_chain(volume: DenseVolume, specs, active_mask) -> np.ndarray:
    """Dense convolutions in sequence with outputs zeroed off ``active_mask`` after each layer.

    Reference for stacked submanifold layers (no nonlinearity).
    """
    vals = volume
    m = np.asarray(active_mask, dtype=bool)[..., None]
    for spec in specs:
        out = dense_conv_oracle(vals, spec).values * m
        vals = DenseVolume(volume.shape, out)
    return vals.values


def dense_fusion_oracle(scales, fuse_weights, base_shape: GridShape) -> list:
    """Fused features per scale via dense volumes and :func:`dense_interp_oracle`.

    ``scales`` is a list of ``(stride, collapsed, DenseVolume, coords)``; the
    result lists the fused feature rows at each scale's ``coords``.
    """
    out = []
    for l, (s_t, col_t, _, coords_t) in enumerate(scales):
        c = np.asarray(coords_t, dtype=np.float64)
        centers = (c + 0.5) * s_t
        if col_t:
            centers[:, 2] = base_shape.d / 2.0
        vol_t = scales[l][2].values
        ci = np.asarray(coords_t, dtype=np.int64)
        acc = np.asarray(vol_t, np.float64)[ci[:, 0], ci[:, 1], ci[:, 2]].copy()
        for j, (s_j, col_j, vol_j, _) in enumerate(scales):
            if j == l:
                continue
            pts = centers / s_j - 0.5
            if col_j:
                pts[:, 2] = 0.0
            acc += fuse_weights[j] * dense_interp_oracle(vol_j, pts)
        out.append(acc)
    return out


def relative_error(actual, expected) -> float:
    """Max absolute deviation over the largest reference magnitude (normwise)."""
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    if e.size == 0:
        return 0.0
    scale = max(float(np.abs(e).max()), 1e-30)
    return float(np.abs(a - e).max()) / scale
