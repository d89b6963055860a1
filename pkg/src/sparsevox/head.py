"""Sparse transformer occupancy head.

Each layer filters one pyramid scale with a linear binary classifier and
updates the queries by masked cross-attention over it. The queries are then
decoded against the kept voxels of the finest scale. Empty voxels share one
token, so decoding costs ``N_l * N_q * C`` instead of ``H * W * D * N_q * C``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import FEATURE_DTYPE, GridShape, SparseVoxelTensor, densify, linear_keys
from .match import log_softmax, sigmoid

NUM_QUERIES = 100
HEAD_LAYERS = 9


@dataclass
class FilteredScale:
    kept: SparseVoxelTensor
    binary_logits: np.ndarray        # one per pre-filter voxel
    coords: np.ndarray               # pre-filter coordinates, aligned with binary_logits
    empty_token: np.ndarray

    @property
    def n_kept(self) -> int:
        return self.kept.n


@dataclass
class MaskPrediction:
    occ_masks: np.ndarray            # N_q x N_l
    empty_mask: np.ndarray           # N_q
    class_logits: np.ndarray         # N_q x (C + 1), last column = no object
    coords: np.ndarray               # N_l x 3
    shape: GridShape

    def __post_init__(self):
        if self.occ_masks.shape[1] != self.coords.shape[0]:
            raise ValueError("mask columns must match kept voxel count")

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[1] - 1

    def logits_at(self, points) -> np.ndarray:
        """Mask logits at arbitrary voxels: kept voxels read their column, others the empty mask."""
        p = np.asarray(points, dtype=np.int64).reshape(-1, 3)
        out = np.repeat(self.empty_mask.reshape(-1, 1), p.shape[0], axis=1).astype(np.float64)
        if self.coords.shape[0]:
            keys = linear_keys(self.coords, self.shape)
            q = linear_keys(p, self.shape)
            pos = np.minimum(np.searchsorted(keys, q), keys.size - 1)
            hit = keys[pos] == q
            out[:, hit] = self.occ_masks[:, pos[hit]]
        return out


@dataclass
class OccupancyGrid:
    shape: GridShape
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.shape != self.shape.dims:
            raise ValueError("label array does not match grid")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")


@dataclass
class HeadParams:
    queries: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    cls_w: np.ndarray                # C x (num_classes + 1)
    cls_b: np.ndarray
    filter_w: list                   # per level, C vector
    filter_b: list                   # per level, scalar
    empty_token: np.ndarray
    # fold each scale's mean feature into the filter bias (see centered_filter_bias)
    center_filter: bool = True


def init_head(rng: np.random.Generator, channels: int, num_classes: int, levels: int,
              num_queries: int = NUM_QUERIES) -> HeadParams:
    b = 1.0 / np.sqrt(channels)

    def u(*shape):
        return rng.uniform(-b, b, size=shape).astype(FEATURE_DTYPE)

    return HeadParams(
        queries=rng.standard_normal((num_queries, channels)).astype(FEATURE_DTYPE),
        w_q=u(channels, channels), w_k=u(channels, channels), w_v=u(channels, channels),
        cls_w=u(channels, num_classes + 1), cls_b=u(num_classes + 1),
        filter_w=[u(channels) for _ in range(levels)],
        filter_b=[0.0] * levels,
        empty_token=u(channels),
    )


def occupancy_filter(scale: SparseVoxelTensor, weight, bias: float, empty_token,
                     threshold: float = 0.5, counter=None) -> FilteredScale:
    """Keep voxels whose binary occupancy probability is at least ``threshold``."""
    w = np.asarray(weight, dtype=np.float64).reshape(-1)
    if w.size != scale.channels:
        raise ValueError("classifier width does not match scale channels")
    logits = scale.features.astype(np.float64) @ w + float(bias)
    keep = sigmoid(logits) >= threshold
    kept = SparseVoxelTensor(scale.shape, scale.coords[keep], scale.features[keep], _sorted=True)
    if counter is not None:
        counter.add("head_filter", scale.n * scale.channels, scale.shape.size * scale.channels)
    return FilteredScale(kept, logits, scale.coords, np.asarray(empty_token, FEATURE_DTYPE))


def centered_filter_bias(scale: SparseVoxelTensor, weight, bias: float) -> float:
    """Bias that makes the classifier act on mean-centred features: ``b - mean(f) . w``.

    Untrained pyramid features share a large common component, so a seeded
    classifier on raw features keeps all voxels of a scale or none of them.
    """
    if scale.n == 0:
        return float(bias)
    mean = scale.features.astype(np.float64).mean(axis=0)
    return float(bias) - float(mean @ np.asarray(weight, dtype=np.float64).reshape(-1))


def decode_queries(q, filtered: FilteredScale, cls_w, cls_b, counter=None) -> MaskPrediction:
    """Outer products of the queries with the kept features and with the empty token."""
    q = np.asarray(q, dtype=FEATURE_DTYPE)
    kept = filtered.kept
    if q.shape[1] != kept.channels:
        raise ValueError("query width does not match feature width")
    occ = q @ kept.features.T
    empty = q @ filtered.empty_token
    class_logits = q @ np.asarray(cls_w, FEATURE_DTYPE) + np.asarray(cls_b, FEATURE_DTYPE)
    if counter is not None:
        nq, c = q.shape
        counter.add("head_decode", kept.n * nq * c + nq * c, nq * kept.shape.size * c)
        counter.add("head_classify", nq * c * class_logits.shape[1],
                    nq * c * class_logits.shape[1])
    return MaskPrediction(occ, empty, class_logits, kept.coords, kept.shape)


def reconstruct_dense_mask(pred: MaskPrediction, shape: Optional[GridShape] = None,
                           counter=None) -> np.ndarray:
    """Fill each query's volume with its empty-mask value, then scatter the kept columns."""
    shape = shape or pred.shape
    c = pred.coords
    if c.shape[0] and (np.any(c < 0) or np.any(c >= np.array(shape.dims))):
        raise IndexError(f"mask coordinates fall outside grid {shape}")
    nq = pred.occ_masks.shape[0]
    dense = np.empty((nq,) + shape.dims, dtype=FEATURE_DTYPE)
    dense[...] = pred.empty_mask.reshape(nq, 1, 1, 1)
    dense[:, c[:, 0], c[:, 1], c[:, 2]] = pred.occ_masks
    if counter is not None:
        counter.add("head_decode", nq + shape.size + nq * c.shape[0], 0)
    return dense


def make_attention_mask(prev_masks, target_shape: GridShape) -> np.ndarray:
    """Max-pool raw masks to ``target_shape``; 0 where sigmoid >= 0.5, -inf elsewhere."""
    m = np.asarray(prev_masks)
    nq = m.shape[0]
    factors = []
    for n, t in zip(m.shape[1:], target_shape.dims):
        if t < 1 or n % t:
            raise ValueError(f"mask grid {m.shape[1:]} is not divisible into {target_shape}")
        factors.append(n // t)
    (h, fh), (w, fw), (d, fd) = zip(target_shape.dims, factors)
    pooled = m.reshape(nq, h, fh, w, fw, d, fd).max(axis=(2, 4, 6))
    return np.where(sigmoid(pooled) >= 0.5, 0.0, -np.inf).astype(FEATURE_DTYPE)


def _attend(q, attn_mask, keys, values, w_q, return_weights=False):
    """Masked softmax attention with residual; all-masked rows pass through unchanged."""
    q = np.asarray(q, dtype=FEATURE_DTYPE)
    logits = (q @ w_q) @ keys.T + attn_mask
    live = np.isfinite(logits).any(axis=1)
    weights = np.zeros_like(logits)
    if live.any():
        z = logits[live]
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        weights[live] = e / e.sum(axis=1, keepdims=True)
    out = q + weights @ values
    out[~live] = q[~live]
    if return_weights:
        return out, weights
    return out


def update_queries(q_prev, attn_mask, scale_dense_features, w_q, w_k, w_v, *,
                   return_weights: bool = False, counter=None):
    """``softmax(mask + (Q W_q)(V W_k)^T) (V W_v) + Q`` over flattened voxel positions."""
    v = np.asarray(scale_dense_features, dtype=FEATURE_DTYPE)
    v = v.reshape(-1, v.shape[-1])
    mask = np.asarray(attn_mask, dtype=FEATURE_DTYPE).reshape(np.shape(q_prev)[0], -1)
    if mask.shape[1] != v.shape[0]:
        raise ValueError("attention mask does not match the number of voxel positions")
    keys = v @ w_k
    values = v @ w_v
    if counter is not None:
        nq, c = np.shape(q_prev)
        p = v.shape[0]
        macs = nq * c * c + 2 * p * c * c + 2 * nq * p * c
        counter.add("head_attention", macs, macs)
    return _attend(q_prev, mask, keys, values, w_q, return_weights)


def _dense_projection(filtered: FilteredScale, w) -> np.ndarray:
    """``densify(kept, fill=token) @ w`` computed on the kept rows plus one token row."""
    w = np.asarray(w, dtype=FEATURE_DTYPE)
    kept = filtered.kept
    proj = SparseVoxelTensor(kept.shape, kept.coords, kept.features @ w, _sorted=True)
    dense = densify(proj, fill=filtered.empty_token @ w).values
    return dense.reshape(-1, w.shape[1])


def layer_schedule(levels: int, layers: int) -> list:
    """Round-robin, coarsest level first: 0-based level index per layer."""
    return [levels - 1 - (i % levels) for i in range(layers)]


def run_head(pyramid, params: HeadParams, layers: int = HEAD_LAYERS, counter=None) -> list:
    """Alternate query updating and decoding; returns one prediction per layer.

    Masks are always decoded on the finest scale; the previous layer's mask is
    max-pooled to the attended scale to build the attention mask.
    """
    levels = pyramid.levels
    filtered = {}

    def filt(level):
        if level not in filtered:
            _, t = pyramid.scales[level]
            bias = params.filter_b[level]
            if params.center_filter:
                bias = centered_filter_bias(t, params.filter_w[level], bias)
                if counter is not None:
                    counter.add("head_filter", t.n * t.channels, t.shape.size * t.channels)
            filtered[level] = occupancy_filter(t, params.filter_w[level], bias,
                                               params.empty_token, counter=counter)
        return filtered[level]

    fine = filt(0)
    q = params.queries
    nq, c = q.shape
    prev = None
    preds = []
    for level in layer_schedule(levels, layers):
        meta, _ = pyramid.scales[level]
        f = filt(level)
        keys = _dense_projection(f, params.w_k)
        values = _dense_projection(f, params.w_v)
        p = meta.shape.size
        if prev is None:
            mask = np.zeros((nq, p), dtype=FEATURE_DTYPE)
        else:
            mask = make_attention_mask(prev, meta.shape).reshape(nq, p)
        q = _attend(q, mask, keys, values, params.w_q)
        if counter is not None:
            proj = 2 * (f.n_kept + 1) * c * c
            counter.add("head_attention", nq * c * c + proj + 2 * nq * p * c,
                        nq * c * c + 2 * p * c * c + 2 * nq * p * c)
        pred = decode_queries(q, fine, params.cls_w, params.cls_b, counter)
        prev = reconstruct_dense_mask(pred, counter=counter)
        preds.append(pred)
    return preds


def assemble_occupancy(final: MaskPrediction, shape: Optional[GridShape] = None) -> OccupancyGrid:
    """Per kept voxel, argmax over semantic classes of sum_q p(class) * sigmoid(mask).

    Voxels outside the kept set are labeled 0; ties go to the smaller class.
    """
    shape = shape or final.shape
    labels = np.zeros(shape.dims, dtype=np.uint16)
    c = final.coords
    if c.shape[0]:
        probs = np.exp(log_softmax(final.class_logits))[:, :final.num_classes]
        scores = probs.T @ sigmoid(final.occ_masks)
        labels[c[:, 0], c[:, 1], c[:, 2]] = np.argmax(scores, axis=0) + 1
    return OccupancyGrid(shape, labels)
