"""Bipartite matching of predicted masks to ground-truth class masks, and forward losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LAMBDA_CLS = 2.0
LAMBDA_BCE = 5.0
LAMBDA_DICE = 5.0
NUM_POINTS = 50176


@dataclass
class Assignment:
    pairs: list                      # (query_index, gt_mask_index), sorted by query
    n_queries: int
    n_targets: int

    @classmethod
    def from_pairs(cls, pairs, n_queries: int, n_targets: int) -> "Assignment":
        pairs = sorted((int(q), int(m)) for q, m in pairs)
        qs = [q for q, _ in pairs]
        ms = [m for _, m in pairs]
        if len(set(qs)) != len(qs) or len(set(ms)) != len(ms):
            raise ValueError("a query or target appears twice in the assignment")
        return cls(pairs, n_queries, n_targets)

    @property
    def unmatched_queries(self) -> list:
        matched = {q for q, _ in self.pairs}
        return [q for q in range(self.n_queries) if q not in matched]

    def total(self, cost) -> float:
        """Exactly rounded sum of the assigned costs."""
        cost = np.asarray(cost)
        return math.fsum(float(cost[q, m]) for q, m in self.pairs)


def hungarian_match(cost) -> Assignment:
    """Minimum-cost assignment by shortest augmenting paths with dual potentials.

    Handles rectangular matrices by matching every row of the shorter side.
    O(n^2 m) with the inner scans vectorized over columns.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    rows, cols = cost.shape
    if rows == 0 or cols == 0:
        return Assignment([], rows, cols)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    transposed = rows > cols
    a = cost.T if transposed else cost
    n, m = a.shape

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match_of_col = np.zeros(m + 1, dtype=np.int64)   # 1-based row, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_of_col[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_of_col[j0]
            free = ~used[1:]
            reduced = a[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[match_of_col[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_of_col[j0] = match_of_col[j1]
            j0 = j1

    pairs = [(int(match_of_col[j]) - 1, j - 1) for j in range(1, m + 1) if match_of_col[j]]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return Assignment.from_pairs(pairs, rows, cols)


@dataclass
class GroundTruth:
    """Semantic label grid; one target mask per class present (labels 1..C)."""
    grid: object                     # head.OccupancyGrid
    classes: np.ndarray = field(init=False)

    def __post_init__(self):
        labels = self.grid.labels
        present = np.unique(labels)
        self.classes = present[present > 0].astype(np.int64)

    @property
    def n_masks(self) -> int:
        return self.classes.size

    def masks_at(self, points) -> np.ndarray:
        """``M x P`` binary matrix of each class mask sampled at ``points``."""
        p = np.asarray(points, dtype=np.int64).reshape(-1, 3)
        lab = self.grid.labels[p[:, 0], p[:, 1], p[:, 2]]
        return (lab[None, :] == self.classes[:, None]).astype(np.float64)

    def nonempty_at(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        return (self.grid.labels[c[:, 0], c[:, 1], c[:, 2]] > 0).astype(np.float64)


def sample_points(shape, n: int = NUM_POINTS, seed: int = 0) -> np.ndarray:
    """Uniform random voxel coordinates (with replacement)."""
    rng = np.random.default_rng(seed)
    return np.stack([rng.integers(0, ext, size=n) for ext in shape.dims], axis=1)


def softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def _bce_dice(logits, targets):
    """Pairwise mean BCE and dice loss between ``Q x P`` logits and ``M x P`` targets."""
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    p = x.shape[1]
    bce = (softplus(x).sum(axis=1)[:, None] - x @ t.T) / max(p, 1)
    s = sigmoid(x)
    dice = 1.0 - (2.0 * (s @ t.T) + 1.0) / (s.sum(axis=1)[:, None] + t.sum(axis=1)[None, :] + 1.0)
    return bce, dice


def matching_cost(pred, gt: GroundTruth, points, *, lambda_cls: float = LAMBDA_CLS,
                  lambda_bce: float = LAMBDA_BCE, lambda_dice: float = LAMBDA_DICE) -> np.ndarray:
    """``N_q x M`` matching cost; class term plus mask BCE/dice terms sampled at ``points``."""
    nq = pred.class_logits.shape[0]
    if gt.n_masks == 0:
        return np.zeros((nq, 0))
    probs = np.exp(log_softmax(pred.class_logits))
    cls_cost = -probs[:, gt.classes - 1]
    bce, dice = _bce_dice(pred.logits_at(points), gt.masks_at(points))
    return lambda_cls * cls_cost + lambda_bce * bce + lambda_dice * dice


@dataclass
class LossBreakdown:
    mask: float
    cls: float
    seg: float

    @property
    def total(self) -> float:
        return self.mask + self.cls + self.seg


def compute_losses(pred, gt: GroundTruth, assign: Assignment, points, binary_logits=None,
                   binary_coords=None, *, lambda_cls: float = LAMBDA_CLS,
                   lambda_bce: float = LAMBDA_BCE,
                   lambda_dice: float = LAMBDA_DICE) -> LossBreakdown:
    """Forward-only loss terms; depth supervision is not modeled.

    * mask: weighted BCE + dice per matched pair, averaged over pairs
    * cls: weighted cross-entropy over all queries; unmatched queries target the
      no-object slot (the last logit column)
    * seg: BCE of the occupancy-filter logits against ground-truth non-emptiness
    """
    nq, slots = pred.class_logits.shape
    no_object = slots - 1
    if assign.pairs:
        qs = np.array([q for q, _ in assign.pairs])
        ms = np.array([m for _, m in assign.pairs])
        bce, dice = _bce_dice(pred.logits_at(points)[qs], gt.masks_at(points)[ms])
        per_pair = lambda_bce * np.diag(bce) + lambda_dice * np.diag(dice)
        mask_loss = float(per_pair.mean())
    else:
        mask_loss = 0.0

    target = np.full(nq, no_object, dtype=np.int64)
    for q, m in assign.pairs:
        target[q] = gt.classes[m] - 1
    logp = log_softmax(pred.class_logits)
    cls_loss = lambda_cls * float(-logp[np.arange(nq), target].mean())

    seg_loss = 0.0
    if binary_logits is not None and np.size(binary_logits):
        x = np.asarray(binary_logits, dtype=np.float64).ravel()
        t = gt.nonempty_at(binary_coords)
        seg_loss = float((softplus(x) - x * t).mean())
    return LossBreakdown(mask_loss, cls_loss, seg_loss)
