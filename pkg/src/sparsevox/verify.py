"""Seeded oracle-equivalence checks behind ``sparsevox verify``."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import oracle
from .core import DenseVolume, GridShape, SparseVoxelTensor, densify
from .head import FilteredScale, decode_queries, reconstruct_dense_mask
from .match import hungarian_match
from .pyramid import FeaturePyramid, fuse_scales, scale_metas, sparse_interp
from .spconv import ConvMode, build_rulebook, apply_conv, init_conv

TOLERANCE = 1e-5
SUITES = ("conv", "interp", "head", "match")


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    cases: int

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} cases={self.cases:<4} max_rel_err={self.max_error:.3e}"


def random_sparse(rng, shape: GridShape, density: float, channels: int) -> SparseVoxelTensor:
    mask = rng.random(shape.dims) < density
    coords = np.stack(np.nonzero(mask), axis=1)
    feats = rng.uniform(-1, 1, size=(coords.shape[0], channels))
    return SparseVoxelTensor(shape, coords, feats, _sorted=True)


def check_conv(seed: int, cases: int = 20) -> list:
    rng = np.random.default_rng(seed)
    worst, sets_ok, worst_sub = 0.0, True, 0.0
    for _ in range(cases):
        shape = GridShape(int(rng.integers(4, 17)), int(rng.integers(4, 17)), int(rng.integers(2, 9)))
        x = random_sparse(rng, shape, rng.uniform(0.05, 0.3), int(rng.integers(1, 9)))
        k = int(rng.choice([1, 3, 5]))
        spec = init_conv(rng, k, x.channels, int(rng.integers(1, 9)))
        y = apply_conv(x, spec, build_rulebook(x, spec))
        ref = oracle.dense_conv_oracle(densify(x), spec).values
        c = y.coords
        worst = max(worst, oracle.relative_error(y.features, ref[c[:, 0], c[:, 1], c[:, 2]]))
        sets_ok &= y.active_set() == oracle.active_set_oracle(x.coords, shape, spec.kernel)
        sub = init_conv(rng, k, x.channels, 4, mode=ConvMode.SUBMANIFOLD)
        ys = apply_conv(x, sub, build_rulebook(x, sub))
        ref = oracle.dense_conv_oracle(densify(x), sub).values
        c = x.coords
        sets_ok &= np.array_equal(ys.coords, x.coords)
        worst_sub = max(worst_sub, oracle.relative_error(ys.features, ref[c[:, 0], c[:, 1], c[:, 2]]))
    return [CheckResult("conv/regular", worst <= TOLERANCE and sets_ok, worst, cases),
            CheckResult("conv/submanifold", worst_sub <= TOLERANCE and sets_ok, worst_sub, cases)]


def random_pyramid(rng, base: GridShape, levels: int, channels: int, density: float = 0.3):
    scales = []
    for meta in scale_metas(base, levels):
        scales.append((meta, random_sparse(rng, meta.shape, density, channels)))
    return FeaturePyramid(scales, rng.uniform(0, 1, size=levels))


def _oracle_scales(pyr: FeaturePyramid):
    return [(m.stride_factor, m.collapsed, densify(t), t.coords) for m, t in pyr.scales]


def check_interp(seed: int, cases: int = 10) -> list:
    rng = np.random.default_rng(seed)
    worst_i, worst_f = 0.0, 0.0
    for _ in range(cases):
        base = GridShape(16, 16, 8)
        pyr = random_pyramid(rng, base, 4, 3)
        for (m_s, t_s) in pyr.scales:
            for (m_t, t_t) in pyr.scales:
                got = sparse_interp((m_s, t_s), m_t, t_t.coords)
                pts = (t_t.coords + 0.5) * m_t.stride_factor
                if m_t.collapsed:
                    pts[:, 2] = base.d / 2
                pts = pts / m_s.stride_factor - 0.5
                if m_s.collapsed:
                    pts[:, 2] = 0
                ref = oracle.dense_interp_oracle(densify(t_s), pts)
                worst_i = max(worst_i, oracle.relative_error(got, ref))
        fused = fuse_scales(pyr)
        refs = oracle.dense_fusion_oracle(_oracle_scales(pyr), pyr.fuse_weights, base)
        for (_, t), ref in zip(fused.scales, refs):
            worst_f = max(worst_f, oracle.relative_error(t.features, ref))
    return [CheckResult("interp/trilinear", worst_i <= TOLERANCE, worst_i, cases),
            CheckResult("interp/fusion", worst_f <= TOLERANCE, worst_f, cases)]


def check_head(seed: int, cases: int = 5) -> list:
    rng = np.random.default_rng(seed)
    worst = 0.0
    macs_ok = True
    for _ in range(cases):
        shape = GridShape(8, 8, 4)
        c, nq = 16, 10
        vals = rng.standard_normal(shape.dims + (c,))
        vol = DenseVolume(shape, vals.astype(np.float32))
        coords = np.stack(np.nonzero(np.ones(shape.dims, bool)), axis=1)
        kept = SparseVoxelTensor(shape, coords, vol.values.reshape(-1, c), _sorted=True)
        filt = FilteredScale(kept, np.zeros(kept.n), coords, np.zeros(c, np.float32))
        q = rng.standard_normal((nq, c)).astype(np.float32)
        pred = decode_queries(q, filt, np.zeros((c, 3)), np.zeros(3))
        dense = reconstruct_dense_mask(pred)
        ref, macs = oracle.dense_head_oracle(q, vol)
        worst = max(worst, oracle.relative_error(dense, ref))
        macs_ok &= macs == nq * shape.size * c
    return [CheckResult("head/dense-equivalence", worst <= TOLERANCE and macs_ok, worst, cases)]


def check_match(seed: int, cases: int = 100) -> list:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        r, c = (int(v) for v in rng.integers(1, 7, size=2))
        cost = rng.uniform(0, 10, size=(r, c))
        a = hungarian_match(cost).total(cost)
        b = oracle.brute_force_match(cost).total(cost)
        err = abs(a - b) / max(abs(b), 1e-30)
        worst = max(worst, err if math.isfinite(err) else math.inf)
    return [CheckResult("match/hungarian", worst == 0.0, worst, cases)]


def run_suite(suite: str, seed: int) -> list:
    checks = {"conv": check_conv, "interp": check_interp, "head": check_head,
              "match": check_match}
    names = SUITES if suite == "all" else (suite,)
    results = []
    for name in names:
        results.extend(checks[name](seed))
    return results
