import numpy as np
import pytest

from conftest import impulse
from sparsevox import oracle
from sparsevox.core import GridShape, SparseVoxelTensor, densify
from sparsevox.flops import FlopCounter
from sparsevox.pyramid import (FeaturePyramid, build_pyramid, collapse_height, fuse_scales,
                               init_pyramid, interp_weights, scale_metas, sparse_interp)
from sparsevox.verify import random_pyramid, random_sparse


def test_scale_metas_default_layout():
    metas = scale_metas(GridShape(128, 128, 16), 4)
    assert [m.stride_factor for m in metas] == [1, 2, 4, 8]
    assert [m.collapsed for m in metas] == [False, False, True, True]
    assert [m.shape.dims for m in metas] == [(128, 128, 16), (64, 64, 8), (32, 32, 1), (16, 16, 1)]


def test_scale_metas_never_collapse_level_one():
    metas = scale_metas(GridShape(8, 8, 4), 2, collapsed_levels=2)
    assert [m.collapsed for m in metas] == [False, True]


def test_collapse_height_averages_columns():
    x = SparseVoxelTensor(GridShape(2, 2, 4), [(0, 0, 0), (0, 0, 3), (1, 1, 2)],
                          [[1.0], [3.0], [5.0]])
    y = collapse_height(x)
    assert y.shape == GridShape(2, 2, 1)
    assert y.coords.tolist() == [[0, 0, 0], [1, 1, 0]]
    assert y.features[:, 0].tolist() == [2.0, 5.0]


def _small_params(rng, channels=2, levels=4, decoder=3):
    return init_pyramid(rng, channels, levels, 3, decoder)


def test_empty_input_gives_empty_scales(rng):
    x = SparseVoxelTensor.empty(GridShape(16, 16, 8), 2)
    pyr = build_pyramid(x, _small_params(rng))
    assert pyr.levels == 4 and all(t.n == 0 for _, t in pyr.scales)
    assert all(t.channels == 3 for _, t in pyr.scales)


def test_impulse_reaches_every_scale(rng):
    p = np.array([9, 6, 5])
    x = impulse(GridShape(16, 16, 8), tuple(p), channels=2)
    pyr = build_pyramid(x, _small_params(rng))
    for meta, t in pyr.scales:
        assert t.n >= 1
        q = p // meta.stride_factor
        if meta.collapsed:
            q[2] = 0
        assert tuple(q) in t.active_set()


def test_levels_are_projected_to_decoder_width(rng):
    x = random_sparse(rng, GridShape(16, 16, 8), 0.1, 2)
    counter = FlopCounter()
    pyr = build_pyramid(x, _small_params(rng, decoder=5), counter=counter)
    assert all(t.channels == 5 for _, t in pyr.scales)
    stages = {e.stage for e in counter.events}
    assert {"l1.completion", "l1.aggregation", "l2.downsample", "l4.projection"} <= stages
    assert "l1.downsample" not in stages


def test_occupancy_non_decreasing_on_generated_scene():
    from sparsevox.scene import gen_scene
    scene, _ = gen_scene(GridShape(64, 64, 16), 0.2, seed=3, channels=2)
    pyr = build_pyramid(scene, _small_params(np.random.default_rng(0)))
    occ = pyr.occupancy()
    assert all(a <= b for a, b in zip(occ, occ[1:])), occ


def _meta_pair(base=GridShape(16, 16, 8)):
    return scale_metas(base, 4)


def test_interp_aligned_case_returns_source_features(rng):
    metas = _meta_pair()
    src = random_sparse(rng, metas[0].shape, 0.3, 3)
    got = sparse_interp((metas[0], src), metas[0], src.coords)
    assert np.allclose(got, src.features)


def test_interp_empty_neighbourhood_is_zero(rng):
    metas = _meta_pair()
    src = impulse(metas[1].shape, (0, 0, 0), channels=2)
    got = sparse_interp((metas[1], src), metas[0], [(15, 15, 7)])
    assert np.all(got == 0)


def test_interp_weights_sum_to_one_when_full():
    metas = _meta_pair()
    full = SparseVoxelTensor(metas[1].shape,
                             np.stack(np.nonzero(np.ones(metas[1].shape.dims, bool)), 1),
                             np.ones((metas[1].shape.size, 1)))
    target = np.stack(np.nonzero(np.ones(metas[0].shape.dims, bool)), 1)
    rows, w = interp_weights((metas[1], full), metas[0], target)
    total = (w * (rows >= 0)).sum(axis=0)
    assert np.all(total <= 1 + 1e-12)
    # interior targets have every stencil neighbour active
    interior = np.all((target >= 1) & (target < np.array(metas[0].shape.dims) - 1), axis=1)
    assert np.allclose(total[interior], 1.0)


def test_interp_matches_dense_oracle_all_pairs(rng):
    base = GridShape(16, 16, 8)
    pyr = random_pyramid(rng, base, 4, 3)
    for ms, ts in pyr.scales:
        for mt, tt in pyr.scales:
            got = sparse_interp((ms, ts), mt, tt.coords)
            pts = ms.to_grid(mt.centers(tt.coords))
            ref = oracle.dense_interp_oracle(densify(ts), pts)
            assert oracle.relative_error(got, ref) <= 1e-5


def test_fuse_zero_weights_is_identity(rng):
    pyr = random_pyramid(rng, GridShape(8, 8, 4), 2, 2)
    pyr = FeaturePyramid(pyr.scales, [0.0, 0.0])
    fused = fuse_scales(pyr)
    for (_, a), (_, b) in zip(pyr.scales, fused.scales):
        assert np.array_equal(a.features, b.features)


def test_fuse_with_empty_second_scale(rng):
    pyr = random_pyramid(rng, GridShape(8, 8, 4), 2, 2)
    m2 = pyr.scales[1][0]
    pyr = FeaturePyramid([pyr.scales[0], (m2, SparseVoxelTensor.empty(m2.shape, 2))], [0.5, 0.9])
    fused = fuse_scales(pyr)
    assert np.array_equal(fused.scales[0][1].features, pyr.scales[0][1].features)


def test_fuse_matches_dense_oracle_and_keeps_active_sets(rng):
    base = GridShape(16, 16, 8)
    pyr = random_pyramid(rng, base, 4, 3)
    fused = fuse_scales(pyr)
    scales = [(m.stride_factor, m.collapsed, densify(t), t.coords) for m, t in pyr.scales]
    refs = oracle.dense_fusion_oracle(scales, pyr.fuse_weights, base)
    for (_, before), (_, after), ref in zip(pyr.scales, fused.scales, refs):
        assert np.array_equal(before.coords, after.coords)
        assert oracle.relative_error(after.features, ref) <= 1e-5


def test_fuse_is_linear_in_weights(rng):
    pyr = random_pyramid(rng, GridShape(8, 8, 4), 4, 2)
    once = fuse_scales(pyr)
    twice = fuse_scales(FeaturePyramid(pyr.scales, 2 * pyr.fuse_weights))
    for (_, own), (_, a), (_, b) in zip(pyr.scales, once.scales, twice.scales):
        cross_a = a.features.astype(np.float64) - own.features
        cross_b = b.features.astype(np.float64) - own.features
        assert np.allclose(cross_b, 2 * cross_a, rtol=1e-5, atol=1e-6)


def test_cross_scale_completion():
    base = GridShape(8, 8, 4)
    metas = scale_metas(base, 2, collapsed_levels=0)
    fine = SparseVoxelTensor(metas[0].shape, [(6, 6, 2)], [[0.0]])
    coarse = SparseVoxelTensor(metas[1].shape, [(3, 3, 1)], [[2.0]])
    fused = fuse_scales(FeaturePyramid([(metas[0], fine), (metas[1], coarse)], [1.0, 1.0]))
    assert fused.scales[0][1].features[0, 0] != 0


def test_pyramid_rejects_mismatched_grid(rng):
    metas = scale_metas(GridShape(8, 8, 4), 2)
    with pytest.raises(ValueError):
        FeaturePyramid([(metas[0], SparseVoxelTensor.empty(metas[1].shape, 1))], [1.0])
