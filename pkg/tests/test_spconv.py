import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import gather, impulse
from sparsevox import oracle
from sparsevox.core import GridShape, SparseVoxelTensor, densify
from sparsevox.flops import FlopCounter
from sparsevox.spconv import (ConvMode, ConvSpec, StaleRulebookError, aggregation_block,
                              apply_conv, build_rulebook, completion_block, conv, conv_macs,
                              decomposed_tap_count, dense_conv_macs, downsample, init_conv)
from sparsevox.verify import random_sparse

SUB = ConvMode.SUBMANIFOLD


def test_spec_validation():
    with pytest.raises(ValueError):
        init_conv(np.random.default_rng(0), 2, 1, 1)
    with pytest.raises(ValueError):
        init_conv(np.random.default_rng(0), 3, 1, 1, stride=2, mode=SUB)
    with pytest.raises(ValueError):
        ConvSpec(3, 2, 2, np.zeros((27, 2, 3)))


def test_channel_mismatch_rejected(rng):
    x = random_sparse(rng, GridShape(4, 4, 4), 0.3, 2)
    with pytest.raises(ValueError):
        build_rulebook(x, init_conv(rng, 3, 3, 1))


def test_impulse_regular_footprint():
    x = impulse(GridShape(8, 8, 8), (4, 4, 4))
    rb = build_rulebook(x, init_conv(np.random.default_rng(0), 3, 1, 1))
    assert rb.n_out == 27
    expect = {(4 + a, 4 + b, 4 + c) for a, b, c in itertools.product((-1, 0, 1), repeat=3)}
    assert set(map(tuple, rb.out_coords.tolist())) == expect


def test_impulse_regular_footprint_clipped_at_corner():
    x = impulse(GridShape(8, 8, 8), (0, 0, 0))
    rb = build_rulebook(x, init_conv(np.random.default_rng(0), 3, 1, 1))
    assert rb.n_out == 8


def test_impulse_submanifold_keeps_coordinate():
    x = impulse(GridShape(8, 8, 8), (2, 5, 1))
    rb = build_rulebook(x, init_conv(np.random.default_rng(0), 3, 1, 1, mode=SUB))
    assert rb.out_coords.tolist() == [[2, 5, 1]]
    assert rb.pair_count == 1


def test_regular_active_set_matches_dilation_oracle(rng):
    x = random_sparse(rng, GridShape(16, 16, 8), 0.15, 2)
    spec = init_conv(rng, 3, 2, 2)
    rb = build_rulebook(x, spec)
    assert set(map(tuple, rb.out_coords.tolist())) == oracle.active_set_oracle(
        x.coords, x.shape, spec.kernel)


def test_rulebook_invariants(rng):
    x = random_sparse(rng, GridShape(10, 9, 5), 0.2, 3)
    spec = init_conv(rng, (3, 1, 5), 3, 2)
    rb = build_rulebook(x, spec)
    assert len(rb.pairs) == spec.volume
    keys = rb.out_coords[:, 0] * 1000 + rb.out_coords[:, 1] * 10 + rb.out_coords[:, 2]
    assert np.unique(keys).size == keys.size
    for ins, outs in rb.pairs:
        assert ins.size == outs.size
        assert np.all(ins < x.n) and np.all(outs < rb.n_out)
        assert np.all(np.diff(outs) >= 0)


def test_identity_kernel_returns_input(rng):
    x = random_sparse(rng, GridShape(6, 6, 6), 0.3, 4)
    spec = ConvSpec(1, 4, 4, np.eye(4)[None])
    y = conv(x, spec)
    assert np.array_equal(y.coords, x.coords)
    assert np.array_equal(y.features, x.features)


def test_empty_input_gives_empty_output(rng):
    x = SparseVoxelTensor.empty(GridShape(4, 4, 4), 3)
    for mode in ConvMode:
        y = conv(x, init_conv(rng, 3, 3, 2, mode=mode))
        assert y.n == 0 and y.channels == 2


def test_stale_rulebook_detected(rng):
    big = random_sparse(rng, GridShape(8, 8, 8), 0.5, 2)
    small = random_sparse(rng, GridShape(8, 8, 8), 0.02, 2)
    spec = init_conv(rng, 3, 2, 2)
    rb = build_rulebook(big, spec)
    with pytest.raises(StaleRulebookError):
        apply_conv(small, spec, rb)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_regular_matches_dense_oracle(rng, k):
    x = random_sparse(rng, GridShape(16, 16, 8), 0.2, 3)
    spec = init_conv(rng, k, 3, 4)
    y = conv(x, spec)
    ref = oracle.dense_conv_oracle(densify(x), spec).values
    assert oracle.relative_error(y.features, gather(ref, y.coords)) <= 1e-5
    # everything outside the output active set is bias only
    outside = np.ones(x.shape.dims, bool)
    outside[tuple(y.coords.T)] = False
    assert np.allclose(ref[outside], spec.bias, atol=1e-6)


def test_strided_matches_dense_oracle(rng):
    x = random_sparse(rng, GridShape(9, 8, 7), 0.2, 2)
    spec = init_conv(rng, 3, 2, 3, stride=2)
    y = conv(x, spec)
    assert y.shape == GridShape(5, 4, 4)
    ref = oracle.dense_conv_oracle(densify(x), spec).values
    assert oracle.relative_error(y.features, gather(ref, y.coords)) <= 1e-5
    assert y.active_set() == oracle.active_set_oracle(x.coords, x.shape, spec.kernel, spec.stride)


def test_linearity(rng):
    shape = GridShape(8, 8, 4)
    x = random_sparse(rng, shape, 0.3, 3)
    y = x.with_features(rng.standard_normal(x.features.shape))
    spec = init_conv(rng, 3, 3, 2, bias=False)
    a, b = 0.7, -1.3
    lhs = conv(x.with_features(a * x.features + b * y.features), spec).features
    rhs = a * conv(x, spec).features + b * conv(y, spec).features
    assert oracle.relative_error(lhs, rhs) <= 1e-5


def test_determinism(rng):
    x = random_sparse(rng, GridShape(8, 8, 8), 0.2, 2)
    spec = init_conv(rng, 3, 2, 2)
    r1, r2 = build_rulebook(x, spec), build_rulebook(x, spec)
    assert np.array_equal(r1.out_coords, r2.out_coords)
    for (i1, o1), (i2, o2) in zip(r1.pairs, r2.pairs):
        assert np.array_equal(i1, i2) and np.array_equal(o1, o2)
    assert conv(x, spec).features.tobytes() == conv(x, spec).features.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 3, 5]))
def test_submanifold_closure_property(seed, k):
    rng = np.random.default_rng(seed)
    x = random_sparse(rng, GridShape(7, 6, 5), rng.uniform(0, 0.5), 2)
    y = conv(x, init_conv(rng, k, 2, 3, mode=SUB))
    assert np.array_equal(y.coords, x.coords)


def test_completion_impulse_is_minkowski_sum():
    rng = np.random.default_rng(0)
    k = 3
    specs = [init_conv(rng, kern, 1, 1) for kern in ((k, k, 1), (k, 1, k), (1, k, k))]
    centre = (16, 16, 16)
    y = completion_block(impulse(GridShape(32, 32, 32), centre), specs, linear=True)
    r = range(-(k // 2), k // 2 + 1)
    planes = [{(a, b, 0) for a in r for b in r}, {(a, 0, c) for a in r for c in r},
              {(0, b, c) for b in r for c in r}]
    offsets = {(0, 0, 0)}
    for plane in planes:
        offsets = {tuple(np.add(o, p)) for o in offsets for p in plane}
    expect = {tuple(np.add(centre, o)) for o in offsets}
    assert y.active_set() == expect
    cube = {tuple(np.add(centre, o)) for o in itertools.product(r, repeat=3)}
    assert cube <= y.active_set()


def test_completion_rejects_wrong_kernel_order(rng):
    specs = [init_conv(rng, kern, 1, 1) for kern in ((3, 1, 3), (3, 3, 1), (1, 3, 3))]
    with pytest.raises(ValueError):
        completion_block(impulse(GridShape(4, 4, 4), (1, 1, 1)), specs)


def test_completion_empty(rng):
    specs = [init_conv(rng, kern, 2, 2) for kern in ((3, 3, 1), (3, 1, 3), (1, 3, 3))]
    assert completion_block(SparseVoxelTensor.empty(GridShape(4, 4, 4), 2), specs).n == 0


@pytest.mark.parametrize("k,taps", [(3, 27), (5, 75), (7, 147)])
def test_decomposed_tap_count(k, taps):
    assert decomposed_tap_count(k) == taps
    assert decomposed_tap_count(k) <= k ** 3
    if k > 3:
        assert decomposed_tap_count(k) < k ** 3


def _aggregation_specs(rng, k, cin, cout, bias=True):
    kernels = ((1, k, k), (k, 1, k), (k, 1, k), (1, k, k))
    chans = ((cin, cout), (cout, cout), (cin, cout), (cout, cout))
    return [init_conv(rng, kern, a, b, mode=SUB, bias=bias) for kern, (a, b) in zip(kernels, chans)]


def test_aggregation_preserves_active_set(rng):
    x = random_sparse(rng, GridShape(8, 8, 6), 0.2, 3)
    y = aggregation_block(x, _aggregation_specs(rng, 3, 3, 4))
    assert np.array_equal(y.coords, x.coords) and y.channels == 4


def test_aggregation_single_voxel_uses_centre_taps(rng):
    x = impulse(GridShape(5, 5, 5), (2, 2, 2), channels=2)
    specs = _aggregation_specs(rng, 3, 2, 2)
    y = aggregation_block(x, specs, linear=True)

    def centre(spec):
        return spec.weights[spec.volume // 2]

    def branch(s1, s2):
        h = x.features[0] @ centre(s1) + s1.bias
        return h @ centre(s2) + s2.bias

    expect = branch(specs[0], specs[1]) + branch(specs[2], specs[3])
    assert np.allclose(y.features[0], expect, rtol=1e-6)


def test_aggregation_matches_masked_dense_oracle(rng):
    x = random_sparse(rng, GridShape(12, 12, 6), 0.25, 3)
    specs = _aggregation_specs(rng, 3, 3, 3)
    y = aggregation_block(x, specs, linear=True)
    mask = np.zeros(x.shape.dims, bool)
    mask[tuple(x.coords.T)] = True
    vol = densify(x)
    ref = oracle.masked_dense_chain(vol, specs[:2], mask) + oracle.masked_dense_chain(
        vol, specs[2:], mask)
    assert oracle.relative_error(y.features, gather(ref, x.coords)) <= 1e-5


def test_aggregation_2d_variant(rng):
    x = random_sparse(rng, GridShape(10, 10, 1), 0.3, 2)
    specs = [init_conv(rng, (5, 5, 1), 2, 2, mode=SUB) for _ in range(2)]
    y = aggregation_block(x, specs, linear=True)
    mask = np.zeros(x.shape.dims, bool)
    mask[tuple(x.coords.T)] = True
    ref = sum(oracle.masked_dense_chain(densify(x), [s], mask) for s in specs)
    assert oracle.relative_error(y.features, gather(ref, x.coords)) <= 1e-5


def test_aggregation_rejects_regular_layers(rng):
    specs = [init_conv(rng, (5, 5, 1), 1, 1) for _ in range(2)]
    with pytest.raises(ValueError):
        aggregation_block(impulse(GridShape(4, 4, 1), (0, 0, 0)), specs)


def test_downsample_overlapping_windows():
    x = SparseVoxelTensor(GridShape(4, 4, 4), [(0, 0, 0), (1, 1, 1)], np.ones((2, 1)))
    y = downsample(x, init_conv(np.random.default_rng(0), 3, 1, 1, stride=2))
    assert y.shape == GridShape(2, 2, 2)
    assert y.coords.tolist() == [[0, 0, 0]]


def test_downsample_floor_mapping(rng):
    x = random_sparse(rng, GridShape(8, 8, 8), 0.05, 1)
    spec = init_conv(rng, 3, 1, 1, stride=2)
    y = downsample(x, spec)
    assert {tuple(c) for c in (x.coords // 2).tolist()} <= y.active_set()
    assert y.active_set() == oracle.active_set_oracle(x.coords, x.shape, spec.kernel, spec.stride)


def test_downsample_empty_and_validation(rng):
    spec = init_conv(rng, 3, 1, 1, stride=2)
    assert downsample(SparseVoxelTensor.empty(GridShape(4, 4, 4), 1), spec).n == 0
    with pytest.raises(ValueError):
        downsample(impulse(GridShape(4, 4, 4), (0, 0, 0)), init_conv(rng, 3, 1, 1))


def test_downsample_raises_occupancy_fraction():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = random_sparse(rng, GridShape(16, 16, 8), 0.2, 1)
        y = downsample(x, init_conv(rng, 3, 1, 1, stride=2))
        assert y.occupancy > x.occupancy


def test_downsample_2d_boundary_stride(rng):
    x = random_sparse(rng, GridShape(8, 8, 1), 0.3, 1)
    y = downsample(x, init_conv(rng, (3, 3, 1), 1, 1, stride=(2, 2, 1)))
    assert y.shape == GridShape(4, 4, 1)


def test_mac_counting_closed_forms(rng):
    x = random_sparse(rng, GridShape(6, 6, 6), 0.3, 1)
    spec = ConvSpec(1, 1, 1, np.ones((1, 1, 1)))
    counter = FlopCounter()
    conv(x, spec, counter, "s")
    assert counter.total("s") == x.n
    full = SparseVoxelTensor(x.shape, np.stack(np.nonzero(np.ones(x.shape.dims, bool)), 1),
                             np.ones((x.shape.size, 2)))
    for spec in (init_conv(rng, 3, 2, 3), init_conv(rng, (5, 1, 3), 2, 2),
                 init_conv(rng, 3, 2, 2, stride=2)):
        rb = build_rulebook(full, spec)
        assert conv_macs(rb, spec) == dense_conv_macs(full.shape, spec)
