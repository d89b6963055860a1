"""Rulebook-driven sparse and submanifold convolution.

Kernel taps are enumerated lexicographically over ``(ix, iy, iz)`` with
``ix in [0, kx)`` etc.; ``weights[j]`` is the ``C_in x C_out`` matrix of tap
``j``. The correlation convention is used (no kernel flip): tap ``j`` of output
``o`` reads input position ``stride * o + tap - pad``. Per dimension, ``pad``
is ``(k - 1) // 2`` when the stride is 1 (same-size, centered window) and 0
otherwise, so a strided window starts at ``stride * o`` and always covers the
cell ``floor(p / stride)`` of every input ``p`` it sees.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import FEATURE_DTYPE, GridShape, SparseVoxelTensor, keys_to_coords, linear_keys

LEAKY_SLOPE = 0.01


class ConvMode(enum.Enum):
    REGULAR = "regular"
    SUBMANIFOLD = "submanifold"


class StaleRulebookError(ValueError):
    pass


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected three values, got {v!r}")
    return t


@dataclass
class ConvSpec:
    kernel: tuple
    in_channels: int
    out_channels: int
    weights: np.ndarray
    stride: tuple = (1, 1, 1)
    mode: ConvMode = ConvMode.REGULAR
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.kernel = _triple(self.kernel)
        self.stride = _triple(self.stride)
        self.mode = ConvMode(self.mode)
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ValueError(f"kernel {self.kernel} must be positive and odd")
        if any(s < 1 for s in self.stride):
            raise ValueError(f"stride {self.stride} must be positive")
        if self.mode is ConvMode.SUBMANIFOLD and self.stride != (1, 1, 1):
            raise ValueError("submanifold convolution requires stride (1, 1, 1)")
        self.weights = np.asarray(self.weights, dtype=FEATURE_DTYPE)
        expect = (self.volume, self.in_channels, self.out_channels)
        if self.weights.shape != expect:
            raise ValueError(f"weights shape {self.weights.shape}, expected {expect}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=FEATURE_DTYPE).reshape(self.out_channels)

    @property
    def volume(self) -> int:
        return self.kernel[0] * self.kernel[1] * self.kernel[2]

    @property
    def padding(self) -> tuple[int, int, int]:
        return tuple((k - 1) // 2 if s == 1 else 0 for k, s in zip(self.kernel, self.stride))

    def taps(self) -> np.ndarray:
        """Kernel tap index triples, lexicographic, shape ``(K, 3)``."""
        return np.array(list(itertools.product(*(range(k) for k in self.kernel))), dtype=np.int64)

    def out_shape(self, shape: GridShape) -> GridShape:
        return shape.ceil_div(self.stride)


def init_conv(rng: np.random.Generator, kernel, in_channels: int, out_channels: int, *,
              stride=(1, 1, 1), mode=ConvMode.REGULAR, bias: bool = True) -> ConvSpec:
    """Seeded uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
    kernel = _triple(kernel)
    vol = kernel[0] * kernel[1] * kernel[2]
    bound = 1.0 / np.sqrt(vol * in_channels)
    w = rng.uniform(-bound, bound, size=(vol, in_channels, out_channels))
    b = rng.uniform(-bound, bound, size=out_channels) if bias else None
    return ConvSpec(kernel, in_channels, out_channels, w, stride=stride, mode=mode, bias=b)


@dataclass
class Rulebook:
    offsets: np.ndarray          # (K, 3) tap index triples
    pairs: list                  # per tap: (in_rows, out_rows), sorted by out_row
    out_coords: np.ndarray
    out_shape: GridShape
    n_in: int

    @property
    def n_out(self) -> int:
        return self.out_coords.shape[0]

    @property
    def pair_count(self) -> int:
        return sum(p[0].size for p in self.pairs)


def build_rulebook(x: SparseVoxelTensor, spec: ConvSpec) -> Rulebook:
    if spec.in_channels != x.channels:
        raise ValueError(
            f"convolution expects {spec.in_channels} channels, input has {x.channels}")
    taps = spec.taps()
    pad = np.array(spec.padding)
    stride = np.array(spec.stride)
    out_shape = spec.out_shape(x.shape)
    upper = np.array(out_shape.dims)

    if spec.mode is ConvMode.SUBMANIFOLD:
        out_coords = x.coords
        pairs = []
        all_out = np.arange(x.n, dtype=np.int64)
        for tap in taps:
            src = x.lookup(out_coords + tap - pad)
            hit = src >= 0
            pairs.append((src[hit], all_out[hit]))
        return Rulebook(taps, pairs, out_coords, out_shape, x.n)

    cand = []
    for tap in taps:
        num = x.coords - tap + pad
        ok = np.all(num % stride == 0, axis=1)
        o = num // stride
        ok &= np.all((o >= 0) & (o < upper), axis=1)
        rows = np.flatnonzero(ok)
        cand.append((rows, linear_keys(o[ok], out_shape)))
    if cand:
        out_keys = np.unique(np.concatenate([k for _, k in cand]))
    else:
        out_keys = np.zeros(0, np.int64)
    out_coords = keys_to_coords(out_keys, out_shape)
    pairs = []
    for rows, keys in cand:
        out_rows = np.searchsorted(out_keys, keys)
        order = np.argsort(out_rows, kind="stable")
        pairs.append((rows[order], out_rows[order]))
    return Rulebook(taps, pairs, out_coords, out_shape, x.n)


def apply_conv(x: SparseVoxelTensor, spec: ConvSpec, rulebook: Rulebook,
               counter=None, stage: str = "conv") -> SparseVoxelTensor:
    """Gather-GEMM-scatter over the rulebook pairs, tap by tap."""
    if rulebook.n_in != x.n:
        raise StaleRulebookError(
            f"rulebook was built for {rulebook.n_in} input voxels, input has {x.n}")
    n_out = rulebook.n_out
    out = np.zeros((n_out, spec.out_channels), dtype=FEATURE_DTYPE)
    for j, (in_rows, out_rows) in enumerate(rulebook.pairs):
        if in_rows.size == 0:
            continue
        if in_rows.max() >= x.n or out_rows.max() >= n_out:
            raise StaleRulebookError("rulebook row index out of range")
        # out_rows are unique within a tap, so plain fancy-index accumulation is safe
        out[out_rows] += x.features[in_rows] @ spec.weights[j]
    if spec.bias is not None and n_out:
        out += spec.bias
    if counter is not None:
        counter.add(stage, conv_macs(rulebook, spec), dense_conv_macs(x.shape, spec))
    return SparseVoxelTensor(rulebook.out_shape, rulebook.out_coords, out, _sorted=True)


def conv(x: SparseVoxelTensor, spec: ConvSpec, counter=None, stage: str = "conv"):
    return apply_conv(x, spec, build_rulebook(x, spec), counter, stage)


def conv_macs(rulebook: Rulebook, spec: ConvSpec) -> int:
    return rulebook.pair_count * spec.in_channels * spec.out_channels


def dense_conv_macs(in_shape: GridShape, spec: ConvSpec) -> int:
    """MACs of the dense convolution, counting only taps that land inside the grid.

    At full occupancy this equals the sparse count exactly; it is
    ``H*W*D*prod(k)*C_in*C_out`` minus the taps that fall on zero padding.
    """
    out_shape = spec.out_shape(in_shape)
    total = spec.in_channels * spec.out_channels
    for n, n_out, k, s, p in zip(in_shape.dims, out_shape.dims, spec.kernel, spec.stride,
                                 spec.padding):
        o = np.arange(n_out)[:, None] * s + np.arange(k)[None, :] - p
        total *= int(np.count_nonzero((o >= 0) & (o < n)))
    return total


def leaky_relu(x: SparseVoxelTensor, slope: float = LEAKY_SLOPE) -> SparseVoxelTensor:
    f = x.features
    return x.with_features(np.where(f >= 0, f, f * FEATURE_DTYPE(slope)))


def completion_block(x: SparseVoxelTensor, specs: Sequence[ConvSpec], *, linear: bool = False,
                     counter=None, stage: str = "completion") -> SparseVoxelTensor:
    """Planar regular convolutions applied in sequence, each followed by a leaky ReLU.

    The 3D form takes three specs with kernels ``(k,k,1)``, ``(k,1,k)``, ``(1,k,k)``;
    collapsed scales pass a single ``(k,k,1)`` spec. Every layer rebuilds its
    rulebook on the (grown) active set of the previous one.
    """
    if len(specs) == 3:
        k = specs[0].kernel[0]
        want = [(k, k, 1), (k, 1, k), (1, k, k)]
    elif len(specs) == 1:
        k = specs[0].kernel[0]
        want = [(k, k, 1)]
    else:
        raise ValueError("completion block takes one (2D) or three (3D) convolutions")
    for spec, kern in zip(specs, want):
        if spec.kernel != kern or spec.mode is not ConvMode.REGULAR or spec.stride != (1, 1, 1):
            raise ValueError(f"completion layer must be regular, stride 1, kernel {kern}")
    for spec in specs:
        x = conv(x, spec, counter, stage)
        if not linear:
            x = leaky_relu(x)
    return x


def aggregation_block(x: SparseVoxelTensor, specs: Sequence[ConvSpec], *, linear: bool = False,
                      counter=None, stage: str = "aggregation") -> SparseVoxelTensor:
    """Two parallel submanifold branches, summed.

    ``specs`` holds branch A followed by branch B with the same number of layers
    each: four specs for the 3D form (A = ``1xkxk`` then ``kx1xk``, B the reverse)
    or two for the collapsed form (one ``5x5x1`` layer per branch).
    """
    if len(specs) not in (2, 4):
        raise ValueError("aggregation block takes two or four convolutions")
    for spec in specs:
        if spec.mode is not ConvMode.SUBMANIFOLD or spec.stride != (1, 1, 1):
            raise ValueError("aggregation layers must be submanifold with stride 1")
    half = len(specs) // 2
    cache: dict = {}

    def run(branch):
        h = x
        for spec in branch:
            key = (spec.kernel, h.channels)
            # every layer sees the same active set, so rulebooks are shared per kernel shape
            if key not in cache:
                cache[key] = build_rulebook(h, spec)
            h = apply_conv(h, spec, cache[key], counter, stage)
            if not linear:
                h = leaky_relu(h)
        return h

    a = run(specs[:half])
    b = run(specs[half:])
    if a.channels != b.channels:
        raise ValueError("aggregation branches end with different channel counts")
    return a.with_features(a.features + b.features)


def downsample(x: SparseVoxelTensor, spec: ConvSpec, counter=None,
               stage: str = "downsample") -> SparseVoxelTensor:
    if spec.mode is not ConvMode.REGULAR or spec.stride not in ((2, 2, 2), (2, 2, 1)):
        raise ValueError("downsample expects a regular convolution with stride (2,2,2) or (2,2,1)")
    return conv(x, spec, counter, stage)


def decomposed_tap_count(k: int, layers: int = 3) -> int:
    """Kernel taps visited per voxel by ``layers`` planar ``k x k`` layers."""
    return layers * k * k
