"""Bounded-grid sparse voxel tensors in coordinate (COO) format.

Coordinates are hashed to their row-major linear index ``(x * w + y) * d + z``.
The hash is a bijection on a bounded grid, so lookups are exact, and sorting
by the key is the same as lexicographic ``(x, y, z)`` order. Every tensor keeps
its rows in that order, which makes the sorted key array a ready-made index:
``searchsorted`` gives the row of any coordinate.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

FEATURE_DTYPE = np.float32
SCENE_MAGIC = b"SVOX"
SCENE_VERSION = 1


@dataclass(frozen=True)
class GridShape:
    h: int
    w: int
    d: int

    def __post_init__(self):
        for name in ("h", "w", "d"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"grid extent {name}={value} must be a positive integer")
            object.__setattr__(self, name, int(value))

    @property
    def size(self) -> int:
        return self.h * self.w * self.d

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.h, self.w, self.d)

    @property
    def collapsed(self) -> bool:
        return self.d == 1

    def ceil_div(self, stride) -> "GridShape":
        return GridShape(*(-(-n // s) for n, s in zip(self.dims, stride)))

    @classmethod
    def parse(cls, text: str) -> "GridShape":
        """Parse ``"HxWxD"``."""
        parts = text.lower().split("x")
        if len(parts) != 3:
            raise ValueError(f"shape must look like HxWxD, got {text!r}")
        return cls(*(int(p) for p in parts))

    def __str__(self):
        return f"{self.h}x{self.w}x{self.d}"


def linear_keys(coords: np.ndarray, shape: GridShape) -> np.ndarray:
    """Row-major linear index of each coordinate triple (int64)."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return (c[:, 0] * shape.w + c[:, 1]) * shape.d + c[:, 2]


def keys_to_coords(keys: np.ndarray, shape: GridShape) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    z = keys % shape.d
    xy = keys // shape.d
    return np.stack([xy // shape.w, xy % shape.w, z], axis=1)


def in_bounds(coords: np.ndarray, shape: GridShape) -> np.ndarray:
    c = np.asarray(coords).reshape(-1, 3)
    upper = np.array(shape.dims)
    return np.all((c >= 0) & (c < upper), axis=1)


class SparseVoxelTensor:
    """Active voxel coordinates plus one feature row per voxel.

    Rows are always stored in lexicographic coordinate order. Instances are
    treated as immutable; the coordinate and feature arrays are flagged
    read-only.
    """

    def __init__(self, shape: GridShape, coords, features, *, _sorted: bool = False):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(features, dtype=FEATURE_DTYPE)
        if features.ndim != 2:
            raise ValueError("features must be an N x C matrix")
        if features.shape[0] != coords.shape[0]:
            raise ValueError(
                f"{coords.shape[0]} coordinates but {features.shape[0]} feature rows")
        if features.shape[1] < 1:
            raise ValueError("channel count must be positive")
        if not in_bounds(coords, shape).all():
            raise ValueError(f"coordinates outside grid {shape}")
        keys = linear_keys(coords, shape)
        if not _sorted:
            order = np.argsort(keys, kind="stable")
            keys, coords, features = keys[order], coords[order], features[order]
        if keys.size > 1 and np.any(keys[1:] == keys[:-1]):
            raise ValueError("duplicate coordinates in sparse tensor")
        for arr in (keys, coords, features):
            arr.flags.writeable = False
        self.shape = shape
        self.coords = coords
        self.features = features
        self.keys = keys
        self._index: Optional[dict] = None

    @classmethod
    def empty(cls, shape: GridShape, channels: int) -> "SparseVoxelTensor":
        return cls(shape, np.zeros((0, 3), np.int64), np.zeros((0, channels), FEATURE_DTYPE),
                   _sorted=True)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def occupancy(self) -> float:
        return self.n / self.shape.size

    @property
    def index(self) -> dict:
        """Map from coordinate triple to row number (built lazily)."""
        if self._index is None:
            self._index = {tuple(int(v) for v in c): i for i, c in enumerate(self.coords)}
        return self._index

    def lookup(self, coords) -> np.ndarray:
        """Rows of ``coords`` in this tensor, ``-1`` where inactive or out of bounds."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        rows = np.full(coords.shape[0], -1, dtype=np.int64)
        ok = in_bounds(coords, self.shape)
        if self.n == 0 or not ok.any():
            return rows
        q = linear_keys(coords[ok], self.shape)
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, self.n - 1)
        hit = self.keys[pos_c] == q
        rows[np.flatnonzero(ok)[hit]] = pos_c[hit]
        return rows

    def with_features(self, features) -> "SparseVoxelTensor":
        """Same active set, new features."""
        out = SparseVoxelTensor.__new__(SparseVoxelTensor)
        features = np.asarray(features, dtype=FEATURE_DTYPE)
        if features.ndim != 2 or features.shape[0] != self.n:
            raise ValueError("feature rows must match the active set")
        features.flags.writeable = False
        out.shape, out.coords, out.keys = self.shape, self.coords, self.keys
        out.features = features
        out._index = self._index
        return out

    def active_set(self) -> set:
        return set(map(tuple, self.coords.tolist()))

    def __repr__(self):
        return f"SparseVoxelTensor(shape={self.shape}, n={self.n}, channels={self.channels})"


@dataclass
class DenseVolume:
    shape: GridShape
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 4 or self.values.shape[:3] != self.shape.dims:
            raise ValueError(
                f"value array {self.values.shape} does not match grid {self.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[3]


def any_nonzero(values: np.ndarray) -> np.ndarray:
    return np.any(values != 0, axis=-1)


def sparsify(dense: DenseVolume,
             active: Callable[[np.ndarray], np.ndarray] = any_nonzero) -> SparseVoxelTensor:
    """Gather the voxels where ``active`` holds.

    ``active`` receives the full ``h x w x d x C`` array and returns a boolean
    ``h x w x d`` mask. ``np.nonzero`` walks the grid in row-major order, so the
    result is already in canonical order.
    """
    mask = np.asarray(active(dense.values), dtype=bool)
    coords = np.stack(np.nonzero(mask), axis=1).astype(np.int64)
    return SparseVoxelTensor(dense.shape, coords, dense.values[mask], _sorted=True)


def densify(sparse: SparseVoxelTensor, fill=None) -> DenseVolume:
    """Scatter features into a dense volume; inactive voxels get ``fill`` (zeros by default)."""
    shape = sparse.shape
    values = np.zeros(shape.dims + (sparse.channels,), dtype=FEATURE_DTYPE)
    if fill is not None:
        values[...] = np.asarray(fill, dtype=FEATURE_DTYPE).reshape(sparse.channels)
    c = sparse.coords
    values[c[:, 0], c[:, 1], c[:, 2]] = sparse.features
    return DenseVolume(shape, values)


# -- scene files -------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIQ")


def write_scene(path, tensor: SparseVoxelTensor) -> None:
    """Write the little-endian ``SVOX`` binary scene format."""
    path = Path(path)
    s = tensor.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, s.h, s.w, s.d, tensor.channels, tensor.n))
        fh.write(np.ascontiguousarray(tensor.coords, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(tensor.features, dtype="<f4").tobytes())


def read_scene(path) -> SparseVoxelTensor:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated scene header")
    magic, version, h, w, d, c, n = _HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != SCENE_VERSION:
        raise ValueError(f"{path}: unsupported scene version {version}")
    expected = _HEADER.size + n * 3 * 4 + n * c * 4
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    off = _HEADER.size
    coords = np.frombuffer(data, dtype="<u4", count=n * 3, offset=off).reshape(n, 3)
    feats = np.frombuffer(data, dtype="<f4", count=n * c, offset=off + n * 12).reshape(n, c)
    return SparseVoxelTensor(GridShape(h, w, d), coords.astype(np.int64),
                             feats.astype(FEATURE_DTYPE))
