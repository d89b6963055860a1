"""Sweep the kept-voxel count N_l and compare the sparse head's decode + reconstruct
MACs with the dense outer-product head, including the break-even point near N_l = HWD."""
import argparse
import csv
import sys

import numpy as np

from sparsevox.core import GridShape, SparseVoxelTensor
from sparsevox.flops import FlopCounter
from sparsevox.head import FilteredScale, decode_queries, reconstruct_dense_mask


def measured_macs(shape, n_kept, nq, c, rng):
    keys = np.sort(rng.choice(shape.size, n_kept, replace=False))
    coords = np.stack(np.unravel_index(keys, shape.dims), axis=1)
    kept = SparseVoxelTensor(shape, coords, np.zeros((n_kept, c), np.float32), _sorted=True)
    filtered = FilteredScale(kept, np.zeros(n_kept), coords, np.zeros(c, np.float32))
    counter = FlopCounter()
    pred = decode_queries(np.zeros((nq, c), np.float32), filtered, np.zeros((c, 2)),
                          np.zeros(2), counter)
    reconstruct_dense_mask(pred, counter=counter)
    return counter.total("head_decode")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--shape", default="64x64x16")
    ap.add_argument("--queries", type=int, default=100)
    ap.add_argument("--channels", type=int, default=192)
    ap.add_argument("--points", type=int, default=12)
    args = ap.parse_args()
    shape = GridShape.parse(args.shape)
    nq, c, hwd = args.queries, args.channels, shape.size
    dense = nq * hwd * c
    rng = np.random.default_rng(0)

    fracs = np.linspace(0.0, 1.0, args.points)
    counts = sorted({int(round(f * hwd)) for f in fracs} | {hwd - 1})
    w = csv.writer(sys.stdout)
    w.writerow(["n_kept", "fraction", "sparse_macs", "dense_macs", "ratio", "closed_form",
                "sparse_below_dense"])
    for n in counts:
        s = measured_macs(shape, n, nq, c, rng)
        w.writerow([n, f"{n / hwd:.4f}", s, dense, f"{s / dense:.6f}",
                    f"{n / hwd + 1 / (nq * c):.6f}", s < dense])
    # smallest m with (hwd - m) kept voxels still below dense, from the counted cost model
    m = 1 + (hwd * (1 + nq)) // (nq * (c + 1))
    while measured_macs(shape, hwd - m, nq, c, rng) >= dense:
        m += 1
    print(f"# sparse < dense requires N_l <= HWD - {m} (HWD = {hwd})", file=sys.stderr)


if __name__ == "__main__":
    main()
