"""3D-stage sparse/dense MAC ratio and per-scale occupancy as the input density varies."""
import argparse

from sparsevox.config import PipelineConfig
from sparsevox.core import GridShape
from sparsevox.pipeline import run_pipeline
from sparsevox.scene import gen_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--shape", default="64x64x16")
    ap.add_argument("--densities", default="0.05,0.1,0.2,0.3,0.5")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    config = PipelineConfig(shape=GridShape.parse(args.shape), seed=args.seed)
    print("density  occupancy  3d_ratio  head_ratio  n_kept  scale_occupancy")
    for d in (float(v) for v in args.densities.split(",")):
        scene, _ = gen_scene(config.shape, d, config.seed, config.channels, config.num_classes)
        _, report = run_pipeline(scene, config)
        occ = " ".join(f"{o:.2f}" for o in report.occupancy)
        print(f"{d:7.2f}  {scene.occupancy:9.3f}  {report.three_d.ratio:8.3f}  "
              f"{report.head.ratio:10.3f}  {report.extra['head_complexity']['n_kept']:6d}  {occ}")


if __name__ == "__main__":
    main()
