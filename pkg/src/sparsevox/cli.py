"""Command-line entry point: ``gen-scene``, ``run``, ``bench`` and ``verify``.

Exit codes: 0 success, 1 verification failure, 2 usage or config error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import statistics
import sys

from .config import ConfigError, PipelineConfig
from .core import GridShape, read_scene, write_scene

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def _cmd_gen_scene(args) -> int:
    from .scene import gen_scene, write_labels
    try:
        shape = GridShape.parse(args.shape)
        scene, gt = gen_scene(shape, args.density, args.seed, args.channels, args.num_classes)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    write_scene(args.out, scene)
    if args.gt:
        write_labels(args.gt, gt)
    print(f"wrote {args.out}: grid {shape}, {scene.n} active voxels "
          f"({scene.occupancy:.2%}), {scene.channels} channels")
    return EXIT_OK


def _load_config(path) -> PipelineConfig:
    return PipelineConfig.load(path) if path else PipelineConfig()


def _cmd_run(args) -> int:
    from .pipeline import run_pipeline
    from .report import emit_report
    from .scene import write_labels
    config = _load_config(args.config)
    scene = read_scene(args.scene)
    grid, report = run_pipeline(scene, config)
    emit_report(report, args.report, config)
    write_labels(args.labels, grid)
    hc = report.extra["head_complexity"]
    print(f"3D stage MACs: {report.three_d.sparse_macs:,} sparse / "
          f"{report.three_d.dense_macs:,} dense (ratio {report.three_d.ratio:.3f})")
    print(f"head decode ratio {hc['ratio']:.4f} (closed form {hc['predicted_ratio']:.4f})")
    if hc["n_kept"] < hc["voxels"] and not hc["inequality_holds"]:
        print("FAIL: sparse head cost is not below the dense head cost", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _cmd_bench(args) -> int:
    from .pipeline import init_params, run_pipeline
    from .report import emit_report, report_dict
    from .scene import gen_scene
    config = _load_config(args.config)
    if args.repeat < 1:
        print("error: --repeat must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    scene, _ = gen_scene(config.shape, config.density, config.seed, config.channels,
                         config.num_classes)
    params = init_params(config)
    lat3d, latall, status = [], [], EXIT_OK
    report = None
    for _ in range(args.repeat):
        _, report = run_pipeline(scene, config, params)
        lat3d.append(report.timings["latency_3d"])
        latall.append(report.timings["latency_overall"])
        hc = report.extra["head_complexity"]
        if hc["n_kept"] < hc["voxels"] and not hc["inequality_holds"]:
            status = EXIT_VERIFY
    doc = report_dict(report, config)
    summary = {
        "grid": str(config.shape), "input_occupancy": scene.occupancy, "repeat": args.repeat,
        "three_d_mac_ratio": doc["totals"]["three_d"]["ratio"],
        "head_mac_ratio": doc["totals"]["head"]["ratio"],
        "latency_3d_s": {"median": statistics.median(lat3d), "min": min(lat3d)},
        "latency_overall_s": {"median": statistics.median(latall), "min": min(latall)},
        "peak_rss_bytes": report.peak_memory_bytes,
    }
    print(json.dumps(summary, indent=2))
    if args.report:
        emit_report(report, args.report, config)
    return status


def _cmd_verify(args) -> int:
    from .verify import run_suite
    results = run_suite(args.suite, args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsevox", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="write a seeded synthetic scene file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--density", type=float, default=0.2)
    g.add_argument("--shape", default="128x128x16")
    g.add_argument("--channels", type=int, default=128)
    g.add_argument("--num-classes", type=int, default=16)
    g.add_argument("--gt", help="also write the ground-truth label grid here")
    g.set_defaults(func=_cmd_gen_scene)

    r = sub.add_parser("run", help="run the pipeline on a scene file")
    r.add_argument("--scene", required=True)
    r.add_argument("--config")
    r.add_argument("--report", required=True)
    r.add_argument("--labels", required=True)
    r.set_defaults(func=_cmd_run)

    b = sub.add_parser("bench", help="time repeated runs on a generated scene")
    b.add_argument("--config")
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--report")
    b.set_defaults(func=_cmd_bench)

    v = sub.add_parser("verify", help="oracle equivalence checks")
    v.add_argument("--suite", choices=("conv", "interp", "head", "match", "all"), default="all")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=_cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed scene files and grid mismatches surface as ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
