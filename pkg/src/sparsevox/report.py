"""JSON report emission.

Schema (``sparsevox.report/1``), top-level keys in this order:

``schema``, ``mac_convention``, ``config``, ``stages`` (per stage:
``sparse_macs``, ``dense_macs``, ``ratio``, ``events``), ``totals``
(``three_d``, ``head``, ``all``), ``occupancy`` (``input``, ``scales``),
``head_complexity``, ``head_comparison``, ``reference`` and ``runtime``.
Everything except ``runtime`` (wall-clock seconds and peak RSS) is a pure
function of the scene and the config (which carries the seed).
"""
from __future__ import annotations

import json
from pathlib import Path

from .flops import FlopsReport, StageCount
from .pipeline import REFERENCE_FLOPS_REDUCTION

SCHEMA = "sparsevox.report/1"
NONDETERMINISTIC_KEYS = ("runtime",)


def report_dict(report: FlopsReport, config=None) -> dict:
    three_d, head = report.three_d, report.head
    both = StageCount(three_d.sparse_macs + head.sparse_macs,
                      three_d.dense_macs + head.dense_macs, three_d.events + head.events)
    hc = dict(report.extra.get("head_complexity", {}))
    return {
        "schema": SCHEMA,
        "mac_convention": "counts are multiply-accumulates; 1 MAC = 2 FLOPs",
        "config": config.to_dict() if config is not None else {},
        "stages": {k: v.to_dict() for k, v in report.stages.items()},
        "totals": {"three_d": three_d.to_dict(), "head": head.to_dict(), "all": both.to_dict()},
        "occupancy": {"input": report.extra.get("input_occupancy"),
                      "scales": list(report.occupancy)},
        "head_complexity": hc,
        "head_comparison": {
            "linear_head_macs": report.extra.get("linear_head_macs"),
            "sparse_head_macs": head.sparse_macs,
            "dense_head_macs": head.dense_macs,
        },
        "reference": {
            "three_d_sparse_over_dense": three_d.ratio,
            "three_d_reduction": 1.0 - three_d.ratio,
            "published_full_model_reduction": REFERENCE_FLOPS_REDUCTION,
            "note": ("the published figure covers the full model, including the 2D image "
                     "encoder and view transform, which are not modeled here; it is not "
                     "expected to match"),
        },
        "runtime": {
            "stage_seconds": {k: v for k, v in report.timings.items()
                              if not k.startswith("latency")},
            "latency_3d_s": report.timings.get("latency_3d"),
            "latency_overall_s": report.timings.get("latency_overall"),
            "peak_rss_bytes": report.peak_memory_bytes,
        },
    }


def emit_report(report: FlopsReport, path, config=None) -> dict:
    """Write the report as JSON; raises ``FileNotFoundError`` naming a missing directory."""
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"report directory does not exist: {path.parent}")
    doc = report_dict(report, config)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return doc


def strip_nondeterministic(doc: dict) -> dict:
    return {k: v for k, v in doc.items() if k not in NONDETERMINISTIC_KEYS}
