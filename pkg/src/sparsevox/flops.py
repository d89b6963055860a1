"""Per-stage multiply-accumulate accounting.

Operations report ``(stage, sparse_macs, dense_macs)`` events to a
:class:`FlopCounter`; :func:`count_flops` folds them into a
:class:`FlopsReport`. One MAC is two FLOPs.
"""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class StageEvent:
    stage: str
    sparse_macs: int
    dense_macs: int


class FlopCounter:
    def __init__(self):
        self.events: list = []

    def add(self, stage: str, sparse_macs: int, dense_macs: int) -> None:
        self.events.append(StageEvent(stage, int(sparse_macs), int(dense_macs)))

    def total(self, prefix: str = "") -> int:
        return sum(e.sparse_macs for e in self.events if e.stage.startswith(prefix))


@dataclass
class StageCount:
    sparse_macs: int = 0
    dense_macs: int = 0
    events: int = 0

    @property
    def ratio(self) -> float:
        return self.sparse_macs / self.dense_macs if self.dense_macs else 0.0

    def to_dict(self) -> dict:
        return {"sparse_macs": self.sparse_macs, "dense_macs": self.dense_macs,
                "ratio": self.ratio, "events": self.events}


def is_head_stage(name: str) -> bool:
    return name.startswith("head_")


@dataclass
class FlopsReport:
    stages: dict
    occupancy: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    peak_memory_bytes: int = 0
    extra: dict = field(default_factory=dict)

    def group(self, head: bool) -> StageCount:
        out = StageCount()
        for name, s in self.stages.items():
            if is_head_stage(name) == head:
                out.sparse_macs += s.sparse_macs
                out.dense_macs += s.dense_macs
                out.events += s.events
        return out

    @property
    def three_d(self) -> StageCount:
        return self.group(head=False)

    @property
    def head(self) -> StageCount:
        return self.group(head=True)


def count_flops(events, occupancy=(), timings=None, peak_memory_bytes: int = 0,
                extra=None) -> FlopsReport:
    """Sum events per stage, keeping first-seen stage order."""
    stages: dict = {}
    for e in events:
        s = stages.setdefault(e.stage, StageCount())
        s.sparse_macs += e.sparse_macs
        s.dense_macs += e.dense_macs
        s.events += 1
    return FlopsReport(stages, list(occupancy), dict(timings or {}), int(peak_memory_bytes),
                       dict(extra or {}))
