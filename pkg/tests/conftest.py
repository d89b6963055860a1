import numpy as np
import pytest

from sparsevox.core import GridShape, SparseVoxelTensor
from sparsevox.verify import random_sparse


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def impulse(shape: GridShape, at, channels: int = 1, value: float = 1.0) -> SparseVoxelTensor:
    feats = np.full((1, channels), value, dtype=np.float32)
    return SparseVoxelTensor(shape, [at], feats)


def gather(volume_values, coords):
    c = np.asarray(coords)
    return volume_values[c[:, 0], c[:, 1], c[:, 2]]


__all__ = ["impulse", "gather", "random_sparse", "default_run", "record"]


@pytest.fixture(scope="session")
def default_run():
    """One pipeline run on the default 128x128x16 scene at 20% density, shared across tests."""
    from sparsevox.config import PipelineConfig
    from sparsevox.pipeline import run_pipeline
    from sparsevox.scene import gen_scene

    config = PipelineConfig()
    scene, gt = gen_scene(config.shape, config.density, config.seed, config.channels,
                          config.num_classes)
    grid, report = run_pipeline(scene, config)
    return {"config": config, "scene": scene, "gt": gt, "grid": grid, "report": report}


ACCEPTANCE_LINES: list = []


@pytest.fixture
def record():
    """Record one acceptance verdict line; the terminal summary prints them all."""
    def _record(criterion: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
