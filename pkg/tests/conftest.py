import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sdpcc.sopa import init_weights  # noqa: E402
from sdpcc.training import TrainConfig, train_toy  # noqa: E402


@pytest.fixture(scope="session")
def small_weights():
    return init_weights(width=8, latent_channels=2, support=8, irn_blocks=1, seed=1)


@pytest.fixture(scope="session")
def cube_model():
    """A small model trained briefly on a static cube, intra and inter samples mixed."""
    cfg = TrainConfig(data="cube", steps=200, lr=3e-3, bit_depth=5, width=8, latent_channels=2,
                      support=8, inter_fraction=0.5, seed=0)
    return train_toy(cfg)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def accept():
    """Record one pass/fail line per acceptance criterion; returns the verdict."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
