import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from raydepth.geometry import PinholeIntrinsics

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def K100():
    return PinholeIntrinsics(100.0, 100.0, 50.0, 40.0, 100, 80)


def random_intrinsics(rng: np.random.Generator) -> PinholeIntrinsics:
    W = int(rng.integers(16, 400))
    H = int(rng.integers(16, 300))
    return PinholeIntrinsics(
        float(rng.uniform(20, 800)),
        float(rng.uniform(20, 800)),
        float(rng.uniform(0, W)),
        float(rng.uniform(0, H)),
        W,
        H,
    )


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; shown in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
