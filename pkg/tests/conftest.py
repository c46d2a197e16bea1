import numpy as np
import pytest

from hybridcip.grid_mesh import build_hybrid_mesh


@pytest.fixture(scope="session")
def tiny_mesh():
    """5 x 5 grid with a 3 x 3 node FE patch."""
    return build_hybrid_mesh([[0, 0], [1, 1]], [[0.25, 0.25], [0.75, 0.75]], 0.25)


@pytest.fixture(scope="session")
def coarse_mesh():
    return build_hybrid_mesh([[0, 0], [1, 1]], [[0.25, 0.25], [0.75, 0.75]], 1 / 16)


def smooth_field(x, lo, hi, rng):
    """Random smooth field on points ``x`` with values spanning [lo, hi]."""
    k = rng.normal(size=(3, x.shape[1])) * 3.0
    v = sum(np.sin(x @ kk + rng.uniform(0, 2 * np.pi)) for kk in k)
    v = (v - v.min()) / np.ptp(v)
    return lo + (hi - lo) * v


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
