import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from facemold.model import MorphableModel  # noqa: E402
from facemold.synth import generate_toy_model  # noqa: E402


@pytest.fixture(scope="session")
def toy():
    """The seed-7 toy model: 30 x 30 grid, d_id=8, d_exp=4, d_tex=10."""
    return generate_toy_model(7)


@pytest.fixture(scope="session")
def small_model():
    """A 20-vertex random model for dense-oracle comparisons."""
    rng = np.random.default_rng(20)
    n = 20
    tri = np.array([[i, i + 1, i + 2] for i in range(n - 2)])
    return MorphableModel(
        triangles=tri,
        mean_shape=rng.normal(size=3 * n),
        id_basis=rng.normal(size=(3 * n, 5)),
        exp_basis=rng.normal(size=(3 * n, 3)),
        mean_texture=rng.uniform(0.2, 0.8, size=n),
        tex_basis=rng.normal(size=(n, 4)),
    )


_ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the acceptance summary."""

    def record(number, title, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
