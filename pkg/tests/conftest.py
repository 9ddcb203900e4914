import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from weakseg.smanet import NetworkSpec

ROOT = Path(__file__).resolve().parents[1]
FIXTURE = ROOT / "fixtures" / "mini"

TINY = dict(layers=(1, 1, 1, 1), base_width=8, head_channels=32, reduced_channels=16,
            attention_channels=16, decoder_channels=16, skip_channels=8)


def tiny_spec(variant="smanet", **kw) -> NetworkSpec:
    return NetworkSpec(variant=variant, **{**TINY, **kw})


def point_in_quad(px, py, quad) -> bool:
    """Exact even-odd membership with on-edge points counted as inside."""
    px, py = Fraction(px), Fraction(py)
    pts = [(Fraction(x), Fraction(y)) for x, y in quad]
    inside = False
    for i in range(4):
        (ax, ay), (bx, by) = pts[i], pts[(i + 1) % 4]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        if cross == 0 and min(ax, bx) <= px <= max(ax, bx) and min(ay, by) <= py <= max(ay, by):
            return True
        if (ay > py) != (by > py):
            x_cross = ax + (py - ay) * (bx - ax) / (by - ay)
            if px < x_cross:
                inside = not inside
    return inside


def brute_quad_mask(quad, width, height) -> np.ndarray:
    out = np.zeros((height, width), dtype=bool)
    for y in range(height):
        for x in range(width):
            out[y, x] = point_in_quad(Fraction(2 * x + 1, 2), Fraction(2 * y + 1, 2), quad)
    return out


def quad_area(quad) -> Fraction:
    s = Fraction(0)
    for i in range(4):
        (ax, ay), (bx, by) = quad[i], quad[(i + 1) % 4]
        s += Fraction(ax) * Fraction(by) - Fraction(bx) * Fraction(ay)
    return s / 2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURE


def pytest_configure(config):
    # allow ``from conftest import ...`` in test modules
    sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
