from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

from detfuse.geometry import BBox

FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@st.composite
def boxes(draw, num_classes=3, max_coord=100.0, confidence=None):
    """Random valid box; coordinates on a 0.5 grid so ties and touching edges occur."""
    x1 = draw(st.integers(0, int(2 * max_coord))) / 2
    y1 = draw(st.integers(0, int(2 * max_coord))) / 2
    w = draw(st.integers(0, 80)) / 2
    h = draw(st.integers(0, 80)) / 2
    cls = draw(st.integers(0, num_classes - 1))
    conf = confidence if confidence is not None else draw(st.integers(0, 20)) / 20
    return BBox(x1, y1, x1 + w, y1 + h, cls, conf)


def random_image(rng, h, w):
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


# acceptance results, filled by test_acceptance and echoed in the summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
