from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from dynobs.geometry import AABB3, Box2D

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

coord = st.floats(-20.0, 20.0, allow_nan=False, allow_infinity=False)
extent = st.floats(0.05, 5.0, allow_nan=False, allow_infinity=False)


@st.composite
def boxes3d(draw):
    c = [draw(coord) for _ in range(3)]
    s = [draw(extent) for _ in range(3)]
    return AABB3(np.array(c), np.array(s))


@st.composite
def boxes2d(draw, size=200.0):
    u0 = draw(st.floats(0, size))
    v0 = draw(st.floats(0, size))
    w = draw(st.floats(1.0, size))
    h = draw(st.floats(1.0, size))
    return Box2D(u0, v0, u0 + w, v0 + h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria append (number, passed, detail) here; printed after the run
ACCEPTANCE_LINES: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
