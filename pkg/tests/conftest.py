import numpy as np
import pytest
from hypothesis import strategies as st

from gradcode.straggler import StragglerProfile


@pytest.fixture
def thirds_profile():
    """p = (1/2, 1/3, 1/4): reliability odds (1, 2, 3), so S = 6."""
    return StragglerProfile.from_probabilities([1 / 2, 1 / 3, 1 / 4])


@st.composite
def profiles(draw, k_min=1, k_max=12, p_min=0.01, p_max=0.9):
    k = draw(st.integers(k_min, k_max))
    p = draw(st.lists(st.floats(p_min, p_max), min_size=k, max_size=k))
    return StragglerProfile.from_probabilities(p)


@st.composite
def profile_and_n(draw, k_min=1, k_max=12, n_factor=3):
    prof = draw(profiles(k_min=k_min, k_max=k_max))
    n = draw(st.integers(prof.k, n_factor * prof.k))
    return prof, n


def random_profile(rng: np.random.Generator, k: int, low: float = 0.01, high: float = 0.9) -> StragglerProfile:
    return StragglerProfile.from_probabilities(rng.uniform(low, high, size=k))


# -- acceptance verdicts ------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
