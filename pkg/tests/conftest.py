import numpy as np
import pytest

from lpn.data import SyntheticSceneSpec, generate_synthetic


@pytest.fixture(scope="session")
def synthetic_small(tmp_path_factory):
    """8 classes at 64 px: fast enough for plumbing tests."""
    spec = SyntheticSceneSpec(num_classes=8, image_size=64, drone_views=2, query_views=1, seed=3)
    root = tmp_path_factory.mktemp("synthetic_small")
    return spec, root, generate_synthetic(spec, root)


@pytest.fixture(scope="session")
def synthetic_50(tmp_path_factory):
    """The 50-class, 4-drone-view set used by the end-to-end checks."""
    spec = SyntheticSceneSpec(num_classes=50, drone_views=4, query_views=2, seed=0)
    root = tmp_path_factory.mktemp("synthetic_50")
    return spec, root, generate_synthetic(spec, root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
