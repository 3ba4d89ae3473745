import numpy as np
import pytest

from rfulm.geometry import AcquisitionParams, ArrayGeometry, PlaneWave


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def geom():
    return ArrayGeometry()


@pytest.fixture(scope="session")
def acq():
    return AcquisitionParams()


@pytest.fixture(scope="session")
def wave0(geom):
    return PlaneWave.from_degrees(0.0, geom, index=0)


@pytest.fixture(scope="session")
def small_geom():
    """Desk-scale probe: 64 elements, 128 I/Q samples (about 7.9 mm deep)."""
    return ArrayGeometry(64, 1e-4)


@pytest.fixture(scope="session")
def small_acq():
    return AcquisitionParams(n_samples=128)


def central_diff(f, x, idx, eps=1e-6):
    old = x[idx]
    x[idx] = old + eps
    a = f()
    x[idx] = old - eps
    b = f()
    x[idx] = old
    return (a - b) / (2 * eps)


_ACCEPTANCE = {}


@pytest.fixture
def criterion(request):
    """Record ``(number, passed, detail)`` for the acceptance summary."""

    def record(number, passed, detail=""):
        _ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
