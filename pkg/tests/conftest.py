import numpy as np
import pytest

from manetpower import difftensor as dt
from manetpower.channel import sample_rayleigh
from manetpower.topology import generate_erdos_renyi


def central_difference(f, arrays, step=1e-5):
    """Gradient of scalar ``f()`` w.r.t. each array in ``arrays`` (modified in place, restored)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + step
            up = f()
            a[idx] = old - step
            down = f()
            a[idx] = old
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def assert_grad_close(analytic, numeric, rel=1e-4, floor=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric)
    bound = rel * np.maximum(np.abs(numeric), np.abs(analytic)) + floor
    bad = err > bound
    assert not bad.any(), f"max err {err.max():.3g}; analytic {analytic[bad][:5]} numeric {numeric[bad][:5]}"


def random_instance(rng, n=6, n_bands=2, snr_db=0.0, p=0.5):
    t = generate_erdos_renyi(n, p, rng)
    return t, sample_rayleigh(t, n_bands, snr_db, rng)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tape():
    with dt.ComputeTape() as t:
        yield t


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
