import sys

import numpy as np
import pytest

from gaitaudit.data import SensorTrial


def numeric_grad(f, arr: np.ndarray, h: float = 1e-6, coords=None) -> np.ndarray:
    """Central differences of scalar f() w.r.t. arr (perturbed in place)."""
    flat = arr.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(len(coords) if not isinstance(coords, range) else flat.size)
    for j, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def rel_error(a, b) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def make_trial(rng, T=64, label=0, tid="t0", pid="p0"):
    return SensorTrial(tid, pid, label, "HS" if label == 0 else "PT", rng.normal(size=(4, 9, T)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
