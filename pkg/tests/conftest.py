import hypothesis
import numpy as np
import pytest

from segada import tensor as T

hypothesis.settings.register_profile("default", deadline=None, max_examples=40)
hypothesis.settings.load_profile("default")


def numeric_at(f, x: np.ndarray, h: float, idx) -> np.ndarray:
    """Central differences of the scalar function ``f`` w.r.t. the flat entries ``idx`` of ``x`` (restored after)."""
    flat = x.reshape(-1)
    out = np.zeros(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def numeric_grad(f, x: np.ndarray, h: float) -> np.ndarray:
    return numeric_at(f, x, h, range(x.size)).reshape(x.shape)


def rel_err(a, b) -> float:
    """||a - b|| / max(||a||, ||b||): relative error of a whole gradient tensor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0


def check_grads(build_loss, leaves, dtype=np.float64, coords=None, rng=None, upcast=None):
    """Analytic vs central-difference gradients for every leaf; returns the worst relative error.

    With ``coords`` only that many randomly chosen entries per leaf are differenced.
    With ``upcast`` (every tensor the loss reads), the analytic gradient is taken
    at the given precision and the differences in 64-bit, so a 32-bit gradient is
    measured against an accurate reference instead of 32-bit rounding noise.
    """
    h = 1e-5 if dtype == np.float64 else 1e-3
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    with T.Tape():
        loss = build_loss()
        T.backward(loss)
    saved = None
    if upcast is not None:
        saved = [(t, t.data) for t in {id(t): t for t in list(upcast) + list(leaves)}.values()]
        for t, data in saved:
            t.data = data.astype(np.float64)
        h = 1e-6
    worst = 0.0
    for leaf in leaves:
        def f():
            with T.no_record():
                return float(build_loss().data)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if coords is None or coords >= leaf.data.size:
            num = numeric_grad(f, leaf.data, h)
        else:
            idx = (rng or np.random.default_rng(0)).choice(leaf.data.size, coords, replace=False)
            num = numeric_at(f, leaf.data, h, idx)
            ana = ana.reshape(-1)[idx]
        worst = max(worst, rel_err(ana, num))
    if saved is not None:
        for t, data in saved:
            t.data = data
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
