import numpy as np
import pytest

from inrv import numerics as nx


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. each array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f(*arrays)
            a[i] = old - eps
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def rel_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_grads(build, arrays, tol=1e-4):
    """``build(*tensors)`` returns a scalar Tensor; compares tape grads with finite differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
    nx.backward(build(*tensors))

    def f(*arrs):
        with nx.no_grad():
            return build(*[nx.Tensor(a) for a in arrs]).item()

    for t, g in zip(tensors, numeric_grad(f, arrays)):
        assert t.grad is not None
        assert rel_error(t.grad, g) < tol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary: test_acceptance records one line per criterion here
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
