import numpy as np
import pytest

from domainmt import tensor as T


def numeric_grad(f, arrays, eps=1e-5):
    """Central differences of the scalar ``f()`` w.r.t. every array (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f()
            a[i] = old - eps
            lo = f()
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def gradcheck(build, *arrays, eps=1e-5):
    """``build(*tensors) -> scalar Tensor``; returns the worst relative error over inputs."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    T.backward(build(*tensors))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f():
        with T.no_grad():
            return float(build(*[T.Tensor(t.data) for t in tensors]).data)

    numeric = numeric_grad(f, [t.data for t in tensors], eps)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting: one verdict line per criterion ------------------------------
_VERDICTS: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number, reported in the summary")


@pytest.fixture
def criterion(request):
    n = request.node.get_closest_marker("criterion").args[0]

    def record(ok: bool, detail: str) -> bool:
        _VERDICTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    yield record
    _VERDICTS.setdefault(n, f"criterion {n}: FAIL  no verdict reached ({request.node.name} raised)")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
