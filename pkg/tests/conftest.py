import numpy as np
import pytest

from calmpde import tensor as tc


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, inputs: list[np.ndarray], h: float = 1e-5, rtol: float = 1e-5):
    """Compare tape gradients of ``sum(build(*tensors) * probe)`` with central differences."""
    rng = np.random.default_rng(123)
    tensors = [tc.Tensor(x, requires_grad=True) for x in inputs]
    with tc.Tape() as tape:
        out = build(*tensors)
        probe = rng.normal(size=out.shape)
        loss = tc.sum(tc.mul(out, tc.Tensor(probe)))
    tc.backward(loss, tape)

    def value():
        with tc.no_record():
            return float(np.sum(build(*tensors).data * probe))

    for t in tensors:
        fd = numeric_grad(value, t.data, h)
        an = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = np.linalg.norm(fd - an) / max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12)
        assert err < rtol, f"relative gradient error {err:.2e}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_lines():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
