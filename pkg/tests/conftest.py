import numpy as np
import pytest

from aoaslu import kernels
from aoaslu import tensor as T


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


def fd_check(fn, arrays, h=1e-6, rtol=1e-5, atol=1e-8):
    """Compare tape gradients of scalar ``fn(*tensors)`` with central differences."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.GradientTape():
        out = fn(*tensors)
        T.backward(out)
    for t in tensors:
        num = np.zeros_like(t.data)
        for idx in np.ndindex(t.shape):
            old = t.data[idx]
            t.data[idx] = old + h
            plus = float(fn(*tensors).data)
            t.data[idx] = old - h
            minus = float(fn(*tensors).data)
            t.data[idx] = old
            num[idx] = (plus - minus) / (2 * h)
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        np.testing.assert_allclose(grad, num, rtol=rtol, atol=atol)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
