import numpy as np
import pytest

from sp2gno import tensor as T


def numeric_grad(fn, arrays, eps=1e-6):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(*arrays)
            flat[i] = orig - eps
            down = fn(*arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_grads(build, arrays, tol=1e-5, weights=None):
    """``build(*tensors)`` -> Tensor; compares autodiff of a weighted sum with differences."""
    rng = np.random.default_rng(123)
    probe = {}

    def scalar_of(out):
        if "w" not in probe:
            probe["w"] = rng.standard_normal(out.shape) if weights is None else weights
        return T.sum_(out * T.Tensor(probe["w"]))

    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = scalar_of(build(*leaves))
    T.backward(loss)
    numeric = numeric_grad(lambda *xs: scalar_of(build(*[T.Tensor(x) for x in xs])).item(),
                           [a.copy() for a in arrays])
    for leaf, num in zip(leaves, numeric):
        assert rel_err(leaf.grad, num) <= tol, (rel_err(leaf.grad, num), leaf.grad, num)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
