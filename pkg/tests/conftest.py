import numpy as np
import pytest

from crossfuse import tensor as T


def analytic_grads(fn, *arrays):
    """Gradients of scalar ``fn(*tensors)`` with respect to each input array."""
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = fn(*ts)
    tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def numeric_grads(fn, *arrays, h=1e-5):
    grads = []
    for i in range(len(arrays)):
        def f(x, i=i):
            args = [T.Tensor(a) for a in arrays]
            args[i] = x
            return fn(*args)
        grads.append(T.finite_diff_gradient(f, arrays[i], h))
    return grads


def gradcheck(fn, *arrays, h=1e-5):
    """Max relative error between tape and central-difference gradients."""
    ana = analytic_grads(fn, *arrays)
    num = numeric_grads(fn, *arrays, h=h)
    return max(T.max_rel_error(a, n) for a, n in zip(ana, num))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def module_gradcheck(module, loss_fn, h=1e-5, names=None):
    """Max relative error over a module's parameter blocks for scalar ``loss_fn()``.

    Parameters are perturbed in place so the module's own wiring is exercised.
    """
    module.zero_grad()
    with T.Tape() as tape:
        out = loss_fn()
    tape.backward(out)
    worst = 0.0
    for name, p in module.named_parameters():
        if names is not None and name not in names:
            continue
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        num = np.zeros_like(p.data)
        flat, nflat = p.data.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        worst = max(worst, T.max_rel_error(ana, num))
    return worst


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
