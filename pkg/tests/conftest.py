import numpy as np
import pytest

from dplnet.tensor_core import Tape, Tensor, backward, finite_diff_grad, ops, relative_error


def projected(fn, inputs, weights):
    """Scalar sum(fn(*inputs) * weights), so every output entry matters."""
    out = fn(*inputs)
    return ops.sum(ops.mul(out, Tensor(weights)))


def grad_errors(fn, inputs, seed=0, step=1e-4):
    """Relative error of backward vs central differences for each input."""
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    weights = rng.uniform(-1, 1, out.shape)
    with Tape() as tape:
        loss = projected(fn, inputs, weights)
    grads = backward(tape, loss, wrt=inputs)
    errs = []
    for i, t in enumerate(inputs):
        numeric = finite_diff_grad(lambda: projected(fn, inputs, weights), t, step)
        errs.append(relative_error(grads[("wrt", i)], numeric))
    return errs


def leaf(rng, shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
