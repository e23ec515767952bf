import numpy as np
import pytest

from deepkernel.autodiff import Tensor, backward


def numeric_grad(fn, arrays, index, eps=1e-4):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = fn(*arrays)
        x[i] = old - eps
        down = fn(*arrays)
        x[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad


def rel_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_grad(build, arrays, eps=1e-4):
    """Largest relative error between tape gradients and central differences.

    ``build`` maps Tensors to a scalar Tensor; a fixed random projection keeps
    the loss sensitive to every output entry.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    backward(loss)

    def value(*arrs):
        return float(build(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for k, t in enumerate(tensors):
        num = numeric_grad(value, arrays, k, eps)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def projected(fn, shape_seed=1234):
    """Wrap ``fn`` so its output is reduced with fixed random weights."""
    cache = {}

    def build(*ts):
        out = fn(*ts)
        if out.shape not in cache:
            cache[out.shape] = np.random.default_rng(shape_seed).normal(size=out.shape)
        return (out * Tensor(cache[out.shape])).sum()

    return build


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from deepkernel.phantom import make_dataset

    root = tmp_path_factory.mktemp("tiny_ds")
    make_dataset(6, [20, 1000], 3, root, size=32, depth=4, n_folds=3)
    return root


# -- suite-wide kernel audit ------------------------------------------------------------
KERNEL_AUDIT = {"checked": 0, "oracle_checked": 0, "violations": []}
ORACLE_MAX_PIXELS = 64
ACCEPTANCE_LINES = []


def _audited(build, family):
    from deepkernel import kernels

    def wrapper(b, table, *args, **kwargs):
        kernel = build(b, table, *args, **kwargs)
        KERNEL_AUDIT["checked"] += 1
        try:
            kernels.check_kernel(kernel)
        except AssertionError as exc:
            KERNEL_AUDIT["violations"].append(f"{family} {table.h}x{table.w} p={table.p} s={table.s}: {exc}")
        if table.s == 1 and table.n <= ORACLE_MAX_PIXELS:
            KERNEL_AUDIT["oracle_checked"] += 1
            sigma = kernel.sigma if family == "rbf" else kernels.RBF_SIGMA
            ref = kernels.dense_oracle(b, table, family, sigma)
            err = float(np.max(np.abs(kernel.todense() - ref)))
            if err > 1e-6:
                KERNEL_AUDIT["violations"].append(f"{family} {table.h}x{table.w} p={table.p}: stride 1 differs from unstrided by {err:.3g}")
        return kernel

    wrapper.__wrapped__ = build
    return wrapper


def pytest_configure(config):
    """Check symmetry, non-negativity, Chebyshev sparsity and (small grids)
    stride-1 agreement with the unstrided definition on every kernel built."""
    from deepkernel import kernels

    kernels.build_kernel = _audited(kernels.build_kernel, "linear")
    kernels.build_kernel_rbf = _audited(kernels.build_kernel_rbf, "rbf")


def pytest_collection_modifyitems(config, items):
    items.sort(key=lambda item: item.nodeid.startswith("tests/test_acceptance.py") or "test_acceptance.py" in item.nodeid)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
