import numpy as np
import pytest

from convmvm.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn w.r.t. every element of x.

    The oracle: it evaluates fn twice per element and never touches the
    autodiff path it is used to check.
    """
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference scaled by the gradient's own magnitude."""
    scale = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_grads(build_loss, params: dict[str, Tensor], tol: float = 1e-6, h: float = 1e-5) -> dict[str, float]:
    """Compare backward() gradients of build_loss() against finite differences.

    build_loss must rebuild the graph from the live params on every call.
    Returns the per-parameter relative errors (all asserted below tol).
    """
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    errs = {}
    for name, p in params.items():
        assert p.grad is not None, f"{name}: no gradient accumulated"
        num = numeric_grad(lambda: float(build_loss().data), p.data, h=h)
        errs[name] = rel_error(p.grad, num)
        assert errs[name] < tol, f"{name}: rel error {errs[name]:.3e} >= {tol}"
    return errs
