import numpy as np
import pytest

from trep import tensor as T


def finite_difference(fn, params, h=1e-5):
    """Central-difference gradients of a scalar function of named tensors.

    ``fn`` is re-evaluated with each parameter entry nudged in place, so
    it must read the live ``data`` buffers.
    """
    grads = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads[name] = g.reshape(p.shape)
    return grads


def max_rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(build, params, h=1e-5, tol=1e-4):
    """Assert analytic gradients of build() match finite differences."""
    T.zero_grad(params)
    loss = build()
    T.backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros(p.shape))
                for name, p in params.items()}

    def value():
        with T.no_grad():
            return build().item()

    numeric = finite_difference(value, params, h=h)
    for name in params:
        err = max_rel_err(analytic[name], numeric[name])
        assert err <= tol, f"gradient mismatch for {name}: rel err {err:.3g}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
