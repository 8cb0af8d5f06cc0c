import numpy as np
import pytest

from hamsplat import autodiff as ad


@pytest.fixture(autouse=True)
def _debug_checks():
    """NaN/Inf detection stays on for every test; timed loops opt out locally."""
    old = ad.set_debug_checks(True)
    yield
    ad.set_debug_checks(old)


def numeric_grad(f, values, h=1e-5):
    """Central finite differences of a scalar function of numpy arrays.

    ``f`` maps a list of arrays to a float; returns one gradient array per
    input.
    """
    grads = []
    for i, v in enumerate(values):
        g = np.zeros_like(v, dtype=np.float64)
        flat = g.ravel()
        vflat = v.ravel()
        for j in range(vflat.size):
            orig = vflat[j]
            vflat[j] = orig + h
            fp = f(values)
            vflat[j] = orig - h
            fm = f(values)
            vflat[j] = orig
            flat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_grad(build, values, h=1e-5, rtol=1e-5, atol=1e-7):
    """Compare tape gradients of ``build(*leaves) -> scalar`` with central FD."""
    values = [np.array(v, dtype=np.float64) for v in values]
    leaves = [ad.leaf(v) for v in values]
    out = build(*leaves)
    grads = ad.grad(out, leaves)

    def f(vals):
        with ad.no_grad():
            return build(*[ad.constant(v) for v in vals]).item()

    fd = numeric_grad(f, values, h=h)
    for lf, v, fg in zip(leaves, values, fd):
        got = grads[lf].data
        err = np.abs(got - fg)
        scale = np.maximum(np.abs(fg), np.abs(got))
        ok = (err <= atol) | (err <= rtol * scale)
        assert np.all(ok), f"gradient mismatch: ad={got}, fd={fg}"
