import numpy as np
import pytest

from hamsplat import autodiff as ad
from conftest import check_grad


class TestForward:
    def test_relu(self):
        assert ad.relu(ad.constant([-1.0, 2.0])).data.tolist() == [0.0, 2.0]

    def test_matmul_identity(self):
        x = np.array([0.3, -1.2, 2.0])
        out = ad.matmul(ad.constant(np.eye(3)), ad.constant(x))
        assert np.allclose(out.data, x)

    def test_sum_exp_zeros(self):
        out = ad.tsum(ad.exp(ad.constant([0.0, 0.0, 0.0])))
        assert out.item() == pytest.approx(3.0)

    def test_shape_error_names_op(self):
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
        with pytest.raises(ad.ShapeError, match="add"):
            ad.add(ad.constant(np.ones(3)), ad.constant(np.ones(4)))

    def test_nan_detection(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log(ad.constant([-1.0]))

    def test_no_grad_produces_constants(self):
        x = ad.leaf([1.0])
        with ad.no_grad():
            y = ad.mul(x, x)
        assert not y.requires_grad and y.parents == ()


class TestGrad:
    def test_quadratic(self):
        x = ad.leaf([1.0, 2.0])
        y = ad.tsum(ad.mul(x, x))
        g = ad.grad(y, [x])[x]
        assert np.array_equal(g.data, [2.0, 4.0])

    def test_constant_function_detached(self):
        x = ad.leaf([1.0, 2.0])
        c = ad.constant(5.0)
        y = ad.mul(c, c)
        g = ad.grad(y, [x])
        assert np.array_equal(g[x].data, [0.0, 0.0])
        assert x in [t for t in g.detached]

    def test_nonscalar_output_rejected(self):
        x = ad.leaf([1.0, 2.0])
        with pytest.raises(ad.ShapeError):
            ad.grad(ad.mul(x, x), [x])

    def test_sum_sin_matches_fd(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=8)
        check_grad(lambda t: ad.tsum(ad.sin(t)), [x], h=1e-4, rtol=1e-5)

    def test_second_order_quadratic_exact(self):
        # f(x) = 0.5||x||^2, g(x) = ||grad f||^2 = ||x||^2 has gradient 2x
        x = ad.leaf([1.5, -2.0, 0.25])
        f = ad.mul(0.5, ad.tsum(ad.mul(x, x)))
        gf = ad.grad(f, [x], create_graph=True)[x]
        g2 = ad.grad(ad.tsum(ad.mul(gf, gf)), [x])[x]
        assert np.array_equal(g2.data, 2.0 * x.data)

    def test_second_order_through_tanh_head(self):
        # d/dx of (dF/dx) for F = sum(tanh(Wx)) matches FD of the analytic grad
        rng = np.random.default_rng(7)
        W = rng.normal(size=(4, 4))
        xv = rng.normal(size=4)

        def inner_grad(xarr):
            x = ad.leaf(xarr)
            F = ad.tsum(ad.tanh(ad.matmul(ad.constant(W), x)))
            return ad.grad(F, [x], create_graph=True)[x]

        x = ad.leaf(xv)
        F = ad.tsum(ad.tanh(ad.matmul(ad.constant(W), x)))
        gx = ad.grad(F, [x], create_graph=True)[x]
        loss = ad.tsum(ad.mul(gx, gx))
        got = ad.grad(loss, [x])[x].data

        h = 1e-6
        fd = np.zeros(4)
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            lp = float(np.sum(inner_grad(xv + e).data ** 2))
            lm = float(np.sum(inner_grad(xv - e).data ** 2))
            fd[j] = (lp - lm) / (2 * h)
        assert np.allclose(got, fd, rtol=1e-5, atol=1e-8)

    def test_backward_touches_each_node_once(self):
        x = ad.leaf([1.0, 2.0])
        a = ad.mul(x, x)
        b = ad.sin(a)
        c = ad.exp(a)          # diamond: a feeds two children
        out = ad.tsum(ad.add(b, c))
        ad.grad(out, [x])
        for node in (x, a, b, c, out):
            assert node._visits == 1

    def test_repeated_parent_accumulates(self):
        x = ad.leaf(3.0)
        y = ad.mul(x, x)
        assert ad.grad(y, [x])[x].item() == pytest.approx(6.0)

    def test_second_order_unsupported_for_fused_ops(self):
        t = ad.leaf(np.ones((4, 2)))
        y = ad.tsum(ad.gather(t, np.array([0, 1])))
        with pytest.raises(ad.AutodiffError, match="first-order"):
            ad.grad(y, [t], create_graph=True)


class TestPrimitiveGradients:
    """Every primitive matches central finite differences at random points."""

    N_POINTS = 20

    def _rand(self, rng, shape, positive=False, away_from_zero=False):
        v = rng.normal(size=shape)
        if positive:
            v = np.abs(v) + 0.5
        if away_from_zero:
            v = np.where(np.abs(v) < 0.2, v + 0.4 * np.sign(v + 1e-12), v)
        return v

    @pytest.mark.parametrize("name", [
        "add", "sub", "mul", "div", "pow", "relu", "tanh", "sigmoid", "exp",
        "log", "sqrt", "sin", "cos", "abs", "atan2", "clip", "sum", "sum_axis",
        "mean", "cumsum", "flip", "reshape_transpose", "slice", "concat",
        "matmul", "matmul_batched", "matmul_vec", "gather", "scatter",
        "bilerp", "conv2d", "conv2d_sep",
    ])
    def test_fd(self, name):
        rng = np.random.default_rng(hash(name) % 2 ** 31)
        for _ in range(self.N_POINTS):
            if name == "add":
                check_grad(lambda a, b: ad.tsum(ad.sin(ad.add(a, b))),
                           [self._rand(rng, (3, 4)), self._rand(rng, (4,))])
            elif name == "sub":
                check_grad(lambda a, b: ad.tsum(ad.sin(ad.sub(a, b))),
                           [self._rand(rng, (5,)), self._rand(rng, (5,))])
            elif name == "mul":
                check_grad(lambda a, b: ad.tsum(ad.mul(a, b)),
                           [self._rand(rng, (2, 3)), self._rand(rng, (3,))])
            elif name == "div":
                check_grad(lambda a, b: ad.tsum(ad.div(a, b)),
                           [self._rand(rng, (4,)), self._rand(rng, (4,), positive=True)])
            elif name == "pow":
                check_grad(lambda a: ad.tsum(ad.pow_(a, 3.0)), [self._rand(rng, (4,))])
            elif name == "relu":
                check_grad(lambda a: ad.tsum(ad.relu(a)),
                           [self._rand(rng, (6,), away_from_zero=True)])
            elif name == "tanh":
                check_grad(lambda a: ad.tsum(ad.tanh(a)), [self._rand(rng, (5,))])
            elif name == "sigmoid":
                check_grad(lambda a: ad.tsum(ad.sigmoid(a)), [self._rand(rng, (5,))])
            elif name == "exp":
                check_grad(lambda a: ad.tsum(ad.exp(a)), [self._rand(rng, (5,))])
            elif name == "log":
                check_grad(lambda a: ad.tsum(ad.log(a)), [self._rand(rng, (5,), positive=True)])
            elif name == "sqrt":
                check_grad(lambda a: ad.tsum(ad.sqrt(a)), [self._rand(rng, (5,), positive=True)])
            elif name == "sin":
                check_grad(lambda a: ad.tsum(ad.sin(a)), [self._rand(rng, (5,))])
            elif name == "cos":
                check_grad(lambda a: ad.tsum(ad.cos(a)), [self._rand(rng, (5,))])
            elif name == "abs":
                check_grad(lambda a: ad.tsum(ad.absolute(a)),
                           [self._rand(rng, (5,), away_from_zero=True)])
            elif name == "atan2":
                check_grad(lambda y, x: ad.tsum(ad.atan2(y, x)),
                           [self._rand(rng, (4,), away_from_zero=True),
                            self._rand(rng, (4,), positive=True)])
            elif name == "clip":
                v = np.clip(self._rand(rng, (5,)), -0.8, 0.8)
                check_grad(lambda a: ad.tsum(ad.mul(ad.clip(a, -1.0, 1.0), a)), [v])
            elif name == "sum":
                check_grad(lambda a: ad.mul(2.0, ad.tsum(a)), [self._rand(rng, (3, 2))])
            elif name == "sum_axis":
                check_grad(lambda a: ad.tsum(ad.sin(ad.tsum(a, axis=1))),
                           [self._rand(rng, (3, 4))])
            elif name == "mean":
                check_grad(lambda a: ad.mean(a), [self._rand(rng, (3, 4))])
            elif name == "cumsum":
                check_grad(lambda a: ad.tsum(ad.sin(ad.cumsum(a, axis=0))),
                           [self._rand(rng, (5,))])
            elif name == "flip":
                check_grad(lambda a: ad.tsum(ad.mul(ad.flip(a, 0), a)),
                           [self._rand(rng, (4,))])
            elif name == "reshape_transpose":
                check_grad(lambda a: ad.tsum(ad.sin(ad.transpose(ad.reshape(a, (2, 6))))),
                           [self._rand(rng, (3, 4))])
            elif name == "slice":
                check_grad(lambda a: ad.tsum(a[1:3, :2]), [self._rand(rng, (4, 3))])
            elif name == "concat":
                check_grad(lambda a, b: ad.tsum(ad.sin(ad.concat([a, b], axis=1))),
                           [self._rand(rng, (2, 2)), self._rand(rng, (2, 3))])
            elif name == "matmul":
                check_grad(lambda a, b: ad.tsum(ad.matmul(a, b)),
                           [self._rand(rng, (3, 4)), self._rand(rng, (4, 2))])
            elif name == "matmul_batched":
                check_grad(lambda a, b: ad.tsum(ad.matmul(a, b)),
                           [self._rand(rng, (2, 3, 4)), self._rand(rng, (2, 4, 2))])
            elif name == "matmul_vec":
                check_grad(lambda a, b: ad.tsum(ad.sin(ad.matmul(a, b))),
                           [self._rand(rng, (3, 4)), self._rand(rng, (4,))])
            elif name == "gather":
                idx = rng.integers(0, 4, size=6)
                check_grad(lambda a: ad.tsum(ad.sin(ad.gather(a, idx))),
                           [self._rand(rng, (4, 2))])
            elif name == "scatter":
                idx = rng.integers(0, 5, size=6)
                check_grad(lambda v: ad.tsum(ad.sin(ad.scatter_rows(idx, v, 5))),
                           [self._rand(rng, (6, 2))])
            elif name == "bilerp":
                gx = rng.uniform(0.1, 2.9, size=4)
                gy = rng.uniform(0.1, 3.9, size=4)
                # keep FD steps inside one cell
                gx = np.where(np.abs(gx - np.round(gx)) < 0.05, gx + 0.1, gx)
                gy = np.where(np.abs(gy - np.round(gy)) < 0.05, gy + 0.1, gy)
                check_grad(lambda g, x, y: ad.tsum(ad.bilerp(g, x, y)),
                           [self._rand(rng, (4, 5, 2)), gx, gy])
            elif name == "conv2d":
                k = rng.normal(size=(3, 3))
                check_grad(lambda im: ad.tsum(ad.sin(ad.conv2d_valid(im, k))),
                           [self._rand(rng, (6, 5, 2))])
            elif name == "conv2d_sep":
                k = rng.normal(size=3)
                check_grad(lambda im: ad.tsum(ad.sin(ad.conv2d_sep(im, k))),
                           [self._rand(rng, (6, 5, 2))])


def test_separable_conv_matches_full():
    rng = np.random.default_rng(42)
    img = rng.normal(size=(9, 8, 3))
    k = rng.uniform(0.1, 1.0, size=5)
    full = ad.conv2d_valid(ad.constant(img), np.outer(k, k))
    sep = ad.conv2d_sep(ad.constant(img), k)
    assert np.allclose(full.data, sep.data, atol=1e-12)


class TestAdam:
    def test_zero_grad_is_noop(self):
        p = ad.leaf([1.0, -2.0])
        st = ad.AdamState.for_param(p)
        p2 = ad.adam_step(p, ad.constant([0.0, 0.0]), st, 0.1)
        assert np.array_equal(p2.data, p.data)
        assert st.step == 1

    def test_first_step_moves_by_lr(self):
        g = np.array([0.3, -2.0, 1e-3])
        p = ad.leaf(np.zeros(3))
        st = ad.AdamState.for_param(p)
        p2 = ad.adam_step(p, ad.constant(g), st, 0.05)
        expected = -0.05 * g / (np.abs(g) + st.eps)
        assert np.allclose(p2.data, expected, rtol=1e-6)

    def test_converges_on_quadratic(self):
        p = ad.leaf([1.0, 1.0])
        st = ad.AdamState.for_param(p)
        for _ in range(1000):
            g = ad.grad(ad.tsum(ad.mul(p, p)), [p])[p]
            p = ad.adam_step(p, g, st, 0.01)
        assert np.linalg.norm(p.data) < 1e-3

    def test_shape_mismatch(self):
        p = ad.leaf(np.zeros(3))
        st = ad.AdamState.for_param(p)
        with pytest.raises(ad.ShapeError):
            ad.adam_step(p, ad.constant(np.zeros(4)), st, 0.1)

    def test_step_count_increases(self):
        p = ad.leaf(np.zeros(2))
        st = ad.AdamState.for_param(p)
        for i in range(3):
            p = ad.adam_step(p, ad.constant(np.ones(2)), st, 0.1)
            assert st.step == i + 1
