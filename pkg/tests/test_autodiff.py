import numpy as np
import pytest

from hijacklab import autodiff as ad


def fd_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return g


def check(fn, x0):
    t = ad.tensor(x0)
    out = fn(t)
    out.backward()
    num = fd_grad(lambda x: float(fn(ad.tensor(x)).data), x0)
    np.testing.assert_allclose(t.grad, num, rtol=1e-5, atol=1e-7)


class TestElementwise:
    def test_arith_chain(self):
        x0 = np.random.default_rng(0).uniform(0.5, 2.0, (4, 3))
        check(lambda t: ((t * 2.0 + 1.0) / (t + 3.0) - t**2.0).sum(), x0)

    def test_exp_log_sqrt_tanh(self):
        x0 = np.random.default_rng(1).uniform(0.5, 2.0, (5,))
        check(lambda t: (t.exp() + t.log() + t.sqrt() + t.tanh()).sum(), x0)

    def test_sigmoid(self):
        x0 = np.random.default_rng(2).normal(size=(6,)) * 3
        check(lambda t: ad.sigmoid(t).sum(), x0)

    def test_min_max_clip(self):
        x0 = np.random.default_rng(3).uniform(-2, 2, (8,))
        check(lambda t: (t.maximum(0.3) * t.minimum(1.2) + t.clip(-0.5, 0.5)).sum(), x0)

    def test_leaky_relu(self):
        x0 = np.array([-2.0, -0.5, 0.3, 1.7])
        check(lambda t: ad.leaky_relu(t, 0.1).sum(), x0)

    def test_mean_axis(self):
        x0 = np.random.default_rng(4).uniform(1, 2, (3, 4))
        check(lambda t: (t.mean(axis=1) ** 2.0).sum(), x0)

    def test_getitem_scatter(self):
        x0 = np.random.default_rng(5).uniform(1, 2, (6, 3))
        idx = np.array([0, 2, 2, 5])
        check(lambda t: (t[idx, 1] ** 2.0).sum(), x0)

    def test_matmul_both_sides(self):
        rng = np.random.default_rng(6)
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        ta, tb = ad.tensor(a0), ad.tensor(b0)
        ((ta @ tb) ** 2.0).sum().backward()
        na = fd_grad(lambda x: float((((ad.tensor(x) @ b0) ** 2.0).sum()).data), a0)
        nb = fd_grad(lambda x: float((((ad.tensor(a0) @ ad.tensor(x)) ** 2.0).sum()).data), b0)
        np.testing.assert_allclose(ta.grad, na, rtol=1e-5)
        np.testing.assert_allclose(tb.grad, nb, rtol=1e-5)

    def test_broadcast_unbroadcast(self):
        x0 = np.random.default_rng(7).normal(size=(3,))
        check(lambda t: (t + np.ones((4, 3)) * 2.0).sum(), x0)
        ta = ad.tensor(np.ones((4, 1)))
        tb = ad.tensor(np.ones((1, 5)))
        (ta * tb).sum().backward()
        assert ta.grad.shape == (4, 1) and tb.grad.shape == (1, 5)
        np.testing.assert_allclose(ta.grad, np.full((4, 1), 5.0))

    def test_bce_with_logits(self):
        x0 = np.array([-30.0, -2.0, 0.0, 2.0, 30.0])
        y = np.array([0.0, 1.0, 0.5, 0.0, 1.0])
        t = ad.tensor(x0)
        out = ad.bce_with_logits(t, y).sum()
        assert np.isfinite(out.data)
        out.backward()
        s = 1 / (1 + np.exp(-x0))
        np.testing.assert_allclose(t.grad, s - y, rtol=1e-9, atol=1e-12)

    def test_diamond_graph_accumulates(self):
        t = ad.tensor(np.array(2.0))
        y = t * t + t * 3.0
        y.backward()
        assert t.grad == pytest.approx(2 * 2.0 + 3.0)


class TestConv2d:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (4, 4)])
    def test_matches_direct_convolution(self, stride, pad):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(12, 12, 2))
        w = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=(4,))
        out = ad.conv2d(ad.tensor(x), w, b, stride, pad).data
        xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
        ho = (xp.shape[0] - 3) // stride + 1
        wo = (xp.shape[1] - 3) // stride + 1
        want = np.zeros((ho, wo, 4))
        for i in range(ho):
            for j in range(wo):
                win = xp[i * stride : i * stride + 3, j * stride : j * stride + 3, :]
                want[i, j] = np.tensordot(win, w, axes=3) + b
        np.testing.assert_allclose(out, want, rtol=1e-10)

    def test_input_gradient(self):
        rng = np.random.default_rng(9)
        x0 = rng.normal(size=(8, 8, 2))
        w = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=(3,))
        check(lambda t: (ad.conv2d(t, w, b, 2, 1) ** 2.0).sum(), x0)

    def test_weight_and_bias_gradient(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(6, 6, 2))
        w0 = rng.normal(size=(3, 3, 2, 3))
        b0 = rng.normal(size=(3,))
        tw, tb = ad.tensor(w0), ad.tensor(b0)
        (ad.conv2d(ad.tensor(x), tw, tb, 1, 1) ** 2.0).sum().backward()
        nw = fd_grad(lambda v: float(((ad.conv2d(ad.tensor(x), ad.tensor(v), b0, 1, 1) ** 2.0).sum()).data), w0)
        nb = fd_grad(lambda v: float(((ad.conv2d(ad.tensor(x), w0, ad.tensor(v), 1, 1) ** 2.0).sum()).data), b0)
        np.testing.assert_allclose(tw.grad, nw, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(tb.grad, nb, rtol=1e-5, atol=1e-7)

    def test_constant_weights_build_no_graph(self):
        x = ad.tensor(np.ones((4, 4, 1)))
        out = ad.conv2d(x, np.ones((3, 3, 1, 1)), np.zeros(1), 1, 0)
        assert len(out._vjps) == 1
