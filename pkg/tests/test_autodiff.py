"""Gradient checks for the reverse-mode tape against central finite differences."""

import numpy as np
import pytest

from neisf import autodiff as ad


def numeric_grad(f, xs, h=1e-6):
    """Central-difference gradients of scalar f w.r.t. each array in xs."""
    grads = []
    for i in range(len(xs)):
        g = np.zeros_like(xs[i])
        it = np.nditer(xs[i], flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = xs[i][idx]
            xs[i][idx] = orig + h
            fp = f(xs)
            xs[i][idx] = orig - h
            fm = f(xs)
            xs[i][idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
            it.iternext()
        grads.append(g)
    return grads


def check_grads(build, shapes, seed, rtol=1e-5, atol=1e-7, positive=False):
    """build(tape, vars) -> scalar Var; compares tape grads to finite differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal(s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]

    def f(arrs):
        tape = ad.Tape()
        vs = [tape.var(a.copy()) for a in arrs]
        return float(np.asarray(build(tape, vs).data))

    tape = ad.Tape()
    vs = [tape.var(x.copy()) for x in xs]
    out = build(tape, vs)
    tape.backward(out)
    want = numeric_grad(f, xs)
    for v, w in zip(vs, want):
        np.testing.assert_allclose(v.grad, w, rtol=rtol, atol=atol)


def test_arithmetic_chain():
    check_grads(lambda t, v: ad.sum_((v[0] * v[1] + v[0] / v[1] - 2.0 * v[0]) ** 2),
                [(4, 3), (4, 3)], seed=0, positive=True)


def test_broadcasting_gradients():
    # (4,3) + (3,) + scalar-like (1,): unbroadcast must sum over expanded axes
    check_grads(lambda t, v: ad.sum_((v[0] + v[1] - v[2]) * v[0]),
                [(4, 3), (3,), (1,)], seed=1)


def test_matmul():
    check_grads(lambda t, v: ad.sum_(ad.matmul(v[0], v[1]) ** 2), [(5, 4), (4, 3)], seed=2)


def test_matmul_batched():
    check_grads(lambda t, v: ad.sum_(ad.matmul(v[0], v[1])), [(2, 5, 4), (4, 3)], seed=3)


def test_unary_smooth():
    def build(t, v):
        x = v[0]
        y = ad.exp(x) + ad.log(x + 3.0) + ad.sqrt(x + 3.0) + ad.sin(x) + ad.cos(x) + ad.tanh(x)
        return ad.sum_(y * y)
    check_grads(build, [(6,)], seed=4)


def test_sigmoid_softplus():
    def build(t, v):
        return ad.sum_(ad.sigmoid(v[0]) + ad.softplus(v[0]) + ad.softplus(v[0], beta=50.0))
    check_grads(build, [(8,)], seed=5)


def test_relu_abs_away_from_kink():
    rng = np.random.default_rng(6)
    x = rng.standard_normal(32)
    x[np.abs(x) < 0.1] += 0.3   # keep finite differences off the kink
    tape = ad.Tape()
    v = tape.var(x.copy())
    out = ad.sum_(ad.relu(v) + ad.absval(v))
    tape.backward(out)
    want = numeric_grad(lambda a: float(np.sum(np.maximum(a[0], 0) + np.abs(a[0]))), [x])
    np.testing.assert_allclose(v.grad, want[0], rtol=1e-5, atol=1e-8)


def test_min_max_clip_where():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal(16), rng.standard_normal(16)
    a[np.abs(a - b) < 0.05] += 0.2   # keep max/min selections stable under h
    a[np.abs(a - 0.3) < 0.05] += 0.2
    b[np.abs(np.abs(b) - 0.5) < 0.05] *= 0.8
    tape = ad.Tape()
    va, vb = tape.var(a.copy()), tape.var(b.copy())
    y = ad.maximum(va, vb) + ad.minimum(va, 0.3) + ad.clip(vb, -0.5, 0.5)
    y = ad.where(a > 0.0, y, 2.0 * y)
    out = ad.sum_(y)
    tape.backward(out)

    def f(arrs):
        aa, bb = arrs
        yy = np.maximum(aa, bb) + np.minimum(aa, 0.3) + np.clip(bb, -0.5, 0.5)
        return float(np.sum(np.where(a > 0.0, yy, 2.0 * yy)))
    want = numeric_grad(f, [a, b])
    np.testing.assert_allclose(va.grad, want[0], rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(vb.grad, want[1], rtol=1e-5, atol=1e-8)


def test_reductions_and_shape_ops():
    def build(t, v):
        x = v[0]
        y = ad.mean(x, axis=0) + ad.sum_(x, axis=0) * 0.1
        z = ad.reshape(ad.cumsum(y, axis=-1), (6,))
        return ad.sum_(z * z) + ad.mean(x)
    check_grads(build, [(5, 6)], seed=8)


def test_getitem_concat_stack():
    def build(t, v):
        a, b = v
        top = a[:2]
        rest = a[2:]
        cat = ad.concat([top * 2.0, rest], axis=0)
        stk = ad.stack([cat, b], axis=0)
        return ad.sum_(stk ** 2)
    check_grads(build, [(4, 3), (4, 3)], seed=9)


def test_getitem_fancy_accumulates():
    # repeated indices must add gradient contributions
    idx = np.array([0, 2, 2, 1, 0])
    def build(t, v):
        return ad.sum_(v[0][idx] * np.arange(1.0, 6.0))
    check_grads(build, [(3,)], seed=10)


def test_pow_and_negation():
    check_grads(lambda t, v: ad.sum_((-v[0]) ** 3 + v[0] ** 0.5), [(5,)], seed=11, positive=True)


def test_grad_accumulates_over_reuse():
    tape = ad.Tape()
    x = tape.var(np.array([2.0]))
    y = x * 3.0 + x * 5.0
    tape.backward(ad.sum_(y))
    np.testing.assert_allclose(x.grad, [8.0])


def test_unused_variable_has_zero_grad():
    tape = ad.Tape()
    x = tape.var(np.array([1.0, 2.0]))
    unused = tape.var(np.array([3.0]))
    tape.backward(ad.sum_(x * x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    assert unused.grad is None or not np.any(unused.grad)


def test_detach_blocks_gradient():
    tape = ad.Tape()
    x = tape.var(np.array([1.5]))
    y = x * x
    z = y.detach() * x
    tape.backward(ad.sum_(z))
    np.testing.assert_allclose(x.grad, [2.25])   # d/dx of const(x^2)*x


def test_zero_grad_resets():
    tape = ad.Tape()
    x = tape.var(np.array([3.0]))
    tape.backward(ad.sum_(x * x))
    g1 = x.grad.copy()
    tape.zero_grad()
    tape.backward(ad.sum_(x * x))
    np.testing.assert_allclose(x.grad, g1)


def test_softplus_extreme_inputs_finite():
    tape = ad.Tape()
    x = tape.var(np.array([-500.0, 0.0, 500.0]))
    y = ad.softplus(x)
    tape.backward(ad.sum_(y))
    assert np.all(np.isfinite(y.data))
    assert np.all(np.isfinite(x.grad))
    np.testing.assert_allclose(y.data[2], 500.0, rtol=1e-12)


def test_random_program_fuzz():
    # random small compositions, 20 trials
    for seed in range(20):
        def build(t, v):
            a, b = v
            x = ad.sigmoid(a) * ad.softplus(b) + ad.exp(-1.0 * ad.absval(a * 0.3) - 0.2)
            y = ad.matmul(ad.reshape(x, (2, 6)), np.full((6, 1), 0.5))
            return ad.sum_(y) + ad.mean(ad.tanh(b))
        check_grads(build, [(12,), (12,)], seed=100 + seed)
