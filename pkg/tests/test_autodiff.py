"""Tape gradients against central differences, and the fused LSTM against a per-gate loop."""

import math

import numpy as np
import pytest

from crowdgan import autodiff as ad
from crowdgan.autodiff import Tape, Tensor
from crowdgan.errors import ContractViolation
from crowdgan.nn import grad_check


def check(loss_fn, *params, tol=1e-6):
    named = {f"p{i}": p for i, p in enumerate(params)}
    report = grad_check(loss_fn, named, tolerance=tol)
    assert report.passed, report


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


@pytest.mark.parametrize(
    "op",
    [ad.tanh, ad.sigmoid, ad.softplus, ad.square, lambda a: ad.softmax(a, axis=-1), lambda a: ad.cumsum(a, axis=1)],
    ids=["tanh", "sigmoid", "softplus", "square", "softmax", "cumsum"],
)
def test_unary_ops(rng, op):
    a = param(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    check(lambda: ad.sum_(op(a) * w), a)


def test_absolute_away_from_kink(rng):
    a = Tensor(rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1, 1], (3, 4)), requires_grad=True)
    check(lambda: ad.sum_(ad.absolute(a)), a)


def test_broadcasting_add_mul(rng):
    a, b, c = param(rng, 2, 3, 4), param(rng, 4), param(rng, 3, 1)
    check(lambda: ad.sum_(ad.tanh((a + b) * c)), a, b, c)


def test_shape_ops(rng):
    a, b = param(rng, 2, 3), param(rng, 2, 2)

    def loss():
        x = ad.concat([a, b], axis=1)
        y = ad.broadcast_to(ad.reshape(x, (2, 1, 5)), (2, 4, 5))
        return ad.sum_(ad.tanh(y[:, 1:3, ::2]) * 1.5) + ad.mean(ad.square(x), axis=0)[1]

    check(loss, a, b)


def test_matmul_and_bmm(rng):
    a, w, b = param(rng, 2, 3, 4), param(rng, 4, 5), param(rng, 2, 5, 3)
    check(lambda: ad.sum_(ad.tanh(ad.bmm(ad.matmul(a, w), b))), a, w, b)


def test_matmul_rejects_batched_right_operand(rng):
    with pytest.raises(ContractViolation):
        ad.matmul(param(rng, 2, 3), param(rng, 2, 3, 4))


def test_sum_with_axis_and_keepdims(rng):
    a = param(rng, 3, 4, 2)
    check(lambda: ad.sum_(ad.square(ad.sum_(a, axis=1, keepdims=True) * ad.sum_(a, axis=2)[:, None, :1])), a)


def test_sigmoid_stable_at_extremes():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    y = ad.sigmoid_np(x)
    assert np.all(np.isfinite(y))
    assert y[2] == 0.5 and y[0] == 0.0 and y[-1] == 1.0
    sp = ad.softplus(Tensor(x)).value
    np.testing.assert_allclose(sp[[0, 2, 4]], [0.0, math.log(2.0), 800.0])


def test_gradient_needs_scalar_finite_loss(rng):
    a = param(rng, 3)
    with Tape() as tape:
        y = ad.tanh(a)
    with pytest.raises(ContractViolation):
        tape.gradient(y, [a])
    with Tape() as tape:
        y = ad.sum_(ad.square(a) * np.inf)
    with pytest.raises(ContractViolation):
        tape.gradient(y, [a])


def test_unused_parameter_gets_zero_gradient(rng):
    a, b = param(rng, 3), param(rng, 2)
    with Tape() as tape:
        loss = ad.sum_(ad.square(a))
    ga, gb = tape.gradient(loss, [a, b])
    np.testing.assert_allclose(ga, 2 * a.value)
    np.testing.assert_array_equal(gb, np.zeros(2))


# ---------------------------------------------------------------- LSTM


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def reference_lstm(x, wx, wh, b):
    """Scalar, gate-by-gate loop written from the textbook cell equations."""
    n, steps, d = x.shape
    hidden = wh.shape[0]
    out = np.zeros((n, steps, hidden))
    for s in range(n):
        h = [0.0] * hidden
        c = [0.0] * hidden
        for t in range(steps):
            new_h, new_c = [], []
            for u in range(hidden):
                pre = []
                for gate in range(4):
                    col = gate * hidden + u
                    z = b[col]
                    z += sum(x[s, t, k] * wx[k, col] for k in range(d))
                    z += sum(h[k] * wh[k, col] for k in range(hidden))
                    pre.append(z)
                i, f, o = _sig(pre[0]), _sig(pre[1]), _sig(pre[2])
                g = math.tanh(pre[3])
                cu = f * c[u] + i * g
                new_c.append(cu)
                new_h.append(o * math.tanh(cu))
            h, c = new_h, new_c
            out[s, t] = h
    return out


def test_lstm_matches_gate_by_gate_reference(rng):
    x = rng.normal(size=(2, 4, 3))
    wx, wh, b = rng.normal(size=(3, 12)), rng.normal(size=(3, 12)), rng.normal(size=12)
    got = ad.lstm_sequence(Tensor(x), Tensor(wx), Tensor(wh), Tensor(b)).value
    np.testing.assert_allclose(got, reference_lstm(x, wx, wh, b), rtol=1e-12, atol=1e-12)


def test_lstm_step_matches_sequence(rng):
    x = rng.normal(size=(3, 5, 2))
    wx, wh, b = rng.normal(size=(2, 16)), rng.normal(size=(4, 16)), rng.normal(size=16)
    seq = ad.lstm_sequence(Tensor(x), Tensor(wx), Tensor(wh), Tensor(b)).value
    h = c = np.zeros((3, 4))
    for t in range(5):
        h, c, _ = ad.lstm_step_np(x[:, t], h, c, wx, wh, b)
        np.testing.assert_allclose(h, seq[:, t], rtol=1e-13, atol=1e-13)


def test_lstm_bptt_gradients(rng):
    x = param(rng, 2, 6, 3)
    wx, wh, b = param(rng, 3, 16, scale=0.5), param(rng, 4, 16, scale=0.5), param(rng, 16, scale=0.5)
    w = rng.normal(size=(2, 6, 4))
    check(lambda: ad.sum_(ad.lstm_sequence(x, wx, wh, b) * w), x, wx, wh, b, tol=1e-6)


def test_lstm_shape_contract(rng):
    with pytest.raises(ContractViolation):
        ad.lstm_sequence(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)))
