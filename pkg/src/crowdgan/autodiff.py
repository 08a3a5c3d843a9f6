"""Reverse-mode differentiation over a recorded tape of numpy operations.

Only the primitives this pipeline needs are provided. Recurrent layers are a
single fused op (``lstm_sequence``) that runs backpropagation through time
internally, which keeps the tape short.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

DTYPE = np.float64

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Records differentiable operations executed inside its ``with`` block."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, object]] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def gradient(self, loss: Tensor, params) -> list[np.ndarray]:
        if loss.value.size != 1:
            raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
        if not np.isfinite(loss.value).all():
            raise ContractViolation("loss is not finite")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for out, parents, backward in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [grads.get(id(p), np.zeros_like(p.value)) for p in params]


def backprop(tape: Tape, loss: Tensor, params) -> list[np.ndarray]:
    return tape.gradient(loss, params)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].nodes.append((out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def neg(a) -> Tensor:
    return _record(-a.value, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = sigmoid_np(a.value)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = a.value
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _record(y, (a,), lambda g: (g * sigmoid_np(x),))


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.value)
    return _record(np.abs(a.value), (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    x = a.value
    return _record(x * x, (a,), lambda g: (2.0 * g * x,))


# ---------------------------------------------------------------- reductions / shape


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.value.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.value[idx], (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.value for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def cumsum(a: Tensor, axis: int) -> Tensor:
    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _record(np.cumsum(a.value, axis=axis), (a,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` two-dimensional; ``a`` may carry leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ContractViolation("matmul expects a 2-D right operand; use bmm for batches")
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[0]:
        raise ContractViolation(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def backward(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1])
        return ga, gb

    return _record(av @ bv, (a, b), backward)


def bmm(a, b) -> Tensor:
    """Batched ``(B, n, k) @ (B, k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def backward(g):
        return g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g

    return _record(av @ bv, (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (a,), backward)


# ---------------------------------------------------------------- recurrent cell


def lstm_step_np(x, h, c, wx, wh, b):
    """One gated-cell update. Gate order in the packed weights: input, forget, output, candidate."""
    hidden = h.shape[-1]
    z = x @ wx + h @ wh + b
    i = sigmoid_np(z[..., :hidden])
    f = sigmoid_np(z[..., hidden : 2 * hidden])
    o = sigmoid_np(z[..., 2 * hidden : 3 * hidden])
    g = np.tanh(z[..., 3 * hidden :])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new, (i, f, o, g)


def lstm_sequence(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    """Run the cell over ``x`` of shape (N, T, D) from a zero state; returns hiddens (N, T, H)."""
    xv, wxv, whv, bv = x.value, wx.value, wh.value, b.value
    n, steps, _ = xv.shape
    hidden = whv.shape[0]
    if wxv.shape != (xv.shape[2], 4 * hidden) or whv.shape != (hidden, 4 * hidden) or bv.shape != (4 * hidden,):
        raise ContractViolation("lstm parameter shapes inconsistent with input/hidden size")
    xw = xv @ wxv + bv
    hs = np.zeros((n, steps + 1, hidden))
    cs = np.zeros((n, steps + 1, hidden))
    gates = np.zeros((n, steps, 4 * hidden))
    tcs = np.zeros((n, steps, hidden))
    for t in range(steps):
        z = xw[:, t] + hs[:, t] @ whv
        ifo = sigmoid_np(z[:, : 3 * hidden])
        g = np.tanh(z[:, 3 * hidden :])
        c_new = ifo[:, hidden : 2 * hidden] * cs[:, t] + ifo[:, :hidden] * g
        tc = np.tanh(c_new)
        hs[:, t + 1] = ifo[:, 2 * hidden :] * tc
        cs[:, t + 1] = c_new
        gates[:, t, : 3 * hidden] = ifo
        gates[:, t, 3 * hidden :] = g
        tcs[:, t] = tc

    def backward(gout):
        dz = np.zeros_like(gates)
        dh_next = np.zeros((n, hidden))
        dc_next = np.zeros((n, hidden))
        for t in range(steps - 1, -1, -1):
            i = gates[:, t, :hidden]
            f = gates[:, t, hidden : 2 * hidden]
            o = gates[:, t, 2 * hidden : 3 * hidden]
            g = gates[:, t, 3 * hidden :]
            tc = tcs[:, t]
            dh = gout[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz[:, t, :hidden] = dc * g * i * (1.0 - i)
            dz[:, t, hidden : 2 * hidden] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, t, 2 * hidden : 3 * hidden] = dh * tc * o * (1.0 - o)
            dz[:, t, 3 * hidden :] = dc * i * (1.0 - g * g)
            dh_next = dz[:, t] @ whv.T
            dc_next = dc * f
        flat = dz.reshape(-1, 4 * hidden)
        dx = dz @ wxv.T
        dwx = xv.reshape(-1, xv.shape[2]).T @ flat
        dwh = hs[:, :-1].reshape(-1, hidden).T @ flat
        return dx, dwx, dwh, flat.sum(axis=0)

    return _record(hs[:, 1:].copy(), (x, wx, wh, b), backward)
