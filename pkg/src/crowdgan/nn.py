"""Layers, optimizer, gradient checking and checkpoint I/O on top of ``autodiff``."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractViolation, TrainingDivergence


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


class Module:
    """Anything with named parameters; submodules are discovered through attributes."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                for sub, t in val.parameters().items():
                    out[f"{key}.{sub}"] = t
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(params) != set(state):
            missing = set(params) ^ set(state)
            raise ContractViolation(f"state dict keys mismatch: {sorted(missing)}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ContractViolation(f"shape mismatch for {k}: {state[k].shape} vs {t.shape}")
            t.value = np.array(state[k], dtype=ad.DTYPE)

    def zero_(self) -> "Module":
        for t in self.parameters().values():
            t.value = np.zeros_like(t.value)
        return self

    def n_parameters(self) -> int:
        return sum(t.value.size for t in self.parameters().values())


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, zero: bool = False):
        if zero or rng is None:
            w, b = np.zeros((n_in, n_out)), np.zeros(n_out)
        else:
            w, b = _uniform(rng, (n_in, n_out), n_in), _uniform(rng, (n_out,), n_in)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class LSTM(Module):
    """Gated recurrent layer. Packed gate order: input, forget, output, candidate."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator | None = None, forget_bias: float = 1.0):
        self.hidden = hidden
        if rng is None:
            wx, wh, b = np.zeros((n_in, 4 * hidden)), np.zeros((hidden, 4 * hidden)), np.zeros(4 * hidden)
        else:
            wx = _uniform(rng, (n_in, 4 * hidden), n_in)
            wh = _uniform(rng, (hidden, 4 * hidden), hidden)
            b = _uniform(rng, (4 * hidden,), hidden)
            b[hidden : 2 * hidden] = forget_bias
        self.wx = Tensor(wx, requires_grad=True)
        self.wh = Tensor(wh, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.lstm_sequence(ad.as_tensor(x), self.wx, self.wh, self.b)


def recurrent_step(params: LSTM, x, state):
    """Single cell update ``(h, c) -> (h', c')`` outside any tape."""
    h, c = (np.asarray(s, dtype=float) for s in state)
    x = np.asarray(x, dtype=float)
    hidden = params.hidden
    if x.shape[-1] != params.wx.shape[0] or h.shape[-1] != hidden or c.shape != h.shape:
        raise ContractViolation("recurrent_step: input/state shapes inconsistent with cell")
    h_new, c_new, _ = ad.lstm_step_np(x, h, c, params.wx.value, params.wh.value, params.b.value)
    return h_new, c_new


# ---------------------------------------------------------------- optimisation


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ContractViolation(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value = p.value - state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
    return state


class Adam:
    def __init__(self, params: dict[str, Tensor], learning_rate: float = 1e-3, clip_norm: float = 5.0, beta1: float = 0.9):
        self.params = params
        self.clip_norm = clip_norm
        self.state = AdamState(learning_rate=learning_rate, beta1=beta1)

    def step(self, grads: Sequence[np.ndarray]) -> float:
        names = list(self.params)
        grads, norm = clip_global_norm(list(grads), self.clip_norm)
        adam_step(self.state, self.params, dict(zip(names, grads)))
        return norm

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for k in self.state.m:
            out[f"{prefix}/m/{k}"] = self.state.m[k]
            out[f"{prefix}/v/{k}"] = self.state.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str, step: int) -> None:
        self.state.step = step
        for k in self.params:
            if f"{prefix}/m/{k}" in arrays:
                self.state.m[k] = np.array(arrays[f"{prefix}/m/{k}"])
                self.state.v[k] = np.array(arrays[f"{prefix}/v/{k}"])


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    gradient_fn: Callable[[], list[np.ndarray]] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients against central differences.

    The per-entry error is ``|a - n| / max(|a| + |n|, floor)``; entries where both
    gradients are tiny are therefore judged on absolute error. ``max_entries``
    samples that many coordinates per parameter tensor.
    """
    names = list(params)
    if gradient_fn is None:
        with Tape() as tape:
            loss = loss_fn()
        analytic = tape.gradient(loss, [params[n] for n in names])
    else:
        analytic = gradient_fn()
    rng = rng or np.random.default_rng(0)
    worst, worst_name, count = 0.0, "", 0
    for name, grad in zip(names, analytic):
        p = params[name]
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().value)
            flat[i] = orig - h
            down = float(loss_fn().value)
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = float(grad.reshape(-1)[i])
            err = abs(a - num) / max(abs(a) + abs(num), floor)
            count += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    return GradCheckReport(worst, tolerance, count, worst_name)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CROWDGAN-CKPT\n"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write a self-describing container.

    Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header
    (version, meta, array table with dtype/shape/offset), then the raw
    little-endian array bytes in table order.
    """
    table, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        data = arr.tobytes()
        table.append({"name": name, "dtype": "<f8", "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "meta": meta, "arrays": table}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for data in blobs:
            fh.write(data)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ContractViolation(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ContractViolation(f"{path}: unsupported checkpoint version {header.get('version')}")
        body = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        chunk = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    return arrays, header["meta"]
