"""Neighbourhood context: soft attention over the pedestrian's own encoded history
plus inverse-distance (hardwired) attention over encoded neighbours.

Every trajectory is expressed relative to the pedestrian of interest's last
observed position before encoding, and all trajectories share one encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Window
from .errors import ContractViolation
from .nn import LSTM, Dense, Module

DIRECTIONS = ("left", "front", "right")
DIST_EPS = 1e-3


@dataclass
class ModelConfig:
    t_obs: int = 15
    t_pred: int = 30
    hidden_size: int = 32
    z_dim: int = 8
    position_scale: float = 0.25
    n_slots: int = 10
    dist_eps: float = DIST_EPS
    disc_displacement_scale: float = 4.0
    disc_sees_observed: bool = True

    @property
    def t_future(self) -> int:
        return self.t_pred - self.t_obs


# ---------------------------------------------------------------- hardwired weights / buckets


def hardwired_weight(dist, eps: float = DIST_EPS):
    """Inverse distance, clamped at ``eps`` metres."""
    d = np.asarray(dist, dtype=float)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ContractViolation("distance must be finite and non-negative")
    w = 1.0 / np.maximum(d, eps)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class Slot:
    kind: str  # "real", "mean" or "dummy"
    ped_ids: tuple[str, ...]
    positions: np.ndarray | None  # (t_obs, 2) world coordinates
    weights: np.ndarray  # (t_obs,)


@dataclass(frozen=True)
class NeighbourBucket:
    direction: str
    slots: tuple[Slot, ...]

    @property
    def real_slots(self) -> tuple[Slot, ...]:
        return tuple(s for s in self.slots if s.kind != "dummy")


def heading_of(observed: np.ndarray) -> np.ndarray:
    step = observed[-1] - observed[-2]
    norm = np.hypot(*step)
    if norm < 1e-12:
        return np.array([0.0, 1.0])
    return step / norm


def bearing_deg(heading: np.ndarray, offset: np.ndarray) -> float:
    cross = heading[0] * offset[1] - heading[1] * offset[0]
    dot = heading[0] * offset[0] + heading[1] * offset[1]
    return float(np.degrees(np.arctan2(cross, dot)))


def classify_bearing(bearing: float) -> str | None:
    if -45.0 <= bearing <= 45.0:
        return "front"
    if 45.0 < bearing <= 135.0:
        return "left"
    if -135.0 <= bearing < -45.0:
        return "right"
    return None


def bucket_neighbours(window: Window, n_slots: int = 10, eps: float = DIST_EPS) -> dict[str, NeighbourBucket]:
    """Assign neighbours to left/front/right buckets of exactly ``n_slots`` slots.

    Bearings are measured at the last observed frame against the pedestrian's
    last displacement; neighbours behind (|bearing| > 135 deg) are dropped.
    Overfull buckets keep the closest ``n_slots - 1`` and average the rest.
    """
    obs = window.observed
    heading = heading_of(obs)
    members: dict[str, list[int]] = {d: [] for d in DIRECTIONS}
    for n, traj in enumerate(window.neighbour_observed):
        direction = classify_bearing(bearing_deg(heading, traj[-1] - obs[-1]))
        if direction is not None:
            members[direction].append(n)

    def make_slot(kind, ids, positions):
        dist = np.hypot(*(positions - obs).T)
        return Slot(kind, ids, positions, hardwired_weight(dist, eps))

    buckets = {}
    for direction in DIRECTIONS:
        idx = members[direction]
        mean_dist = [float(np.mean(np.hypot(*(window.neighbour_observed[n] - obs).T))) for n in idx]
        ranked = [idx[i] for i in np.argsort(mean_dist, kind="stable")]
        if len(ranked) > n_slots:
            keep, rest = ranked[: n_slots - 1], ranked[n_slots - 1 :]
        else:
            keep, rest = ranked, []
        slots = [make_slot("real", (window.neighbour_ids[n],), window.neighbour_observed[n]) for n in keep]
        if rest:
            avg = window.neighbour_observed[rest].mean(axis=0)
            slots.append(make_slot("mean", tuple(window.neighbour_ids[n] for n in rest), avg))
        while len(slots) < n_slots:
            slots.append(Slot("dummy", (), None, np.zeros(len(obs))))
        buckets[direction] = NeighbourBucket(direction, tuple(slots))
    return buckets


# ---------------------------------------------------------------- batched window arrays


@dataclass
class PreparedBatch:
    """Window data laid out for vectorised encoding.

    Non-dummy neighbour slots of every window are stacked in ``nb_in``;
    ``owner[m]`` is the index of the window that slot ``m`` belongs to.
    """

    ped_ids: list[str]
    self_in: np.ndarray  # (B, T, 2) scaled, relative to last observed position
    nb_in: np.ndarray  # (M, T, 2)
    nb_w: np.ndarray  # (M, T)
    owner: np.ndarray  # (M,)
    last_pos: np.ndarray  # (B, 2)
    future: np.ndarray | None  # (B, F, 2) absolute
    observed: np.ndarray  # (B, T, 2) absolute

    def __len__(self) -> int:
        return len(self.ped_ids)

    @property
    def assign(self) -> np.ndarray:
        a = np.zeros((len(self), len(self.owner)))
        a[self.owner, np.arange(len(self.owner))] = 1.0
        return a

    def subset(self, indices) -> "PreparedBatch":
        indices = np.asarray(indices, dtype=int)
        remap = -np.ones(len(self), dtype=int)
        remap[indices] = np.arange(len(indices))
        # keep slot order grouped by new window order
        order = np.concatenate([np.flatnonzero(self.owner == i) for i in indices]) if len(indices) else np.zeros(0, int)
        order = order.astype(int)
        return PreparedBatch(
            ped_ids=[self.ped_ids[i] for i in indices],
            self_in=self.self_in[indices],
            nb_in=self.nb_in[order],
            nb_w=self.nb_w[order],
            owner=remap[self.owner[order]],
            last_pos=self.last_pos[indices],
            future=None if self.future is None else self.future[indices],
            observed=self.observed[indices],
        )


def prepare_windows(windows: list[Window], cfg: ModelConfig) -> PreparedBatch:
    t = cfg.t_obs
    self_in, nb_in, nb_w, owner, last, fut, obs = [], [], [], [], [], [], []
    for b, w in enumerate(windows):
        if w.t_obs != t:
            raise ContractViolation(f"window for {w.ped_id} has {w.t_obs} observed steps, expected {t}")
        origin = w.observed[-1]
        self_in.append((w.observed - origin) * cfg.position_scale)
        for bucket in bucket_neighbours(w, cfg.n_slots, cfg.dist_eps).values():
            for slot in bucket.real_slots:
                nb_in.append((slot.positions - origin) * cfg.position_scale)
                nb_w.append(slot.weights)
                owner.append(b)
        last.append(origin)
        fut.append(w.future)
        obs.append(w.observed)
    has_future = all(len(f) == cfg.t_future for f in fut) and len(windows) > 0
    return PreparedBatch(
        ped_ids=[w.ped_id for w in windows],
        self_in=np.array(self_in).reshape(len(windows), t, 2),
        nb_in=np.array(nb_in).reshape(len(nb_in), t, 2),
        nb_w=np.array(nb_w).reshape(len(nb_w), t),
        owner=np.array(owner, dtype=int),
        last_pos=np.array(last).reshape(len(windows), 2),
        future=np.array(fut).reshape(len(windows), cfg.t_future, 2) if has_future else None,
        observed=np.array(obs).reshape(len(windows), t, 2),
    )


# ---------------------------------------------------------------- encoder network


class AttentionNet(Module):
    """Scores a (query, key) pair of hidden states: v . tanh(Wq q + Wk k + b)."""

    def __init__(self, hidden: int, size: int, rng: np.random.Generator | None):
        fan_in = 2 * hidden
        if rng is None:
            wq, wk, b, v = np.zeros((hidden, size)), np.zeros((hidden, size)), np.zeros(size), np.zeros((size, 1))
        else:
            k = 1.0 / np.sqrt(fan_in)
            wq = rng.uniform(-k, k, (hidden, size))
            wk = rng.uniform(-k, k, (hidden, size))
            b = rng.uniform(-k, k, size)
            v = rng.uniform(-1 / np.sqrt(size), 1 / np.sqrt(size), (size, 1))
        self.wq = Tensor(wq, requires_grad=True)
        self.wk = Tensor(wk, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)
        self.v = Tensor(v, requires_grad=True)

    def scores(self, queries, keys) -> Tensor:
        """All pairwise scores: queries (B, Tq, H), keys (B, Tk, H) -> (B, Tq, Tk)."""
        q = ad.matmul(queries, self.wq)
        k = ad.matmul(keys, self.wk) + self.b
        bq, tq, a = q.shape
        tk = k.shape[1]
        e = ad.tanh(ad.reshape(q, (bq, tq, 1, a)) + ad.reshape(k, (bq, 1, tk, a)))
        return ad.reshape(ad.matmul(e, self.v), (bq, tq, tk))


class NeighbourhoodEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.lstm = LSTM(2, cfg.hidden_size, rng)
        self.attention = AttentionNet(cfg.hidden_size, cfg.hidden_size, rng)

    @property
    def context_size(self) -> int:
        return 2 * self.cfg.hidden_size

    def encode(self, x) -> Tensor:
        return self.lstm(x)

    def context(self, batch: PreparedBatch) -> Tensor:
        """Merged context C*_t for t = 1..T_obs, shape (B, T_obs, 2H)."""
        hidden = self.cfg.hidden_size
        n, t = len(batch), self.cfg.t_obs
        hs = self.encode(batch.self_in)
        c_soft, _ = batched_soft_attention(hs, self.attention)
        if len(batch.owner):
            nh = self.encode(batch.nb_in)
            c_hard = batched_hardwired_context(nh, batch.nb_w, batch.assign)
        else:
            c_hard = Tensor(np.zeros((n, hidden)))
        c_hard_t = ad.broadcast_to(ad.reshape(c_hard, (n, 1, hidden)), (n, t, hidden))
        return merge_context(c_soft, c_hard_t)


def batched_soft_attention(hs: Tensor, net: AttentionNet) -> tuple[Tensor, Tensor]:
    """Context and weights for every t, querying with h_{t-1} (h_0 = 0)."""
    n, t, hidden = hs.shape
    hprev = ad.concat([Tensor(np.zeros((n, 1, hidden))), hs[:, :-1, :]], axis=1)
    alpha = ad.softmax(net.scores(hprev, hs), axis=-1)
    return ad.bmm(alpha, hs), alpha


def batched_hardwired_context(nh: Tensor, weights: np.ndarray, assign: np.ndarray) -> Tensor:
    """Sum over slots and observed steps of w * h, routed to each slot's window."""
    m, t = weights.shape
    per_slot = ad.sum_(ad.mul(nh, weights.reshape(m, t, 1)), axis=1)
    return ad.matmul(Tensor(assign), per_slot)


def merge_context(soft, hardwired) -> Tensor:
    return ad.tanh(ad.concat([ad.as_tensor(soft), ad.as_tensor(hardwired)], axis=-1))


# ---------------------------------------------------------------- single-pedestrian views


def encode_trajectory(traj, encoder: NeighbourhoodEncoder) -> np.ndarray:
    """Hidden sequence (T_obs, H) for one trajectory already in encoder coordinates."""
    traj = np.asarray(traj, dtype=float)
    if traj.shape != (encoder.cfg.t_obs, 2):
        raise ContractViolation(f"expected ({encoder.cfg.t_obs}, 2) positions, got {traj.shape}")
    return encoder.encode(traj[None]).value[0]


def soft_attention(self_hidden, query, net: AttentionNet) -> tuple[np.ndarray, np.ndarray]:
    """Context sum_j alpha_j h_j for one query state; returns (context, alpha)."""
    hs = np.asarray(self_hidden, dtype=float)
    if hs.ndim != 2 or len(hs) == 0:
        raise ContractViolation("self_hidden must be a non-empty (T, H) sequence")
    q = np.asarray(query, dtype=float).reshape(1, 1, -1)
    scores = net.scores(q, hs[None]).value[0, 0]
    alpha = ad.softmax(Tensor(scores)).value
    return alpha @ hs, alpha


def hardwired_context(
    buckets: dict[str, NeighbourBucket], neighbour_hidden: dict[str, np.ndarray], hidden_size: int | None = None
) -> np.ndarray:
    """sum_n sum_j w^n_j h^n_j over all slots; ``neighbour_hidden`` is keyed by slot id.

    A slot's id is its single ped_id, or ``"mean:" + "+".join(ids)`` for an
    aggregated slot. Dummy slots are skipped (their weights are zero), so a
    window without neighbours yields a zero vector of length ``hidden_size``.
    """
    total = None
    for bucket in buckets.values():
        for slot in bucket.real_slots:
            h = np.asarray(neighbour_hidden[slot_id(slot)], dtype=float)
            contrib = (slot.weights[:, None] * h).sum(axis=0)
            total = contrib if total is None else total + contrib
    if total is None:
        if hidden_size is None:
            if not neighbour_hidden:
                raise ContractViolation("no real neighbours: pass hidden_size to size the zero context")
            hidden_size = next(iter(neighbour_hidden.values())).shape[-1]
        return np.zeros(hidden_size)
    return total


def slot_id(slot: Slot) -> str:
    if slot.kind == "mean":
        return "mean:" + "+".join(slot.ped_ids)
    return slot.ped_ids[0]
