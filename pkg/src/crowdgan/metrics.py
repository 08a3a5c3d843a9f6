"""Forecast errors (ADE/FDE) and partition scores (pairwise, Group-MITRE)."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class TrajectoryError:
    ade: float
    fde: float


def ade_fde(predicted, ground_truth) -> TrajectoryError:
    pred = np.asarray(predicted, dtype=float)
    true = np.asarray(ground_truth, dtype=float)
    if pred.shape != true.shape or pred.ndim != 2 or len(pred) < 1:
        raise ContractViolation(f"trajectories must share shape (T>=1, 2): {pred.shape} vs {true.shape}")
    err = np.hypot(*(pred - true).T)
    return TrajectoryError(float(err.mean()), float(err[-1]))


def ade_fde_batch(predicted: np.ndarray, ground_truth: np.ndarray) -> tuple[float, float]:
    """Mean ADE and FDE over a (B, T, 2) batch."""
    if predicted.shape != ground_truth.shape:
        raise ContractViolation("batch shapes differ")
    err = np.sqrt(((predicted - ground_truth) ** 2).sum(axis=-1))
    return float(err.mean()), float(err[:, -1].mean())


def constant_position(observed: np.ndarray, steps: int) -> np.ndarray:
    return np.repeat(observed[..., -1:, :], steps, axis=-2)


def constant_velocity(observed: np.ndarray, steps: int) -> np.ndarray:
    """Extrapolate the last observed displacement."""
    v = observed[..., -1, :] - observed[..., -2, :]
    k = np.arange(1, steps + 1).reshape((1,) * (observed.ndim - 2) + (steps, 1))
    return observed[..., -1:, :] + k * v[..., None, :]


# ---------------------------------------------------------------- grouping scores


@dataclass(frozen=True)
class GroupScore:
    """Precision/recall with the raw counts needed to pool over scenes."""

    metric: str
    precision_num: float
    precision_den: float
    recall_num: float
    recall_den: float

    @property
    def precision(self) -> float:
        return _ratio(self.precision_num, self.precision_den, self.recall_den)

    @property
    def recall(self) -> float:
        return _ratio(self.recall_num, self.recall_den, self.precision_den)


def _ratio(num: float, den: float, other_den: float) -> float:
    # no links on this side: perfect only if the other side has none either
    if den == 0:
        return 1.0 if other_den == 0 else 0.0
    return num / den


def _as_assignment(partition) -> dict:
    return dict(partition.assignment) if hasattr(partition, "assignment") else dict(partition)


def _check_same(pred: dict, true: dict):
    if set(pred) != set(true):
        raise ContractViolation("partitions cover different pedestrian sets")


def _comb2(n) -> int:
    return n * (n - 1) // 2


def pairwise_scores(predicted, truth) -> GroupScore:
    """Precision/recall over co-grouped unordered pairs, from the contingency table."""
    pred, true = _as_assignment(predicted), _as_assignment(truth)
    _check_same(pred, true)
    both = sum(_comb2(n) for n in Counter((pred[p], true[p]) for p in pred).values())
    pred_pairs = sum(_comb2(n) for n in Counter(pred.values()).values())
    true_pairs = sum(_comb2(n) for n in Counter(true.values()).values())
    return GroupScore("pairwise", both, pred_pairs, both, true_pairs)


def pairwise_disagreement(predicted, truth) -> float:
    """Fraction of unordered pairs whose co-membership the two partitions disagree on."""
    pred, true = _as_assignment(predicted), _as_assignment(truth)
    _check_same(pred, true)
    n = len(pred)
    if n < 2:
        return 0.0
    s = pairwise_scores(pred, true)
    disagree = s.precision_den + s.recall_den - 2 * s.precision_num
    return disagree / _comb2(n)


FAKE = "\x00fake:"


def augment_singletons(assignment: dict, universe: Iterable[str]) -> dict:
    """Give every singleton a private fake partner; fakes this side did not add become singletons."""
    sizes = Counter(assignment.values())
    out = dict(assignment)
    for ped, gid in assignment.items():
        if sizes[gid] == 1:
            out[FAKE + ped] = gid
    for fake in universe:
        if fake not in out:
            out[fake] = FAKE + "solo:" + fake
    return out


def _mitre_recall_counts(key: dict, response: dict) -> tuple[int, int]:
    """Sum over key groups of (|G| - parts of G in response) and of (|G| - 1)."""
    parts: dict[str, set] = {}
    sizes = Counter(key.values())
    for ped, gid in key.items():
        parts.setdefault(gid, set()).add(response[ped])
    num = sum(sizes[g] - len(parts[g]) for g in sizes)
    den = sum(sizes[g] - 1 for g in sizes)
    return num, den


def group_mitre_scores(predicted, truth) -> GroupScore:
    pred, true = _as_assignment(predicted), _as_assignment(truth)
    _check_same(pred, true)
    fakes_pred = {FAKE + p for p, n in _singletons(pred)}
    fakes_true = {FAKE + p for p, n in _singletons(true)}
    universe = fakes_pred | fakes_true
    pred_aug = augment_singletons(pred, universe)
    true_aug = augment_singletons(true, universe)
    r_num, r_den = _mitre_recall_counts(true_aug, pred_aug)
    p_num, p_den = _mitre_recall_counts(pred_aug, true_aug)
    return GroupScore("group-mitre", p_num, p_den, r_num, r_den)


def _singletons(assignment: dict):
    sizes = Counter(assignment.values())
    return [(p, g) for p, g in assignment.items() if sizes[g] == 1]


def pool_scores(scores: Iterable[GroupScore]) -> GroupScore:
    """Sum counts across scenes, then take ratios."""
    scores = list(scores)
    if not scores:
        raise ContractViolation("nothing to pool")
    metrics = {s.metric for s in scores}
    if len(metrics) != 1:
        raise ContractViolation("cannot pool different metrics")
    return GroupScore(
        metrics.pop(),
        sum(s.precision_num for s in scores),
        sum(s.precision_den for s in scores),
        sum(s.recall_num for s in scores),
        sum(s.recall_den for s in scores),
    )


def mean_scores(scores: Iterable[GroupScore]) -> tuple[float, float]:
    scores = list(scores)
    return (
        float(np.mean([s.precision for s in scores])),
        float(np.mean([s.recall for s in scores])),
    )
