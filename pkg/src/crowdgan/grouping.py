"""Unsupervised group detection from generator hidden activations.

theta (flattened observation-step generator hiddens) -> exact t-SNE -> DBSCAN.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Partition, Scene, evaluation_windows
from .encoder import prepare_windows
from .errors import ContractViolation
from .gan import GanModel, forward_generator

log = logging.getLogger(__name__)

NOISE = -1


@dataclass
class TsneConfig:
    perplexity: float = 5.0
    iterations: int = 500
    learning_rate: float = 100.0
    early_exaggeration_factor: float = 4.0
    early_exaggeration_iters: int = 100
    output_dim: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractViolation("t-SNE needs at least one iteration")
        if self.perplexity <= 0:
            raise ContractViolation("perplexity must be positive")


@dataclass
class DbscanConfig:
    epsilon: float = 0.5
    min_pts: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractViolation("epsilon must be > 0")
        if self.min_pts < 1:
            raise ContractViolation("min_pts must be >= 1")


@dataclass
class EmbeddingSet:
    ped_ids: list[str]
    theta: np.ndarray  # (N, T_obs * H)
    eta: np.ndarray | None = None
    beta: np.ndarray | None = None
    excluded: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- t-SNE


def _row_affinities(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100) -> np.ndarray:
    """Conditional Gaussian affinities p_{j|i}, bisecting the precision of each row."""
    n = len(d2)
    target = math.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        d = np.delete(d2[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, 0.0, math.inf
        for _ in range(max_iter):
            w = np.exp(-d * beta)
            s = w.sum()
            row = w / s
            entropy = -np.sum(row[row > 0] * np.log(row[row > 0]))
            diff = entropy - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2 if hi == math.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        p[i, np.arange(n) != i] = row
    return p


def joint_probabilities(x: np.ndarray, perplexity: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    p = _row_affinities(d2, perplexity)
    p = (p + p.T) / (2 * len(x))
    return np.maximum(p, 1e-12)


def _student_q(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sq = (y * y).sum(axis=1)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2 * y @ y.T, 0.0))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    return q, num


def kl_divergence(p: np.ndarray, y: np.ndarray) -> float:
    q, _ = _student_q(y)
    mask = ~np.eye(len(p), dtype=bool)
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def effective_perplexity(requested: float, n: int) -> float:
    return max(1.0, min(requested, math.floor((n - 1) / 3)))


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_initial: float
    kl_final: float
    perplexity: float


def tsne(vectors, config: TsneConfig | None = None) -> TsneResult:
    """Exact t-SNE with gains, momentum 0.5 -> 0.8 and early exaggeration.

    The returned embedding is centred and scaled to unit RMS radius.
    """
    config = config or TsneConfig()
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or len(x) < 2 or x.shape[1] < 1:
        raise ContractViolation("t-SNE needs an (N >= 2, d >= 1) array")
    n = len(x)
    perplexity = effective_perplexity(config.perplexity, n)
    p = joint_probabilities(x, perplexity)
    rng = np.random.default_rng(config.seed)
    y = rng.standard_normal((n, config.output_dim)) * 1e-4
    kl_initial = kl_divergence(p, y)
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(config.iterations):
        exaggerate = it < config.early_exaggeration_iters
        pp = p * config.early_exaggeration_factor if exaggerate else p
        momentum = 0.5 if exaggerate else 0.8
        q, num = _student_q(y)
        pq = (pp - q) * num
        grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - config.learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    kl_final = kl_divergence(p, y)
    return TsneResult(normalize_rms(y), kl_initial, kl_final, perplexity)


def tsne_reduce(vectors, config: TsneConfig | None = None) -> np.ndarray:
    return tsne(vectors, config).embedding


def normalize_rms(y: np.ndarray) -> np.ndarray:
    """Centre at the origin and scale so the RMS distance to it is 1."""
    y = np.asarray(y, dtype=float)
    y = y - y.mean(axis=0)
    rms = math.sqrt(float(np.mean(np.sum(y * y, axis=1))))
    return y / rms if rms > 0 else y


# ---------------------------------------------------------------- DBSCAN


def dbscan(points, config: DbscanConfig | None = None) -> np.ndarray:
    """Density clustering; label -1 marks noise.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``epsilon``. Core points in each other's neighbourhood share a
    cluster; a border point joins the cluster of its nearest core point.
    Clusters are numbered by their lowest-index core point.
    """
    config = config or DbscanConfig()
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n < 1:
        raise ContractViolation("dbscan needs at least one point")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    adj = dist <= config.epsilon
    core = adj.sum(axis=1) >= config.min_pts
    labels = np.full(n, NOISE)
    next_label = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != NOISE:
            continue
        labels[seed] = next_label
        stack = [seed]
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(adj[i] & core):
                if labels[j] == NOISE:
                    labels[j] = next_label
                    stack.append(j)
        next_label += 1
    for i in np.flatnonzero(~core):
        near = np.flatnonzero(adj[i] & core)
        if len(near):
            labels[i] = labels[near[np.argmin(dist[i, near])]]
    return labels


# ---------------------------------------------------------------- PCA


def pca_project(vectors, dims: int = 2) -> np.ndarray:
    """Project mean-centred data on its top principal components.

    Each component's sign is fixed so its largest-magnitude loading is positive.
    """
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or len(x) < 2:
        raise ContractViolation("PCA needs an (N >= 2, d) array")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:dims]
    comps = evecs[:, order]
    for k in range(comps.shape[1]):
        if comps[np.argmax(np.abs(comps[:, k])), k] < 0:
            comps[:, k] = -comps[:, k]
    proj = xc @ comps
    if proj.shape[1] < dims:
        proj = np.hstack([proj, np.zeros((len(x), dims - proj.shape[1]))])
    return proj


# ---------------------------------------------------------------- pipeline


def extract_embeddings(scene: Scene, model: GanModel, windows=None, start_frame: int | None = None) -> EmbeddingSet:
    """theta per pedestrian: generator hiddens over the observation steps with zero noise."""
    cfg = model.cfg
    excluded: list[str] = []
    if windows is None:
        windows, excluded = evaluation_windows(scene, cfg.t_obs, cfg.t_pred, start_frame)
        if excluded:
            log.info("scene %s: no window for %s", scene.scene_id, excluded)
    if not windows:
        return EmbeddingSet([], np.zeros((0, cfg.t_obs * cfg.hidden_size)), excluded=excluded)
    batch = prepare_windows(list(windows), cfg)
    z = np.zeros((len(batch), cfg.t_pred, cfg.z_dim))
    _, hidden, _, _ = forward_generator(model, batch, z)
    theta = hidden.value[:, : cfg.t_obs, :].reshape(len(batch), -1)
    return EmbeddingSet(list(batch.ped_ids), theta, excluded=excluded)


def reduce_and_cluster(theta: np.ndarray, tsne_cfg: TsneConfig, dbscan_cfg: DbscanConfig) -> tuple[np.ndarray, np.ndarray]:
    n = len(theta)
    if n == 1:
        return np.zeros((1, 2)), np.zeros(1, dtype=int)
    if n <= 3:
        # t-SNE is degenerate here; cluster the RMS-normalised activations directly
        coords = normalize_rms(theta)
        eta = pca_project(coords, 2) if coords.shape[1] >= 1 else np.zeros((n, 2))
        return eta, dbscan(coords, dbscan_cfg)
    eta = tsne_reduce(theta, tsne_cfg)
    return eta, dbscan(eta, dbscan_cfg)


def detect_groups(
    scene: Scene,
    model: GanModel,
    tsne_cfg: TsneConfig | None = None,
    dbscan_cfg: DbscanConfig | None = None,
    start_frame: int | None = None,
    return_embeddings: bool = False,
):
    """Partition of the scene's pedestrians; pedestrians without a window are singletons."""
    tsne_cfg = tsne_cfg or TsneConfig()
    dbscan_cfg = dbscan_cfg or DbscanConfig()
    emb = extract_embeddings(scene, model, start_frame=start_frame)
    if not emb.ped_ids and not scene.trajectories:
        raise ContractViolation("scene has no pedestrians")
    assignment = {}
    if emb.ped_ids:
        emb.eta, emb.beta = reduce_and_cluster(emb.theta, tsne_cfg, dbscan_cfg)
        for ped, label in zip(emb.ped_ids, emb.beta):
            assignment[ped] = f"g{label}" if label != NOISE else f"noise:{ped}"
    for ped in scene.ped_ids:
        if ped not in assignment:
            assignment[ped] = f"solo:{ped}"
    partition = Partition(assignment).canonical()
    return (partition, emb) if return_embeddings else partition
