"""Synthetic crowds with ground-truth groups.

Each group walks with a shared goal velocity; members are pulled toward the
group centroid, pushed apart inside a repulsion radius, and jittered by
Gaussian noise. Positions are integrated with forward Euler at ``frame_rate``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Partition, Scene, Trajectory
from .errors import ContractViolation


@dataclass
class SynthConfig:
    n_groups_range: tuple[int, int] = (2, 3)
    group_size_range: tuple[int, int] = (2, 5)
    n_pedestrians_range: tuple[int, int] = (6, 10)
    scene_extent: float = 20.0
    speed_range: tuple[float, float] = (0.8, 1.6)
    noise_sigma: float = 0.05
    cohesion_strength: float = 0.5
    repulsion_strength: float = 1.0
    repulsion_radius: float = 0.8
    group_spread: float = 0.8
    min_heading_separation_deg: float = 60.0
    min_group_distance: float = 5.0
    frames: int = 30
    frame_rate: float = 2.5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_groups_range", "group_size_range", "n_pedestrians_range", "speed_range"):
            lo, hi = getattr(self, name)
            setattr(self, name, (type(lo)(lo), type(hi)(hi)))
            if lo > hi or lo <= 0:
                raise ContractViolation(f"{name} must be a positive (low, high) pair")
        if self.scene_extent <= 0 or self.frame_rate <= 0 or self.frames < 2:
            raise ContractViolation("scene_extent, frame_rate must be positive and frames >= 2")
        for name in ("noise_sigma", "cohesion_strength", "repulsion_strength", "repulsion_radius", "group_spread"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")
        g_lo, g_hi = self.n_groups_range
        s_lo, s_hi = self.group_size_range
        n_lo, n_hi = self.n_pedestrians_range
        if g_hi * s_hi < n_lo or g_lo * s_lo > n_hi:
            raise ContractViolation("group counts/sizes cannot produce the requested pedestrian range")


def _group_sizes(cfg: SynthConfig, rng: np.random.Generator) -> list[int]:
    s_lo, s_hi = cfg.group_size_range
    n_lo, n_hi = cfg.n_pedestrians_range
    for _ in range(1000):
        n_groups = int(rng.integers(cfg.n_groups_range[0], cfg.n_groups_range[1] + 1))
        total = int(rng.integers(n_lo, n_hi + 1))
        if not (n_groups * s_lo <= total <= n_groups * s_hi):
            continue
        sizes = [s_lo] * n_groups
        for _ in range(total - n_groups * s_lo):
            open_groups = [g for g in range(n_groups) if sizes[g] < s_hi]
            sizes[open_groups[int(rng.integers(len(open_groups)))]] += 1
        return sizes
    raise ContractViolation("could not sample group sizes for this config")


def _angle_gap(a: float, b: float) -> float:
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def _sample_headings(n: int, cfg: SynthConfig, rng) -> list[float]:
    sep = math.radians(cfg.min_heading_separation_deg)
    for _ in range(1000):
        headings = list(rng.uniform(0, 2 * math.pi, n))
        if all(_angle_gap(a, b) >= sep for i, a in enumerate(headings) for b in headings[i + 1 :]):
            return headings
    raise ContractViolation("min_heading_separation_deg too large for the number of groups")


def _sample_centres(n: int, cfg: SynthConfig, rng) -> np.ndarray:
    half = cfg.scene_extent / 2
    for _ in range(1000):
        c = rng.uniform(-half, half, (n, 2))
        d = np.hypot(*(c[:, None] - c[None]).transpose(2, 0, 1))
        np.fill_diagonal(d, np.inf)
        if d.min() >= cfg.min_group_distance:
            return c
    raise ContractViolation("min_group_distance too large for scene_extent")


def simulate(cfg: SynthConfig, rng: np.random.Generator):
    """Returns positions (frames, N, 2) and the group index of every pedestrian."""
    sizes = _group_sizes(cfg, rng)
    n_groups = len(sizes)
    headings = _sample_headings(n_groups, cfg, rng)
    speeds = rng.uniform(*cfg.speed_range, n_groups)
    centres = _sample_centres(n_groups, cfg, rng)
    group = np.repeat(np.arange(n_groups), sizes)
    goal = np.stack([speeds * np.cos(headings), speeds * np.sin(headings)], axis=1)[group]
    # members start on a small ring around the group centre
    n = len(group)
    pos = np.zeros((n, 2))
    for g in range(n_groups):
        idx = np.flatnonzero(group == g)
        phase = rng.uniform(0, 2 * math.pi)
        ang = phase + 2 * math.pi * np.arange(len(idx)) / len(idx)
        r = cfg.group_spread * (0.5 + 0.5 * rng.uniform(size=len(idx)))
        pos[idx] = centres[g] + np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    dt = 1.0 / cfg.frame_rate
    same = group[:, None] == group[None, :]
    out = np.zeros((cfg.frames, n, 2))
    out[0] = pos
    for t in range(1, cfg.frames):
        vel = goal.copy()
        if cfg.cohesion_strength > 0:
            centroid = np.stack([pos[group == g].mean(axis=0) for g in range(n_groups)])[group]
            vel += cfg.cohesion_strength * (centroid - pos)
        if cfg.repulsion_strength > 0 and cfg.repulsion_radius > 0:
            diff = pos[:, None, :] - pos[None, :, :]
            dist = np.hypot(diff[..., 0], diff[..., 1])
            np.fill_diagonal(dist, np.inf)
            push = np.clip((cfg.repulsion_radius - dist) / cfg.repulsion_radius, 0.0, None)
            unit = diff / np.maximum(dist, 1e-9)[..., None]
            vel += cfg.repulsion_strength * (push[..., None] * unit).sum(axis=1)
        pos = pos + vel * dt
        if cfg.noise_sigma > 0:
            pos = pos + rng.normal(0.0, cfg.noise_sigma, pos.shape)
        out[t] = pos
    return out, group, sizes


def generate_scene(config: SynthConfig, scene_id: str = "synth") -> Scene:
    rng = np.random.default_rng(config.seed)
    return _scene_from_rng(config, rng, scene_id)


def _scene_from_rng(config: SynthConfig, rng, scene_id: str) -> Scene:
    positions, group, _ = simulate(config, rng)
    frames = np.arange(config.frames)
    trajectories = tuple(
        Trajectory(str(i + 1), frames, positions[:, i, :]) for i in range(positions.shape[1])
    )
    labels = Partition({str(i + 1): str(int(g)) for i, g in enumerate(group)})
    return Scene(trajectories, frame_rate=config.frame_rate, group_labels=labels, scene_id=scene_id)


@dataclass
class Corpus:
    scenes: list[Scene]
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)

    def split(self, name: str) -> list[Scene]:
        return [self.scenes[i] for i in getattr(self, name)]


def split_indices(n: int, seed: int) -> tuple[list[int], list[int], list[int]]:
    """70/15/15 by seeded shuffle; floors for train/val, remainder to test."""
    order = np.random.default_rng([seed, 0x5911]).permutation(n)
    n_train = int(math.floor(0.7 * n))
    n_val = int(math.floor(0.15 * n))
    return (
        sorted(int(i) for i in order[:n_train]),
        sorted(int(i) for i in order[n_train : n_train + n_val]),
        sorted(int(i) for i in order[n_train + n_val :]),
    )


def generate_corpus(config: SynthConfig, n_scenes: int, threads: int = 1) -> Corpus:
    """Scenes use seeds derived from (config.seed, index), so results do not depend on ``threads``."""
    if n_scenes < 3:
        raise ContractViolation("a corpus needs at least 3 scenes")

    def make(i):
        rng = np.random.default_rng([config.seed, i])
        return _scene_from_rng(config, rng, f"scene_{i:03d}")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scenes = list(pool.map(make, range(n_scenes)))
    else:
        scenes = [make(i) for i in range(n_scenes)]
    train, val, test = split_indices(n_scenes, config.seed)
    return Corpus(scenes, train, val, test)
