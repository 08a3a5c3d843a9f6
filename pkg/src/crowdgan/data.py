"""Scene and trajectory types, annotation I/O and observation/prediction windowing.

Annotation files hold whitespace-separated ``frame ped_id x y`` rows in world
metres. Group labels live in an optional sidecar with ``ped_id group_id`` rows.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Mapping

import numpy as np

from .errors import ContractViolation, MissingLabelsError, ParseError, ValidationError


def ped_sort_key(ped_id: str) -> tuple:
    """Natural ordering: numeric ids by value, then everything else lexically."""
    try:
        return (0, int(ped_id), "")
    except ValueError:
        return (1, 0, ped_id)


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Trajectory:
    ped_id: str
    frames: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        frames = _frozen(self.frames, dtype=np.int64)
        positions = _frozen(self.positions).reshape(-1, 2)
        if len(frames) == 0:
            raise ValidationError(f"trajectory {self.ped_id!r} has no samples")
        if len(frames) != len(positions):
            raise ValidationError(f"trajectory {self.ped_id!r}: frame/position count mismatch")
        if np.any(np.diff(frames) <= 0):
            raise ValidationError(f"trajectory {self.ped_id!r}: frames not strictly increasing")
        if not np.all(np.isfinite(positions)):
            raise ValidationError(f"trajectory {self.ped_id!r}: non-finite position")
        object.__setattr__(self, "ped_id", str(self.ped_id))
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "positions", positions)

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.ped_id == other.ped_id
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.positions, other.positions)
        )

    __hash__ = None


@dataclass(frozen=True)
class Partition:
    """Assignment of pedestrian ids to opaque group ids."""

    assignment: Mapping[str, str]

    def __post_init__(self):
        object.__setattr__(
            self, "assignment", {str(k): str(v) for k, v in dict(self.assignment).items()}
        )

    @classmethod
    def from_groups(cls, groups: Iterable[Iterable]) -> "Partition":
        assignment = {}
        for gi, members in enumerate(groups):
            for m in members:
                m = str(m)
                if m in assignment:
                    raise ValidationError(f"pedestrian {m!r} appears in two groups")
                assignment[m] = str(gi)
        return cls(assignment)

    @classmethod
    def from_labels(cls, ped_ids: Iterable, labels: Iterable) -> "Partition":
        return cls({str(p): str(lab) for p, lab in zip(ped_ids, labels)})

    @property
    def ped_ids(self) -> frozenset[str]:
        return frozenset(self.assignment)

    def groups(self) -> list[frozenset[str]]:
        by_gid: dict[str, set[str]] = {}
        for ped, gid in self.assignment.items():
            by_gid.setdefault(gid, set()).add(ped)
        groups = [frozenset(g) for g in by_gid.values()]
        return sorted(groups, key=lambda g: min(ped_sort_key(p) for p in g))

    def restricted(self, ped_ids: Iterable[str]) -> "Partition":
        keep = set(map(str, ped_ids))
        return Partition({p: g for p, g in self.assignment.items() if p in keep})

    def canonical(self) -> "Partition":
        """Relabel groups 0..k-1 in order of their smallest member."""
        return Partition.from_groups(
            sorted(g, key=ped_sort_key) for g in self.groups()
        )

    def __len__(self) -> int:
        return len(self.assignment)


@dataclass(frozen=True)
class Scene:
    trajectories: tuple[Trajectory, ...]
    frame_rate: float = 2.5
    group_labels: Partition | None = None
    scene_id: str = "scene"

    def __post_init__(self):
        trajs = tuple(sorted(self.trajectories, key=lambda t: ped_sort_key(t.ped_id)))
        ids = [t.ped_id for t in trajs]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate ped_id in scene")
        if self.group_labels is not None and self.group_labels.ped_ids != frozenset(ids):
            raise ValidationError("group labels do not cover exactly the scene's pedestrians")
        if not self.frame_rate > 0:
            raise ValidationError("frame_rate must be positive")
        object.__setattr__(self, "trajectories", trajs)

    @property
    def ped_ids(self) -> list[str]:
        return [t.ped_id for t in self.trajectories]

    def trajectory(self, ped_id: str) -> Trajectory:
        for t in self.trajectories:
            if t.ped_id == ped_id:
                return t
        raise KeyError(ped_id)

    def frame_step(self) -> int:
        """Spacing between consecutive annotated frames (gcd of all gaps)."""
        frames = np.unique(np.concatenate([t.frames for t in self.trajectories])) if self.trajectories else []
        if len(frames) < 2:
            return 1
        return int(reduce(math.gcd, (int(d) for d in np.diff(frames))))


@dataclass(frozen=True)
class Window:
    ped_id: str
    start_frame: int
    observed: np.ndarray
    future: np.ndarray
    neighbour_ids: tuple[str, ...] = ()
    neighbour_observed: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 2)))
    frames: np.ndarray | None = None

    def __post_init__(self):
        obs = _frozen(self.observed).reshape(-1, 2)
        fut = _frozen(self.future).reshape(-1, 2)
        nb = _frozen(self.neighbour_observed)
        if nb.size == 0:
            nb = _frozen(np.zeros((0, len(obs), 2)))
        if nb.shape[1:] != (len(obs), 2) or nb.shape[0] != len(self.neighbour_ids):
            raise ContractViolation("neighbour_observed must be (n_neighbours, t_obs, 2)")
        for arr in (obs, fut, nb):
            if not np.all(np.isfinite(arr)):
                raise ContractViolation("window positions must be finite")
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "future", fut)
        object.__setattr__(self, "neighbour_observed", nb)
        object.__setattr__(self, "neighbour_ids", tuple(self.neighbour_ids))
        if self.frames is not None:
            object.__setattr__(self, "frames", _frozen(self.frames, dtype=np.int64))

    @property
    def t_obs(self) -> int:
        return len(self.observed)

    @property
    def t_pred(self) -> int:
        return len(self.observed) + len(self.future)


# ---------------------------------------------------------------- annotation I/O


def _read_rows(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def load_group_labels(path) -> Partition:
    assignment = {}
    for lineno, cols in _read_rows(path):
        if len(cols) != 2:
            raise ParseError(f"expected 'ped_id group_id', got {len(cols)} columns", lineno)
        ped, gid = cols
        if ped in assignment:
            raise ValidationError(f"line {lineno}: pedestrian {ped!r} labelled twice")
        assignment[ped] = gid
    return Partition(assignment)


def load_annotations(
    path, format: str = "tsv", groups_path=None, frame_rate: float = 2.5, scene_id: str | None = None
) -> Scene:
    """Parse a ``frame ped_id x y`` annotation file into a Scene.

    Rows may appear in any order. When ``groups_path`` is None a sidecar named
    ``<stem>.groups`` next to the file is picked up if it exists.
    """
    if format != "tsv":
        raise ContractViolation(f"unsupported annotation format {format!r}")
    samples: dict[str, dict[int, tuple[float, float]]] = {}
    for lineno, cols in _read_rows(path):
        if len(cols) != 4:
            raise ParseError(f"expected 4 columns 'frame ped_id x y', got {len(cols)}", lineno)
        try:
            frame = int(cols[0])
            x, y = float(cols[2]), float(cols[3])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ParseError("non-finite coordinate", lineno)
        per_ped = samples.setdefault(cols[1], {})
        if frame in per_ped:
            raise ValidationError(f"line {lineno}: duplicate (frame={frame}, ped_id={cols[1]})")
        per_ped[frame] = (x, y)

    trajectories = []
    for ped, rows in samples.items():
        frames = sorted(rows)
        trajectories.append(Trajectory(ped, frames, [rows[f] for f in frames]))

    if groups_path is None:
        sidecar = os.path.splitext(str(path))[0] + ".groups"
        groups_path = sidecar if os.path.exists(sidecar) else None
    labels = load_group_labels(groups_path) if groups_path is not None else None
    if scene_id is None:
        scene_id = os.path.splitext(os.path.basename(str(path)))[0]
    return Scene(tuple(trajectories), frame_rate=frame_rate, group_labels=labels, scene_id=scene_id)


def format_float(x: float) -> str:
    return repr(float(x))


def write_annotations(scene: Scene, path, groups_path=None) -> None:
    """Write rows sorted by (frame, ped_id). Floats use shortest round-trip repr."""
    rows = []
    for traj in scene.trajectories:
        for f, (x, y) in zip(traj.frames, traj.positions):
            rows.append((int(f), ped_sort_key(traj.ped_id), traj.ped_id, x, y))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", encoding="utf-8") as fh:
        for f, _, ped, x, y in rows:
            fh.write(f"{f}\t{ped}\t{format_float(x)}\t{format_float(y)}\n")
    if groups_path is not None and scene.group_labels is not None:
        write_partition(scene.group_labels, groups_path)


def write_partition(partition: Partition, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ped in sorted(partition.assignment, key=ped_sort_key):
            fh.write(f"{ped}\t{partition.assignment[ped]}\n")


def partition_from_labels(scene: Scene) -> Partition:
    if scene.group_labels is None:
        raise MissingLabelsError(f"scene {scene.scene_id!r} has no group labels")
    return scene.group_labels


# ---------------------------------------------------------------- windowing


def _contiguous_runs(frames: np.ndarray, step: int) -> list[tuple[int, int]]:
    """Index ranges [lo, hi) of maximal runs whose frames advance by ``step``."""
    breaks = np.flatnonzero(np.diff(frames) != step) + 1
    bounds = np.concatenate([[0], breaks, [len(frames)]])
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def make_windows(
    scene: Scene, t_obs: int = 15, t_pred: int = 30, stride: int | None = None
) -> list[Window]:
    """Cut every pedestrian's contiguous runs into (observed, future) windows.

    Neighbours are the other pedestrians annotated at every observed frame of
    the window; partially present ones are left out.
    """
    if stride is None:
        stride = t_obs
    if not (t_pred > t_obs >= 2):
        raise ContractViolation("need t_pred > t_obs >= 2")
    if stride < 1:
        raise ContractViolation("stride must be >= 1")
    step = scene.frame_step()
    lookup = {
        t.ped_id: {int(f): i for i, f in enumerate(t.frames)} for t in scene.trajectories
    }
    windows = []
    for traj in scene.trajectories:
        for lo, hi in _contiguous_runs(traj.frames, step):
            for s in range(lo, hi - t_pred + 1, stride):
                obs_frames = traj.frames[s : s + t_obs]
                nb_ids, nb_pos = [], []
                for other in scene.trajectories:
                    if other.ped_id == traj.ped_id:
                        continue
                    idx = lookup[other.ped_id]
                    rows = [idx.get(int(f)) for f in obs_frames]
                    if any(r is None for r in rows):
                        continue
                    nb_ids.append(other.ped_id)
                    nb_pos.append(other.positions[rows])
                windows.append(
                    Window(
                        ped_id=traj.ped_id,
                        start_frame=int(traj.frames[s]),
                        observed=traj.positions[s : s + t_obs],
                        future=traj.positions[s + t_obs : s + t_pred],
                        neighbour_ids=tuple(nb_ids),
                        neighbour_observed=np.array(nb_pos).reshape(len(nb_ids), t_obs, 2),
                        frames=traj.frames[s : s + t_pred],
                    )
                )
    return windows


def evaluation_windows(
    scene: Scene, t_obs: int = 15, t_pred: int = 30, start_frame: int | None = None
) -> tuple[list[Window], list[str]]:
    """One co-temporal window per pedestrian starting at ``start_frame``.

    Defaults to the scene's first annotated frame. Returns the windows and the
    ids of pedestrians that lack full coverage of the span.
    """
    step = scene.frame_step()
    if start_frame is None:
        start_frame = min((int(t.frames[0]) for t in scene.trajectories), default=0)
    span = start_frame + step * np.arange(t_pred)
    windows, missing = [], []
    covered = []
    for traj in scene.trajectories:
        idx = {int(f): i for i, f in enumerate(traj.frames)}
        rows = [idx.get(int(f)) for f in span]
        if any(r is None for r in rows):
            missing.append(traj.ped_id)
        else:
            covered.append((traj, rows))
    for traj, rows in covered:
        nb = [(o.ped_id, o.positions[r[:t_obs]]) for o, r in covered if o.ped_id != traj.ped_id]
        # partially present pedestrians can still be neighbours over the observed span
        for other in scene.trajectories:
            if other.ped_id == traj.ped_id or other.ped_id not in missing:
                continue
            idx = {int(f): i for i, f in enumerate(other.frames)}
            orow = [idx.get(int(f)) for f in span[:t_obs]]
            if all(r is not None for r in orow):
                nb.append((other.ped_id, other.positions[orow]))
        nb.sort(key=lambda item: ped_sort_key(item[0]))
        windows.append(
            Window(
                ped_id=traj.ped_id,
                start_frame=int(span[0]),
                observed=traj.positions[rows[:t_obs]],
                future=traj.positions[rows[t_obs:]],
                neighbour_ids=tuple(p for p, _ in nb),
                neighbour_observed=np.array([a for _, a in nb]).reshape(len(nb), t_obs, 2),
                frames=span,
            )
        )
    return windows, missing
