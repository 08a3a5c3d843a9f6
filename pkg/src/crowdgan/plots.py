"""Dependency-free SVG rendering for forecasts and group embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import quoteattr

import numpy as np

OBSERVED, TRUTH, PREDICTED = "#2ca02c", "#1f77b4", "#d62728"
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def group_colour(index: int) -> str:
    return PALETTE[index % len(PALETTE)]


@dataclass
class _Frame:
    """Maps world coordinates to a square canvas with y pointing up."""

    lo: np.ndarray
    scale: float
    size: float
    margin: float

    @classmethod
    def fit(cls, points: np.ndarray, size: float = 480.0, margin: float = 20.0) -> "_Frame":
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(pts) == 0:
            pts = np.zeros((1, 2))
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
        return cls(lo, (size - 2 * margin) / span, size, margin)

    def xy(self, p) -> tuple[float, float]:
        x = self.margin + (p[0] - self.lo[0]) * self.scale
        y = self.size - self.margin - (p[1] - self.lo[1]) * self.scale
        return x, y


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _path(frame: _Frame, points, colour: str, dash: bool = False) -> str:
    coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in (frame.xy(p) for p in points))
    style = ' stroke-dasharray="4 3"' if dash else ""
    return f'<polyline points="{coords}" fill="none" stroke="{colour}" stroke-width="1.5"{style}/>'


def _document(size: float, body: list[str], title: str) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(size)}" height="{_fmt(size)}" '
        f'viewBox="0 0 {_fmt(size)} {_fmt(size)}">'
    )
    return "\n".join([head, f"<title>{title}</title>", '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>", ""])


def forecast_svg(tracks, title: str = "forecast") -> str:
    """``tracks`` is an iterable of (ped_id, observed, truth or None, predicted).

    Each pedestrian becomes a ``<g>`` holding one path group per layer:
    observed (green), ground truth (blue, dashed) and predicted (red).
    """
    tracks = list(tracks)
    pts = [np.asarray(a) for _, obs, truth, pred in tracks for a in (obs, truth, pred) if a is not None]
    frame = _Frame.fit(np.concatenate(pts) if pts else np.zeros((1, 2)))
    body = []
    for ped, obs, truth, pred in tracks:
        last = np.asarray(obs)[-1:]
        body.append(f"<g class=\"pedestrian\" data-ped={quoteattr(str(ped))}>")
        body.append(f'<g class="observed">{_path(frame, obs, OBSERVED)}</g>')
        if truth is not None:
            body.append(f'<g class="truth">{_path(frame, np.vstack([last, truth]), TRUTH, dash=True)}</g>')
        body.append(f'<g class="predicted">{_path(frame, np.vstack([last, pred]), PREDICTED)}</g>')
        body.append("</g>")
    return _document(frame.size, body, title)


def groups_svg(ped_ids, coords, group_of: dict, title: str = "groups") -> str:
    """Scatter of 2-D coordinates, coloured by group in order of first appearance."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    frame = _Frame.fit(coords)
    colour_index: dict = {}
    for ped in ped_ids:
        colour_index.setdefault(group_of[ped], len(colour_index))
    body = []
    for ped, p in zip(ped_ids, coords):
        x, y = frame.xy(p)
        g = group_of[ped]
        body.append(
            f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="5" fill="{group_colour(colour_index[g])}" '
            f"data-ped={quoteattr(str(ped))} data-group={quoteattr(str(g))}/>"
        )
    return _document(frame.size, body, title)
