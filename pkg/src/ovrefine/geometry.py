"""Oriented 3D boxes, exact rotated IoU, and Soft-NMS rescoring.

Overlap between heading-aligned boxes is computed as the bird's-eye-view
polygon intersection (Sutherland-Hodgman clipping of the two footprint
rectangles) times the vertical interval overlap, divided by the union
volume. All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = ["Box7DoF", "ScoredBox", "iou3d", "soft_nms"]


def _wrap_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Box7DoF:
    """A 3D oriented box: center, extents along local axes, heading.

    Lengths are meters; ``theta`` is the rotation of the length axis about
    the vertical axis, normalized to [-pi, pi) at construction. Extents
    must be strictly positive.
    """

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self) -> None:
        if self.l <= 0.0 or self.w <= 0.0 or self.h <= 0.0:
            raise ValueError(
                f"box extents must be positive, got ({self.l}, {self.w}, {self.h})"
            )
        object.__setattr__(self, "theta", _wrap_angle(self.theta))

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def bev_corners(self) -> list[tuple[float, float]]:
        """Ground-plane footprint corners, counter-clockwise."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        hl, hw = self.l / 2.0, self.w / 2.0
        return [
            (self.cx + c * hl - s * hw, self.cy + s * hl + c * hw),
            (self.cx - c * hl - s * hw, self.cy - s * hl + c * hw),
            (self.cx - c * hl + s * hw, self.cy - s * hl - c * hw),
            (self.cx + c * hl + s * hw, self.cy + s * hl - c * hw),
        ]


@dataclass(frozen=True)
class ScoredBox:
    """A box with a detection score in [0, 1] and an integer class id."""

    box: Box7DoF
    score: float
    class_id: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def _edge_intersection(p, q, a, b):
    # Intersection of lines (p, q) and (a, b); callers guarantee they cross.
    x1, y1 = p
    x2, y2 = q
    x3, y3 = a
    x4, y4 = b
    denom = (x1 - x2) * (y3 - y4) - (y1 - y2) * (x3 - x4)
    t = ((x1 - x3) * (y3 - y4) - (y1 - y3) * (x3 - x4)) / denom
    return (x1 + t * (x2 - x1), y1 + t * (y2 - y1))


def _clip_polygon(subject, clip):
    """Sutherland-Hodgman: clip a convex CCW polygon by a convex CCW polygon."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            return []
        a = clip[i]
        b = clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        pts = output
        output = []
        prev = pts[-1]
        prev_in = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0]) >= 0.0
        for cur in pts:
            cur_in = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0]) >= 0.0
            if cur_in != prev_in:
                output.append(_edge_intersection(prev, cur, a, b))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return output


def _polygon_area(poly) -> float:
    area = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        area += x1 * y2 - x2 * y1
    return abs(area) / 2.0


def iou3d(a: Box7DoF, b: Box7DoF) -> float:
    """Intersection-over-union volume ratio of two oriented boxes.

    Symmetric, in [0, 1]; degenerate (zero-volume) overlap returns 0.
    """
    z_lo = max(a.cz - a.h / 2.0, b.cz - b.h / 2.0)
    z_hi = min(a.cz + a.h / 2.0, b.cz + b.h / 2.0)
    dz = z_hi - z_lo
    if dz <= 0.0:
        return 0.0
    overlap = _clip_polygon(a.bev_corners(), b.bev_corners())
    if len(overlap) < 3:
        return 0.0
    inter = _polygon_area(overlap) * dz
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def soft_nms(
    boxes: list[ScoredBox], sigma: float = 0.5, score_floor: float = 0.01
) -> list[ScoredBox]:
    """Gaussian Soft-NMS: decay overlapping same-class scores instead of deleting.

    Iteratively picks the highest-scoring remaining box, then rescales every
    remaining box of the same class by exp(-iou^2 / sigma). Boxes whose score
    decays below ``score_floor`` are dropped. The result is sorted by final
    score, descending; scores never increase.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    alive = [[sb.score, i, sb] for i, sb in enumerate(boxes)]
    out: list[ScoredBox] = []
    while alive:
        # highest score first, original order breaks ties
        best = min(alive, key=lambda item: (-item[0], item[1]))
        alive.remove(best)
        score, idx, picked = best
        out.append(ScoredBox(picked.box, score, picked.class_id))
        survivors = []
        for item in alive:
            if item[2].class_id == picked.class_id:
                overlap = iou3d(picked.box, item[2].box)
                item[0] *= math.exp(-(overlap * overlap) / sigma)
                if item[0] < score_floor:
                    continue
            survivors.append(item)
        alive = survivors
    out.sort(key=lambda sb: -sb.score)
    return out
