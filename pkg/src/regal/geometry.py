"""Oriented-box geometry: containment, rectangle overlap, exact IoU.

Boxes are rectangles in the ground plane given by center, size and heading.
All overlap tests treat boundary contact as intersection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    length: float
    width: float
    heading: float

    @property
    def area(self) -> float:
        return self.length * self.width

    @property
    def circumradius(self) -> float:
        return 0.5 * math.hypot(self.length, self.width)

    def corners(self) -> np.ndarray:
        """Corner coordinates, counterclockwise, shape (4, 2)."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


def points_in_box(points: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Boolean mask of points (N, 2) inside ``box``, boundary inclusive."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    c, s = math.cos(box.heading), math.sin(box.heading)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= 0.5 * box.length) & (np.abs(v) <= 0.5 * box.width)


def point_in_box(x: float, y: float, box: OrientedBox) -> bool:
    return bool(points_in_box(np.array([[x, y]]), box)[0])


def _project(corners: np.ndarray, axis: np.ndarray) -> tuple[float, float]:
    proj = corners @ axis
    return float(proj.min()), float(proj.max())


def box_intersects_rect(box: OrientedBox, rect: tuple[float, float, float, float]) -> bool:
    """Separating-axis overlap test between an oriented box and an
    axis-aligned rectangle ``(xmin, ymin, xmax, ymax)``.

    Touching edges or corners count as intersection.
    """
    xmin, ymin, xmax, ymax = rect
    bc = box.corners()
    # Rectangle axes (x, y).
    if bc[:, 0].max() < xmin or bc[:, 0].min() > xmax:
        return False
    if bc[:, 1].max() < ymin or bc[:, 1].min() > ymax:
        return False
    # Box axes.
    rc = np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]])
    c, s = math.cos(box.heading), math.sin(box.heading)
    for axis in (np.array([c, s]), np.array([-s, c])):
        lo_b, hi_b = _project(bc, axis)
        lo_r, hi_r = _project(rc, axis)
        if hi_b < lo_r or hi_r < lo_b:
            return False
    return True


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by convex ``clip`` (both CCW)."""
    output = subject
    n = len(clip)
    for i in range(n):
        if len(output) == 0:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = b - a
        # Inside = left of directed edge a->b for a CCW clip polygon.
        rel = output - a
        d = edge[0] * rel[:, 1] - edge[1] * rel[:, 0]
        next_output = []
        m = len(output)
        for j in range(m):
            k = (j + 1) % m
            pj_in = d[j] >= 0.0
            pk_in = d[k] >= 0.0
            if pj_in:
                next_output.append(output[j])
            if pj_in != pk_in:
                t = d[j] / (d[j] - d[k])
                next_output.append(output[j] + t * (output[k] - output[j]))
        output = np.array(next_output) if next_output else np.empty((0, 2))
    return output


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def intersection_area(box_a: OrientedBox, box_b: OrientedBox) -> float:
    """Exact overlap area of two oriented boxes via polygon clipping."""
    if math.hypot(box_a.cx - box_b.cx, box_a.cy - box_b.cy) > box_a.circumradius + box_b.circumradius:
        return 0.0
    return _polygon_area(_clip_polygon(box_a.corners(), box_b.corners()))


def iou(box_a: OrientedBox, box_b: OrientedBox) -> float:
    """Intersection over union of two oriented boxes, in [0, 1]."""
    inter = intersection_area(box_a, box_b)
    if inter == 0.0:
        return 0.0
    union = box_a.area + box_b.area - inter
    return inter / union
