"""Axis-aligned boxes and the [cx, cy, area, aspect] measurement convention."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .smallmat import jit


class InvalidBoxError(ValueError):
    pass


class InvalidStateError(ValueError):
    pass


class BBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1


@jit
def iou_kernel(ax1, ay1, ax2, ay2, bx1, by1, bx2, by2):
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@jit
def box_to_z_into(x1, y1, x2, y2, z):
    w = x2 - x1
    h = y2 - y1
    z[0] = x1 + 0.5 * w
    z[1] = y1 + 0.5 * h
    z[2] = w * h
    z[3] = w / h


@jit
def state_to_box_into(x, out):
    """Box corners from a state vector; False if area or aspect is unusable."""
    sr = x[2] * x[3]
    if not (sr > 0.0 and x[2] > 0.0) or not np.isfinite(sr):
        return False
    w = np.sqrt(sr)
    h = x[2] / w
    out[0] = x[0] - 0.5 * w
    out[1] = x[1] - 0.5 * h
    out[2] = x[0] + 0.5 * w
    out[3] = x[1] + 0.5 * h
    return np.isfinite(out[0]) and np.isfinite(out[1])


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, 0.0 when they are disjoint."""
    return iou_kernel(a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3])


def bbox_to_z(b: BBox) -> np.ndarray:
    """Measurement vector [cx, cy, s, r] with s = w*h and r = w/h."""
    x1, y1, x2, y2 = (float(c) for c in b[:4])
    if not (x2 > x1 and y2 > y1) or not all(map(math.isfinite, (x1, y1, x2, y2))):
        raise InvalidBoxError(f"degenerate box {b!r}")
    z = np.empty(4)
    box_to_z_into(x1, y1, x2, y2, z)
    return z


def x_to_bbox(x, score: float = 1.0) -> BBox:
    """Inverse of bbox_to_z on the first four state entries."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(4)
    if not state_to_box_into(x, out):
        raise InvalidStateError(f"state has no valid box: s={x[2]!r}, r={x[3]!r}")
    return BBox(*out.tolist(), score)
