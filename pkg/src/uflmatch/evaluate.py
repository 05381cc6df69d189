"""Label transfer, warping and correspondence metrics (LT-ACC, IOU, LOC-ERR)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    """Raised when a metric has an empty denominator."""


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("bounding box must have positive width and height")
        if self.x < 0 or self.y < 0:
            raise ValueError("bounding box must lie inside the image")

    @classmethod
    def parse(cls, text: str) -> BoundingBox:
        parts = text.split(",")
        if len(parts) != 4:
            raise ValueError(f"expected x,y,w,h, got {text!r}")
        return cls(*(int(p) for p in parts))

    def check_inside(self, shape: tuple[int, int]) -> None:
        h, w = shape[:2]
        if self.x + self.w > w or self.y + self.h > h:
            raise ValueError(f"box {self} exceeds image of size {w}x{h}")


def _pixel_flow(flow) -> tuple[np.ndarray, np.ndarray]:
    if getattr(flow, "granularity", "pixel") != "pixel":
        raise ValueError(f"expected a pixel flow, got {flow.granularity!r}")
    return np.asarray(flow.u), np.asarray(flow.v)


def _lookup(flow, source: np.ndarray, fill) -> np.ndarray:
    u, v = _pixel_flow(flow)
    h, w = u.shape
    he, we = source.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    ty, tx = yy + v, xx + u
    ok = (ty >= 0) & (ty < he) & (tx >= 0) & (tx < we)
    out = np.full((h, w), fill, dtype=source.dtype)
    out[ok] = source[ty[ok], tx[ok]]
    return out


def transfer_labels(flow, exemplar_labels: np.ndarray) -> np.ndarray:
    """``o(p) = a_e(p + t_p)``; targets outside the exemplar get label 0."""
    return _lookup(flow, np.asarray(exemplar_labels), 0)


def warp_image(flow, exemplar: np.ndarray) -> np.ndarray:
    """``out(p) = exemplar(p + t_p)``; out-of-bounds targets are 0."""
    return _lookup(flow, np.asarray(exemplar, dtype=np.float64), 0.0)


def lt_acc(pairs) -> float:
    """Label-transfer accuracy pooled over all labeled pixels of all pairs."""
    hits = 0
    labeled = 0
    for output, truth in pairs:
        output, truth = np.asarray(output), np.asarray(truth)
        if output.shape != truth.shape:
            raise ValueError("label maps differ in shape")
        mask = truth > 0
        labeled += int(mask.sum())
        hits += int((output[mask] == truth[mask]).sum())
    if labeled == 0:
        raise UndefinedMetricError("LT-ACC undefined: no labeled pixels")
    return hits / labeled


def iou(output: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """``tp / (tp + fp + fn)`` for one class; 1.0 when the class is absent from both."""
    output, truth = np.asarray(output), np.asarray(truth)
    if output.shape != truth.shape:
        raise ValueError("label maps differ in shape")
    pred, gt = output == class_id, truth == class_id
    tp = int((pred & gt).sum())
    union = int((pred | gt).sum())
    return 1.0 if union == 0 else tp / union


def box_error(p1, p2):
    """``0.5 (|x1 - x2| + |y1 - y2|)`` for box-normalized points ``(x, y)``."""
    x1, y1 = p1
    x2, y2 = p2
    return 0.5 * (np.abs(np.subtract(x1, x2)) + np.abs(np.subtract(y1, y2)))


def loc_err(flow, box_test: BoundingBox, box_ex: BoundingBox) -> float:
    """Mean of ``0.5 (|x1 - x2| + |y1 - y2|)`` over the test-box pixels.

    ``(x1, y1)`` is a test pixel in box-normalized coordinates and
    ``(x2, y2)`` its match normalized to the exemplar box.
    """
    u, v = _pixel_flow(flow)
    box_test.check_inside(u.shape)
    ys, xs = np.mgrid[box_test.y : box_test.y + box_test.h, box_test.x : box_test.x + box_test.w]
    mu, mv = u[ys, xs], v[ys, xs]
    x1 = (xs - box_test.x) / box_test.w
    y1 = (ys - box_test.y) / box_test.h
    x2 = (xs + mu - box_ex.x) / box_ex.w
    y2 = (ys + mv - box_ex.y) / box_ex.h
    return float(np.mean(box_error((x1, y1), (x2, y2))))
