"""Synthetic image pairs with exact ground-truth flow and labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

KINDS = ("shift", "warp-free", "noise")


@dataclass(frozen=True, eq=False)
class SyntheticPair:
    test: np.ndarray
    exemplar: np.ndarray
    test_labels: np.ndarray
    exemplar_labels: np.ndarray
    flow_u: np.ndarray  # ground-truth pixel flow, test -> exemplar
    flow_v: np.ndarray


def texture(shape: tuple[int, int], rng: np.random.Generator, sigma: float = 1.0) -> np.ndarray:
    """Smoothed noise rescaled to [0, 1]."""
    t = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    t -= t.min()
    return t / t.max()


def label_field(shape: tuple[int, int], rng: np.random.Generator, classes: int = 2) -> np.ndarray:
    """Blobby regions with labels ``1..classes``."""
    field = gaussian_filter(rng.standard_normal(shape), max(shape) / 8.0, mode="wrap")
    edges = np.quantile(field, np.linspace(0, 1, classes + 1)[1:-1])
    return (np.searchsorted(edges, field) + 1).astype(np.int64)


def shift_pair(
    size: tuple[int, int], shift: tuple[int, int], seed: int, sigma: float = 1.0
) -> SyntheticPair:
    """Exemplar = test translated by ``shift = (dx, dy)`` pixels.

    The uncovered border of the exemplar is filled with independent texture
    and labeled 0.
    """
    h, w = size
    dx, dy = shift
    if abs(dx) >= w or abs(dy) >= h:
        raise ValueError("shift larger than the image")
    rng = np.random.default_rng(seed)
    test = texture((h, w), rng, sigma)
    labels = label_field((h, w), rng)
    exemplar = texture((h, w), rng, sigma)
    ex_labels = np.zeros((h, w), dtype=np.int64)
    src_y = slice(max(0, -dy), min(h, h - dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    exemplar[dst_y, dst_x] = test[src_y, src_x]
    ex_labels[dst_y, dst_x] = labels[src_y, src_x]
    return SyntheticPair(
        test=test,
        exemplar=exemplar,
        test_labels=labels,
        exemplar_labels=ex_labels,
        flow_u=np.full((h, w), dx, dtype=np.int64),
        flow_v=np.full((h, w), dy, dtype=np.int64),
    )


def make_pair(kind: str, size: tuple[int, int], seed: int, shift=(0, 0)) -> SyntheticPair:
    if kind == "shift":
        return shift_pair(size, shift, seed)
    if kind == "warp-free":
        return shift_pair(size, (0, 0), seed)
    if kind == "noise":
        rng = np.random.default_rng(seed)
        h, w = size
        zeros = np.zeros((h, w), dtype=np.int64)
        return SyntheticPair(
            test=rng.random((h, w)),
            exemplar=rng.random((h, w)),
            test_labels=label_field((h, w), rng),
            exemplar_labels=label_field((h, w), rng),
            flow_u=zeros,
            flow_v=zeros.copy(),
        )
    raise ValueError(f"unknown synthetic kind {kind!r}; choose from {', '.join(KINDS)}")
