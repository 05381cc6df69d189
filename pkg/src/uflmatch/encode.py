"""Pixel-layer encoders (KT, SA, OMP-k), max-pooling and the grid-cell pyramid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .preprocess import apply_whitening, normalize_patches, validate_image

if TYPE_CHECKING:
    from .dictionary import Dictionary

SCHEMES = ("KT", "SA", "OMPk")
_ROW_CHUNK = 1 << 13


@dataclass(frozen=True)
class EncoderConfig:
    scheme: str = "KT"
    beta: float = 1.0
    k: int = 10
    pixel_patch_width: int = 11
    pool_width: int = 7

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown encoding scheme {self.scheme!r}")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.pixel_patch_width < 1 or self.pixel_patch_width % 2 == 0:
            raise ValueError("pixel patch width must be a positive odd number")
        if self.pool_width < 1:
            raise ValueError("pool width must be >= 1")


def _as_rows(codewords: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != codewords.shape[1]:
        raise ValueError(
            f"patch dimension {x.shape[1]} does not match dictionary dimension {codewords.shape[1]}"
        )
    return x


def _sq_distances(codewords: np.ndarray, x: np.ndarray) -> np.ndarray:
    x_sq = np.einsum("ij,ij->i", x, x)
    c_sq = np.einsum("ij,ij->i", codewords, codewords)
    d2 = x_sq[:, None] - 2.0 * (x @ codewords.T) + c_sq[None, :]
    return np.maximum(d2, 0.0, out=d2)


def kt_codes(codewords: np.ndarray, x: np.ndarray) -> np.ndarray:
    """K-means triangle codes ``max(0, mean(z) - z_j)`` for each row of ``x``."""
    x = _as_rows(codewords, x)
    z = np.sqrt(_sq_distances(codewords, x))
    return np.maximum(z.mean(axis=1, keepdims=True) - z, 0.0)


def sa_codes(codewords: np.ndarray, x: np.ndarray, beta: float) -> np.ndarray:
    """Soft-assignment codes: softmax of ``-beta * ||x - d_j||^2`` over codewords."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    x = _as_rows(codewords, x)
    d2 = _sq_distances(codewords, x)
    logits = -beta * (d2 - d2.min(axis=1, keepdims=True))
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def _omp_chunk(codewords, gram, x, k, tol):
    n_rows = x.shape[0]
    idx = np.full((n_rows, k), -1, dtype=np.int64)
    coef = np.zeros((n_rows, k))
    corr0 = x @ codewords.T
    resid = x.copy()
    chosen = np.zeros((n_rows, codewords.shape[0]), dtype=bool)
    live = np.arange(n_rows)
    for step in range(k):
        live = live[np.linalg.norm(resid[live], axis=1) >= tol]
        if live.size == 0:
            break
        score = np.abs(resid[live] @ codewords.T)
        score[chosen[live]] = -1.0
        pick = np.argmax(score, axis=1)
        idx[live, step] = pick
        chosen[live, pick] = True
        support = idx[live, : step + 1]
        g = gram[support[:, :, None], support[:, None, :]]
        b = np.take_along_axis(corr0[live], support, axis=1)
        sol = np.einsum("rij,rj->ri", np.linalg.pinv(g, hermitian=True), b)
        coef[live, : step + 1] = sol
        resid[live] = x[live] - np.einsum("rj,rjn->rn", sol, codewords[support])
    return idx, coef


def omp_codes(
    codewords: np.ndarray, x: np.ndarray, k: int, tol: float = 1e-10
) -> tuple[np.ndarray, np.ndarray]:
    """Batched orthogonal matching pursuit.

    Returns ``(indices, coefficients)``, both ``(N, k)``; unused slots have
    index -1 and coefficient 0.  Atoms are picked by largest absolute
    correlation with the residual (lowest index on ties) and coefficients are
    re-fit by least squares on the active set after every pick.  Coding of a
    row stops once its residual norm drops below ``tol``.
    """
    m = codewords.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"sparsity k={k} must lie in [1, {m}]")
    x = _as_rows(codewords, x)
    gram = codewords @ codewords.T
    idx = np.empty((x.shape[0], k), dtype=np.int64)
    coef = np.empty((x.shape[0], k))
    for start in range(0, x.shape[0], _ROW_CHUNK):
        sl = slice(start, start + _ROW_CHUNK)
        idx[sl], coef[sl] = _omp_chunk(codewords, gram, x[sl], k, tol)
    return idx, coef


def omp_dense_codes(codewords: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
    idx, coef = omp_codes(codewords, x, k)
    out = np.zeros((idx.shape[0], codewords.shape[0]))
    rows, slots = np.nonzero(idx >= 0)
    out[rows, idx[rows, slots]] = coef[rows, slots]
    return out


def encode_kt(d: Dictionary, patch: np.ndarray) -> np.ndarray:
    return kt_codes(d.codewords, patch)[0]


def encode_sa(d: Dictionary, patch: np.ndarray, beta: float) -> np.ndarray:
    return sa_codes(d.codewords, patch, beta)[0]


def encode_omp(d: Dictionary, patch: np.ndarray, k: int) -> np.ndarray:
    return omp_dense_codes(d.codewords, patch, k)[0]


def encode_patches(d: Dictionary, x: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Encode rows that are already normalized and whitened."""
    if cfg.scheme == "KT":
        return kt_codes(d.codewords, x)
    if cfg.scheme == "SA":
        return sa_codes(d.codewords, x, cfg.beta)
    return omp_dense_codes(d.codewords, x, cfg.k)


def pixel_patches(img: np.ndarray, patch_width: int) -> np.ndarray:
    """Centred ``w x w`` patch around every pixel (replicate padding), ``(H*W, w*w)``."""
    img = validate_image(img)
    r = patch_width // 2
    padded = np.pad(img, r, mode="edge")
    windows = sliding_window_view(padded, (patch_width, patch_width))
    return windows.reshape(img.shape[0] * img.shape[1], patch_width * patch_width)


def encode_image(d: Dictionary, img: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Per-pixel feature map of shape ``(H, W, M)``."""
    w = cfg.pixel_patch_width
    if d.dim != w * w:
        raise ValueError(f"dictionary dimension {d.dim} does not match {w}x{w} patches")
    img = validate_image(img)
    h, wd = img.shape
    out = np.empty((h * wd, d.size))
    patches = pixel_patches(img, w)
    for start in range(0, patches.shape[0], _ROW_CHUNK):
        sl = slice(start, start + _ROW_CHUNK)
        x = apply_whitening(d.whitening, normalize_patches(patches[sl]))
        out[sl] = encode_patches(d, x, cfg)
    return out.reshape(h, wd, d.size)


def max_pool(features: np.ndarray, pool_width: int) -> np.ndarray:
    """Non-overlapping max-pooling anchored at (0, 0); partial edge tiles are dropped."""
    if pool_width < 1:
        raise ValueError("pool width must be >= 1")
    h, w, m = features.shape
    rows, cols = h // pool_width, w // pool_width
    if rows == 0 or cols == 0:
        raise ValueError(f"feature map {w}x{h} is smaller than pool width {pool_width}")
    tiles = features[: rows * pool_width, : cols * pool_width].reshape(
        rows, pool_width, cols, pool_width, m
    )
    return tiles.max(axis=(1, 3))


@dataclass(frozen=True, eq=False)
class Cell:
    level: int
    row: int
    col: int
    patches: np.ndarray  # flat row-major patch indices
    centroid: tuple[float, float]  # (x, y) in patch units

    @property
    def patch_count(self) -> int:
        return int(self.patches.size)


@dataclass(frozen=True, eq=False)
class GridCellPyramid:
    """Spatial pyramid of cells over a ``rows x cols`` patch grid.

    Nodes are numbered level by level, row-major within a level.  ``edges``
    holds every undirected link once as ``(i, j)`` with ``i < j``: 4-neighbours
    within a level followed by parent/child links.
    """

    rows: int
    cols: int
    cells: tuple[Cell, ...]
    level_offsets: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    parent: tuple[int, ...]  # -1 for the root

    @property
    def levels(self) -> int:
        return len(self.level_offsets)

    def level_cells(self, level: int) -> tuple[Cell, ...]:
        lo = self.level_offsets[level]
        return self.cells[lo : lo + 4**level]

    def leaf_of_patch(self) -> np.ndarray:
        """Node index of the finest-level cell containing each patch (row-major)."""
        leaf = np.full(self.rows * self.cols, -1, dtype=np.int64)
        lo = self.level_offsets[-1]
        for i, cell in enumerate(self.level_cells(self.levels - 1)):
            leaf[cell.patches] = lo + i
        return leaf


def cell_index(pos: np.ndarray, size: int, divisions: int) -> np.ndarray:
    return (np.asarray(pos) * divisions) // size


def build_grid_pyramid(patch_features: np.ndarray, levels: int) -> GridCellPyramid:
    """Build the cell graph over a ``(rows, cols, M)`` patch feature map.

    Level ``l`` splits the grid into ``2**l x 2**l`` cells; patch column ``c``
    goes to cell column ``floor(c * 2**l / cols)`` (rows likewise).
    """
    rows, cols = patch_features.shape[:2]
    if levels < 1:
        raise ValueError("levels must be >= 1")
    g = 2 ** (levels - 1)
    if rows < g or cols < g:
        raise ValueError(
            f"patch grid {cols}x{rows} too small for a {levels}-level pyramid"
        )
    rr, cc = np.divmod(np.arange(rows * cols), cols)
    cells: list[Cell] = []
    offsets = []
    edges = []
    parent = []
    for level in range(levels):
        n = 2**level
        offsets.append(len(cells))
        cell_r = cell_index(rr, rows, n)
        cell_c = cell_index(cc, cols, n)
        for i in range(n):
            for j in range(n):
                members = np.flatnonzero((cell_r == i) & (cell_c == j))
                centroid = (float(cc[members].mean()), float(rr[members].mean()))
                cells.append(Cell(level, i, j, members, centroid))
                parent.append(-1 if level == 0 else offsets[level - 1] + (i // 2) * (n // 2) + j // 2)
    for level in range(levels):
        n = 2**level
        lo = offsets[level]
        for i in range(n):
            for j in range(n):
                node = lo + i * n + j
                if j + 1 < n:
                    edges.append((node, node + 1))
                if i + 1 < n:
                    edges.append((node, node + n))
    for node, par in enumerate(parent):
        if par >= 0:
            edges.append((par, node))
    return GridCellPyramid(
        rows=rows,
        cols=cols,
        cells=tuple(cells),
        level_offsets=tuple(offsets),
        edges=tuple(edges),
        parent=tuple(parent),
    )
