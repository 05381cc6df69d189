"""Codebook learning (K-means, K-SVD, random sampling) and the UFLDICT file format."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .encode import omp_codes
from .formats import FormatError, atomic_write
from .preprocess import WhiteningTransform

log = logging.getLogger(__name__)

METHODS = ("kmeans", "ksvd", "random")
DICT_MAGIC = "UFLDICT"
DICT_VERSION = 1

_CHUNK = 1 << 15


@dataclass(frozen=True, eq=False)
class Dictionary:
    """``M`` unit-norm codewords (rows of ``codewords``) plus the whitening used at fit time.

    ``objective`` holds the per-iteration training objective; it is not persisted.
    """

    codewords: np.ndarray
    method: str
    whitening: WhiteningTransform
    objective: tuple[float, ...] = field(default=())

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]

    @property
    def patch_width(self) -> int:
        w = math.isqrt(self.dim)
        if w * w != self.dim:
            raise ValueError(f"dictionary dimension {self.dim} is not a square patch")
        return w


def _check_batch(batch: np.ndarray, m: int) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("patch batch must be 2-D")
    if m < 2:
        raise ValueError("dictionary size must be >= 2")
    if x.shape[0] < m:
        raise ValueError(f"need at least {m} patches, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("patch batch contains non-finite values")
    return x


def _whitening_or_identity(whitening: WhiteningTransform | None, dim: int) -> WhiteningTransform:
    if whitening is None:
        return WhiteningTransform.identity(dim)
    if whitening.dim != dim:
        raise ValueError("whitening dimension does not match the batch")
    return whitening


def _sq_dist_to(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x - c
    return np.einsum("ij,ij->i", diff, diff)


def _assign(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centre labels and squared distances, chunked over rows."""
    labels = np.empty(x.shape[0], dtype=np.int64)
    d2 = np.empty(x.shape[0])
    c_sq = np.einsum("ij,ij->i", centers, centers)
    for start in range(0, x.shape[0], _CHUNK):
        xs = x[start : start + _CHUNK]
        dist = c_sq[None, :] - 2.0 * (xs @ centers.T)
        lab = np.argmin(dist, axis=1)
        labels[start : start + _CHUNK] = lab
        # exact squared distance to the chosen centre
        d2[start : start + _CHUNK] = _sq_dist_to(xs, centers[lab])
    return labels, d2


def kmeans_plus_plus(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new centre drawn with probability proportional to D(x)^2."""
    n = x.shape[0]
    centers = np.empty((m, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = _sq_dist_to(x, centers[0])
    for j in range(1, m):
        cum = np.cumsum(d2)
        total = cum[-1]
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(np.searchsorted(cum, rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        centers[j] = x[pick]
        np.minimum(d2, _sq_dist_to(x, centers[j]), out=d2)
    return centers


def lloyd(
    x: np.ndarray, centers: np.ndarray, iters: int
) -> tuple[np.ndarray, list[float]]:
    """Run ``iters`` Lloyd updates from ``centers``.

    Returns the final (unnormalized) centres and the sum of squared errors
    measured before each update and once after the last one.
    """
    m = centers.shape[0]
    centers = centers.copy()
    history = []
    rows = np.arange(x.shape[0])
    for _ in range(iters):
        labels, d2 = _assign(x, centers)
        history.append(float(d2.sum()))
        onehot = sparse.csr_matrix((np.ones(x.shape[0]), (labels, rows)), shape=(m, x.shape[0]))
        sums = np.asarray(onehot @ x)
        counts = np.bincount(labels, minlength=m)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(np.argmax(d2))
            centers[j] = x[far]
            d2[far] = -1.0
    _, d2 = _assign(x, centers)
    history.append(float(d2.sum()))
    return centers, history


def _normalize_rows(codewords: np.ndarray, x: np.ndarray) -> np.ndarray:
    """L2-normalize codewords; (near-)zero ones are first reseeded to the farthest point."""
    out = codewords.copy()
    norms = np.linalg.norm(out, axis=1)
    dead = np.flatnonzero(norms < 1e-12)
    if dead.size:
        _, d2 = _assign(x, out)
        d2[np.einsum("ij,ij->i", x, x) == 0.0] = -1.0
        for j in dead:
            far = int(np.argmax(d2))
            if d2[far] < 0:
                raise ValueError("cannot reseed a zero codeword: too few nonzero patches")
            out[j] = x[far]
            d2[far] = -1.0
        norms = np.linalg.norm(out, axis=1)
    return out / norms[:, None]


def learn_kmeans(
    batch: np.ndarray,
    m: int,
    iters: int,
    seed: int,
    whitening: WhiteningTransform | None = None,
) -> Dictionary:
    x = _check_batch(batch, m)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    init = kmeans_plus_plus(x, m, rng)
    centers, history = lloyd(x, init, iters)
    log.info("k-means: SSE %.6g -> %.6g", history[0], history[-1])
    return Dictionary(
        codewords=_normalize_rows(centers, x),
        method="kmeans",
        whitening=_whitening_or_identity(whitening, x.shape[1]),
        objective=tuple(history),
    )


def sample_codeword_rows(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``m`` distinct nonzero rows, sampled without replacement."""
    nonzero = np.flatnonzero(np.einsum("ij,ij->i", x, x) > 0.0)
    if nonzero.size < m:
        raise ValueError(f"need {m} nonzero patches, batch has {nonzero.size}")
    return rng.choice(nonzero, size=m, replace=False)


def learn_random(
    batch: np.ndarray, m: int, seed: int, whitening: WhiteningTransform | None = None
) -> Dictionary:
    x = _check_batch(batch, m)
    rng = np.random.default_rng(seed)
    rows = x[sample_codeword_rows(x, m, rng)]
    return Dictionary(
        codewords=rows / np.linalg.norm(rows, axis=1, keepdims=True),
        method="random",
        whitening=_whitening_or_identity(whitening, x.shape[1]),
    )


def _code_matrix(idx: np.ndarray, coef: np.ndarray, m: int) -> sparse.csr_matrix:
    n = idx.shape[0]
    used = idx >= 0
    rows = np.broadcast_to(np.arange(n)[:, None], idx.shape)[used]
    return sparse.csr_matrix((coef[used], (rows, idx[used])), shape=(n, m))


def learn_ksvd(
    batch: np.ndarray,
    m: int,
    k: int,
    iters: int,
    seed: int,
    whitening: WhiteningTransform | None = None,
) -> Dictionary:
    """K-SVD with OMP-k coding and rank-1 atom updates.

    A sample keeps its previous code when fresh OMP coding reconstructs it
    worse, which makes the objective non-increasing across iterations.
    """
    x = _check_batch(batch, m)
    if not 1 <= k <= m:
        raise ValueError(f"sparsity k={k} must lie in [1, {m}]")
    if iters < 0:
        raise ValueError("iters must be >= 0")
    rng = np.random.default_rng(seed)
    rows = x[sample_codeword_rows(x, m, rng)]
    d = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    white = _whitening_or_identity(whitening, x.shape[1])
    if iters == 0:
        return Dictionary(codewords=d, method="ksvd", whitening=white)

    codes = _code_matrix(*omp_codes(d, x, k), m)
    resid = x - codes @ d
    history = [float(np.einsum("ij,ij->", resid, resid))]
    for it in range(iters):
        if it > 0:
            fresh = _code_matrix(*omp_codes(d, x, k), m)
            fresh_resid = x - fresh @ d
            better = np.einsum("ij,ij->i", fresh_resid, fresh_resid) < np.einsum(
                "ij,ij->i", resid, resid
            )
            keep = sparse.diags((~better).astype(np.float64))
            take = sparse.diags(better.astype(np.float64))
            codes = (take @ fresh + keep @ codes).tocsr()
            codes.eliminate_zeros()
            resid = np.where(better[:, None], fresh_resid, resid)

        csc = codes.tocsc()
        csc.sort_indices()
        err = np.einsum("ij,ij->i", resid, resid)
        for j in range(m):
            lo, hi = csc.indptr[j], csc.indptr[j + 1]
            omega = csc.indices[lo:hi]
            if omega.size == 0:
                worst = int(np.argmax(err))
                norm = np.linalg.norm(x[worst])
                if err[worst] <= 0.0 or norm == 0.0:
                    continue
                d[j] = x[worst] / norm
                err -= (resid @ d[j]) ** 2
                err[worst] = -np.inf
                continue
            coeffs = csc.data[lo:hi]
            e = resid[omega] + np.outer(coeffs, d[j])
            u, s, vt = np.linalg.svd(e, full_matrices=False)
            d[j] = vt[0]
            csc.data[lo:hi] = u[:, 0] * s[0]
            resid[omega] = e - np.outer(csc.data[lo:hi], d[j])
            err[omega] = np.einsum("ij,ij->i", resid[omega], resid[omega])
        codes = csc.tocsr()
        history.append(float(np.einsum("ij,ij->", resid, resid)))
        log.debug("k-svd iteration %d: objective %.6g", it + 1, history[-1])
    return Dictionary(codewords=d, method="ksvd", whitening=white, objective=tuple(history))


def learn_dictionary(
    batch: np.ndarray,
    m: int,
    method: str,
    seed: int,
    whitening: WhiteningTransform | None = None,
    iters: int = 10,
    k: int = 10,
) -> Dictionary:
    if method == "kmeans":
        return learn_kmeans(batch, m, iters, seed, whitening)
    if method == "ksvd":
        return learn_ksvd(batch, m, min(k, m), iters, seed, whitening)
    if method == "random":
        return learn_random(batch, m, seed, whitening)
    raise ValueError(f"unknown dictionary method {method!r}")


def _fmt(values: np.ndarray) -> str:
    return " ".join("%.17g" % v for v in values)


def save_dictionary(d: Dictionary, path: str | Path) -> None:
    m, n = d.codewords.shape
    if d.whitening.dim != n:
        raise ValueError("whitening dimension does not match codewords")
    lines = [f"{DICT_MAGIC} {DICT_VERSION} {m} {n} {d.method} {'%.17g' % d.whitening.epsilon}"]
    lines.append(_fmt(d.whitening.mean))
    lines.extend(_fmt(row) for row in d.whitening.matrix)
    lines.extend(_fmt(row) for row in d.codewords)
    with atomic_write(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_row(line: str, n: int, what: str) -> np.ndarray:
    try:
        row = np.array([float(tok) for tok in line.split()])
    except ValueError as exc:
        raise FormatError(f"non-numeric value in {what}") from exc
    if row.shape != (n,):
        raise FormatError(f"{what} has {row.size} values, expected {n}")
    if not np.all(np.isfinite(row)):
        raise FormatError(f"non-finite value in {what}")
    return row


def load_dictionary(path: str | Path) -> Dictionary:
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot read dictionary {path}: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    header = lines[0].split() if lines else []
    if len(header) != 6 or header[0] != DICT_MAGIC:
        raise FormatError(f"bad dictionary magic in {path}")
    try:
        version, m, n = int(header[1]), int(header[2]), int(header[3])
        epsilon = float(header[5])
    except ValueError as exc:
        raise FormatError("malformed dictionary header") from exc
    if version != DICT_VERSION:
        raise FormatError(f"unsupported dictionary version {version}")
    method = header[4]
    if method not in METHODS:
        raise FormatError(f"unknown dictionary method {method!r}")
    if m < 2 or n < 1 or not math.isfinite(epsilon):
        raise FormatError("invalid dictionary dimensions")
    if len(lines) != 1 + 1 + n + m:
        raise FormatError(f"dictionary has {len(lines)} lines, expected {2 + n + m}")
    mean = _parse_row(lines[1], n, "whitening mean")
    matrix = np.stack([_parse_row(lines[2 + i], n, "whitening matrix") for i in range(n)])
    codewords = np.stack([_parse_row(lines[2 + n + j], n, "codeword") for j in range(m)])
    if np.any(np.abs(np.linalg.norm(codewords, axis=1) - 1.0) > 1e-6):
        raise FormatError("codewords must have unit L2 norm")
    return Dictionary(
        codewords=codewords,
        method=method,
        whitening=WhiteningTransform(mean=mean, matrix=matrix, epsilon=epsilon),
    )
