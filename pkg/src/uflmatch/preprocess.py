"""Image loading, patch sampling, contrast normalization and ZCA whitening.

Images are 2-D ``float64`` arrays of luminance in [0, 1] (row-major, shape
``(height, width)``).  Patch batches are ``(N, n)`` arrays whose rows are
flattened ``w_p x w_p`` patches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .formats import FormatError, read_netpbm

log = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# Contrast normalization regularizer, expressed on the 0-255 intensity scale.
VARIANCE_REGULARIZER = 10.0
DEFAULT_WHITENING_EPSILON = 0.1


@dataclass(frozen=True)
class WhiteningTransform:
    mean: np.ndarray
    matrix: np.ndarray
    epsilon: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def identity(cls, dim: int) -> WhiteningTransform:
        return cls(mean=np.zeros(dim), matrix=np.eye(dim), epsilon=0.0)


def _to_luminance(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 3:
        if raw.shape[2] in (2, 4):
            raw = raw[:, :, :-1]  # drop alpha
        if raw.shape[2] == 1:
            raw = raw[:, :, 0]
        else:
            raw = raw[:, :, :3] @ LUMA_WEIGHTS
    return np.clip(raw / 255.0, 0.0, 1.0)


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG or binary PGM/PPM file as a grayscale image in [0, 1]."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    if head[:2] in (b"P5", b"P6"):
        raw = read_netpbm(path)
    elif head.startswith(b"\x89PNG\r\n\x1a\n"):
        from PIL import Image as PILImage

        try:
            with PILImage.open(path) as im:
                if im.mode not in ("L", "RGB", "RGBA", "LA"):
                    im = im.convert("RGB")
                raw = np.asarray(im)
        except Exception as exc:
            raise FormatError(f"cannot decode PNG {path}: {exc}") from exc
    else:
        raise FormatError(f"unsupported image format: {path}")
    if raw.shape[0] == 0 or raw.shape[1] == 0:
        raise FormatError(f"zero-dimension image: {path}")
    return _to_luminance(raw)


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def extract_random_patches(
    images: list[np.ndarray], count: int, patch_width: int, seed: int
) -> np.ndarray:
    """Sample ``count`` patches uniformly over all (image, position) pairs.

    An image is chosen with probability proportional to its number of valid
    top-left positions, so every valid patch in the collection is equally
    likely.
    """
    if count < 1:
        raise ValueError("patch count must be >= 1")
    if patch_width < 1:
        raise ValueError("patch width must be >= 1")
    if not images:
        raise ValueError("no images to sample from")
    images = [validate_image(im) for im in images]
    positions = []
    for im in images:
        h, w = im.shape
        if h < patch_width or w < patch_width:
            raise ValueError(
                f"image of size {w}x{h} is smaller than patch width {patch_width}"
            )
        positions.append((h - patch_width + 1) * (w - patch_width + 1))
    positions = np.array(positions, dtype=np.int64)

    rng = np.random.default_rng(seed)
    # a single integer draw over the concatenated position space
    flat = rng.integers(0, positions.sum(), size=count)
    bounds = np.cumsum(positions)
    which = np.searchsorted(bounds, flat, side="right")
    local = flat - np.concatenate(([0], bounds[:-1]))[which]

    out = np.empty((count, patch_width * patch_width))
    for i, im in enumerate(images):
        sel = np.flatnonzero(which == i)
        if sel.size == 0:
            continue
        ncols = im.shape[1] - patch_width + 1
        ys, xs = np.divmod(local[sel], ncols)
        windows = sliding_window_view(im, (patch_width, patch_width))
        out[sel] = windows[ys, xs].reshape(sel.size, -1)
    return out


def normalize_patches(batch: np.ndarray, copy: bool = True) -> np.ndarray:
    """Per-patch brightness/contrast normalization.

    Each row is centred and divided by ``sqrt(var + 10/255**2)``; the
    regularizer corresponds to ``var + 10`` on the 0-255 scale and maps
    constant patches to zero.
    """
    x = np.array(batch, dtype=np.float64, copy=copy)
    if x.ndim != 2:
        raise ValueError("patch batch must be 2-D")
    x -= x.mean(axis=1, keepdims=True)
    var = np.einsum("ij,ij->i", x, x) / x.shape[1]
    x /= np.sqrt(var + VARIANCE_REGULARIZER / 255.0**2)[:, None]
    return x


def fit_whitening(
    batch: np.ndarray, epsilon: float = DEFAULT_WHITENING_EPSILON
) -> WhiteningTransform:
    """Fit a ZCA transform ``V (L + eps I)^(-1/2) V^T`` to the batch covariance."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("patch batch must be a non-empty 2-D array")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite patch values; covariance undefined")
    n_samples, dim = x.shape
    if n_samples <= dim:
        log.warning("whitening fit on %d samples of dimension %d", n_samples, dim)
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / n_samples
    if not np.all(np.isfinite(cov)):
        raise ValueError("non-finite patch covariance")
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    with np.errstate(divide="ignore"):
        scale = 1.0 / np.sqrt(evals + epsilon)
    if not np.all(np.isfinite(scale)):
        raise ValueError("singular covariance; use epsilon > 0")
    matrix = (evecs * scale) @ evecs.T
    matrix = 0.5 * (matrix + matrix.T)
    return WhiteningTransform(mean=mean, matrix=matrix, epsilon=float(epsilon))


def apply_whitening(transform: WhiteningTransform, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != transform.dim:
        raise ValueError(
            f"patch dimension {x.shape[1]} does not match transform dimension {transform.dim}"
        )
    return (x - transform.mean) @ transform.matrix.T
