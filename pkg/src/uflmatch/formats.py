"""On-disk formats: binary netpbm images/label maps and UFLF flow files."""

from __future__ import annotations

import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

FLOW_MAGIC = b"UFLF"
FLOW_VERSION = 1
FLOW_GRANULARITY = {"patch": 0, "pixel": 1}
_FLOW_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    """Raised for unreadable, truncated or malformed files."""


@contextmanager
def atomic_write(path: str | Path, mode: str = "wb"):
    """Write to a temporary sibling file and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _netpbm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Parse ``count`` whitespace-separated header integers after the magic."""
    pos = 2
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed netpbm header")
        out.append(int(data[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("malformed netpbm header")
    return out, pos + 1


def read_netpbm(path: str | Path) -> np.ndarray:
    """Read a binary P5 (gray) or P6 (RGB) file with maxval 255 as uint8."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"not a binary PGM/PPM file: {path}")
    (width, height, maxval), offset = _netpbm_tokens(data, 3)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255)")
    if width == 0 or height == 0:
        raise FormatError(f"zero-dimension image: {path}")
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    raster = data[offset : offset + size]
    if len(raster) != size:
        raise FormatError(f"truncated raster in {path}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr[:, :, 0].copy() if channels == 1 else arr.copy()


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Write an 8-bit P5 file. ``values`` must already be integers in [0, 255]."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError("PGM data must be 2-D")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = arr.shape
    with atomic_write(path) as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(arr.astype(np.uint8).tobytes())


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write a [0, 1] grayscale image as 8-bit PGM."""
    write_pgm(path, np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8))


def load_labels(path: str | Path) -> np.ndarray:
    """Read a label map: a P5 file whose gray value is the label id (0 = unlabeled)."""
    arr = read_netpbm(path)
    if arr.ndim != 2:
        raise FormatError(f"label map must be grayscale (P5): {path}")
    return arr.astype(np.int64)


def save_labels(path: str | Path, labels: np.ndarray) -> None:
    write_pgm(path, labels)


def write_flow(path: str | Path, u: np.ndarray, v: np.ndarray, granularity: str) -> None:
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape or u.ndim != 2:
        raise ValueError("flow components must be 2-D arrays of equal shape")
    if granularity not in FLOW_GRANULARITY:
        raise ValueError(f"unknown flow granularity {granularity!r}")
    height, width = u.shape
    body = np.empty((height, width, 2), dtype="<i4")
    body[..., 0] = u
    body[..., 1] = v
    with atomic_write(path) as fh:
        fh.write(
            _FLOW_HEADER.pack(
                FLOW_MAGIC, FLOW_VERSION, FLOW_GRANULARITY[granularity], width, height
            )
        )
        fh.write(body.tobytes())


def read_flow(path: str | Path) -> tuple[np.ndarray, np.ndarray, str]:
    """Return ``(u, v, granularity)`` from a UFLF file."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(data) < _FLOW_HEADER.size:
        raise FormatError(f"truncated flow header in {path}")
    magic, version, gran, width, height = _FLOW_HEADER.unpack_from(data)
    if magic != FLOW_MAGIC:
        raise FormatError(f"bad flow magic in {path}")
    if version != FLOW_VERSION:
        raise FormatError(f"unsupported flow version {version}")
    names = {code: name for name, code in FLOW_GRANULARITY.items()}
    if gran not in names:
        raise FormatError(f"unknown flow granularity code {gran}")
    expected = _FLOW_HEADER.size + width * height * 8
    if len(data) != expected:
        raise FormatError(
            f"flow file {path} has {len(data)} bytes, expected {expected}"
        )
    body = np.frombuffer(data, dtype="<i4", offset=_FLOW_HEADER.size)
    body = body.reshape(height, width, 2).astype(np.int64)
    return body[..., 0].copy(), body[..., 1].copy(), names[gran]
