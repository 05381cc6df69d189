"""Hierarchical truncated-L1 matching: grid-cell MRF solved by loopy min-sum BP,
then independent patch- and pixel-layer refinements guided by the parent layer.

Translations ``t = (u, v)`` map a test node at ``(x, y)`` to ``(x + u, y + v)``
in the exemplar, in the units of the layer (patches or pixels).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from .encode import EncoderConfig, GridCellPyramid, build_grid_pyramid, encode_image, max_pool

log = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-6


@dataclass(frozen=True)
class MatchParams:
    alpha: float = 0.02
    gamma: float = 0.5
    lam: float | None = None  # data truncation; estimated per pair when None
    bp_iters: int = 20
    levels: int = 3
    candidate_stride: int = 1
    pixel_radius: int | None = None  # defaults to the pool width
    lambda_samples: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.lam is not None and not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if self.bp_iters < 1:
            raise ValueError("bp_iters must be >= 1")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.candidate_stride < 1:
            raise ValueError("candidate stride must be >= 1")
        if self.pixel_radius is not None and self.pixel_radius < 0:
            raise ValueError("pixel radius must be >= 0")


@dataclass(frozen=True)
class TranslationDomain:
    """Rectangular grid of integer translations, inclusive bounds."""

    u_min: int
    u_max: int
    v_min: int
    v_max: int
    stride: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.u_values.size == 0 or self.v_values.size == 0:
            raise ValueError("empty translation domain")

    @classmethod
    def full(cls, test_shape: tuple[int, int], exemplar_shape: tuple[int, int], stride: int = 1):
        """Every translation that maps at least one test node into the exemplar grid."""
        (rt, ct), (re, ce) = test_shape[:2], exemplar_shape[:2]
        return cls(-(ct - 1), ce - 1, -(rt - 1), re - 1, stride)

    @property
    def u_values(self) -> np.ndarray:
        s = self.stride
        return np.arange(-(-self.u_min // s) * s, self.u_max + 1, s)

    @property
    def v_values(self) -> np.ndarray:
        s = self.stride
        return np.arange(-(-self.v_min // s) * s, self.v_max + 1, s)

    @property
    def shape(self) -> tuple[int, int]:
        return self.v_values.size, self.u_values.size

    @property
    def size(self) -> int:
        nv, nu = self.shape
        return nv * nu

    def labels(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat ``(u, v)`` arrays, row-major over ``(v, u)``."""
        vv, uu = np.meshgrid(self.v_values, self.u_values, indexing="ij")
        return uu.ravel(), vv.ravel()

    def index(self, u: int, v: int) -> int:
        us, vs = self.u_values, self.v_values
        iu = np.searchsorted(us, u)
        iv = np.searchsorted(vs, v)
        if iu >= us.size or us[iu] != u or iv >= vs.size or vs[iv] != v:
            raise ValueError(f"translation ({u}, {v}) not in domain")
        return int(iv * us.size + iu)

    def tie_order(self) -> np.ndarray:
        """Label indices sorted by ``|u| + |v|``, then row-major position."""
        u, v = self.labels()
        return np.lexsort((np.arange(u.size), np.abs(u) + np.abs(v)))


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-node integer translations at one granularity.

    ``u``/``v``/``cost`` are 1-D over pyramid nodes for ``granularity="cell"``
    and ``(rows, cols)`` grids for ``"patch"`` and ``"pixel"``.  ``energy`` is
    the layer objective of this labeling.
    """

    granularity: str
    u: np.ndarray
    v: np.ndarray
    cost: np.ndarray
    energy: float = math.nan
    source: str = ""


@dataclass(frozen=True, eq=False)
class MatchResult:
    cell_flow: FlowField
    patch_flow: FlowField
    pixel_flow: FlowField | None
    energy: float
    lam: float
    lam_pixel: float | None
    timings_ms: dict[str, float] = field(default_factory=dict)

    def report(self) -> dict[str, float | str]:
        out: dict[str, float | str] = {"energy": self.energy, "lambda": self.lam}
        if self.lam_pixel is not None:
            out["lambda_pixel"] = self.lam_pixel
        out["bp_labeling"] = self.cell_flow.source
        out["patch_energy"] = self.patch_flow.energy
        if self.pixel_flow is not None:
            out["pixel_energy"] = self.pixel_flow.energy
        for stage, ms in self.timings_ms.items():
            out[f"ms_{stage}"] = ms
        return out


def _flat_features(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    return f.reshape(-1, f.shape[-1])


def estimate_lambda(
    test: np.ndarray, exemplar: np.ndarray, sample: int = 10_000, seed: int = 0
) -> float:
    """Mean L1 feature distance between random (test node, exemplar node) pairs.

    Uses every pair when there are at most ``sample`` of them.
    """
    a, b = _flat_features(test), _flat_features(exemplar)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty feature map")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    if a.shape[0] * b.shape[0] <= sample:
        return float(cdist(a, b, "cityblock").mean())
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, a.shape[0], size=sample)
    ib = rng.integers(0, b.shape[0], size=sample)
    return float(np.abs(a[ia] - b[ib]).sum(axis=1).mean())


def smoothness_term(t_i, t_j, gamma: float) -> float:
    return min(abs(t_i[0] - t_j[0]) + abs(t_i[1] - t_j[1]), gamma)


def patch_cost_volume(
    test: np.ndarray, exemplar: np.ndarray, domain: TranslationDomain, lam: float
) -> np.ndarray:
    """Untruncated L1 cost of every test patch under every translation.

    Shape ``(rows*cols, domain.size)``; translations landing outside the
    exemplar grid cost ``lam``.
    """
    rt, ct, m = test.shape
    re, ce = exemplar.shape[:2]
    if exemplar.shape[2] != m:
        raise ValueError("feature dimensions differ")
    pair = cdist(_flat_features(test), _flat_features(exemplar), "cityblock")
    us, vs = domain.u_values, domain.v_values
    vol = np.empty((rt, ct, vs.size, us.size))
    tc = np.arange(ct)[:, None, None] + us[None, None, :]
    col_ok = (tc >= 0) & (tc < ce)
    tc = np.clip(tc, 0, ce - 1)
    for r in range(rt):
        tr = r + vs[None, :, None]
        ok = col_ok & (tr >= 0) & (tr < re)
        target = np.clip(tr, 0, re - 1) * ce + tc
        src = (r * ct + np.arange(ct))[:, None, None]
        vol[r] = np.where(ok, pair[src, target], lam)
    return vol.reshape(rt * ct, vs.size * us.size)


def cell_data_term(
    cell, translation, test: np.ndarray, exemplar: np.ndarray, lam: float
) -> float:
    """Rigid-translation cost of one cell: ``min(sum_p d_p / z, lam)``.

    ``d_p`` is the L1 feature distance of patch ``p``, or ``lam`` when ``p``
    lands outside the exemplar, so a cell entirely out of bounds costs ``lam``.
    """
    u, v = translation
    re, ce = exemplar.shape[:2]
    cols = test.shape[1]
    total = 0.0
    for p in cell.patches:
        r, c = divmod(int(p), cols)
        if 0 <= r + v < re and 0 <= c + u < ce:
            total += float(np.abs(test[r, c] - exemplar[r + v, c + u]).sum())
        else:
            total += lam
    return min(total / cell.patch_count, lam)


def cell_cost_matrix(pyr: GridCellPyramid, volume: np.ndarray, lam: float) -> np.ndarray:
    out = np.empty((len(pyr.cells), volume.shape[1]))
    for i, cell in enumerate(pyr.cells):
        out[i] = volume[cell.patches].sum(axis=0)
        out[i] /= cell.patch_count
    return np.minimum(out, lam, out=out)


def _l1_sweep(f: np.ndarray, step: float, axis: int) -> None:
    g = np.moveaxis(f, axis, 0)
    if g.ndim == 1:
        g = g[:, None]
    for i in range(1, g.shape[0]):
        np.minimum(g[i], g[i - 1] + step, out=g[i])
    for i in range(g.shape[0] - 2, -1, -1):
        np.minimum(g[i], g[i + 1] + step, out=g[i])


def dt_message(h: np.ndarray, alpha: float, gamma: float, stride: int = 1) -> np.ndarray:
    """Min-convolution ``m(t) = min_t' h(t') + alpha * min(||t - t'||_1, gamma)``.

    ``h`` is 1-D over a line of translations or ``(..., nv, nu)`` over a
    rectangular domain (leading axes are independent messages); neighbouring
    labels are ``stride`` apart.  Linear time: one forward/backward L1 sweep
    per axis, then truncation against ``min h + alpha * gamma``.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.size == 0:
        raise ValueError("empty translation domain")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite message costs")
    axes = (-1,) if h.ndim == 1 else (-1, -2)
    f = h.copy()
    step = alpha * stride
    for ax in axes:
        _l1_sweep(f, step, ax)
    if math.isfinite(gamma):
        floor = h.min(axis=axes, keepdims=True) + alpha * gamma
        np.minimum(f, floor, out=f)
    return f


def argmin_tiebreak(costs: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Argmin over the last axis; exact ties go to the earliest label in ``order``."""
    return order[np.argmin(costs[..., order], axis=-1)]


def mrf_energy(
    unary: np.ndarray,
    edges,
    labels: np.ndarray,
    domain: TranslationDomain,
    alpha: float,
    gamma: float,
) -> float:
    """Sum of unary costs plus ``alpha * min(||t_i - t_j||_1, gamma)`` over edges."""
    u, v = domain.labels()
    total = float(unary[np.arange(unary.shape[0]), labels].sum())
    for i, j in edges:
        li, lj = labels[i], labels[j]
        total += alpha * min(abs(u[li] - u[lj]) + abs(v[li] - v[lj]), gamma)
    return total


def min_sum_bp(
    unary: np.ndarray,
    edges,
    domain: TranslationDomain,
    alpha: float,
    gamma: float,
    iters: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Synchronous min-sum loopy BP with distance-transform messages.

    ``unary`` is ``(nodes, domain.size)``.  Messages are min-normalized after
    every update.  Returns ``(labels, beliefs)`` with tie-broken argmin labels.
    """
    nodes = unary.shape[0]
    nv, nu = domain.shape
    edges = [tuple(e) for e in edges]
    directed = edges + [(j, i) for i, j in edges]
    n_e = len(edges)
    incoming: list[list[int]] = [[] for _ in range(nodes)]
    for e, (_, dst) in enumerate(directed):
        incoming[dst].append(e)
    msgs = np.zeros((len(directed), nv, nu))
    grid = unary.reshape(nodes, nv, nu)
    if directed:
        for _ in range(iters):
            h = np.empty_like(msgs)
            for e, (src, _) in enumerate(directed):
                back = e + n_e if e < n_e else e - n_e
                acc = grid[src].copy()
                for f in incoming[src]:
                    if f != back:
                        acc += msgs[f]
                h[e] = acc
            msgs = dt_message(h, alpha, gamma, domain.stride)
            msgs -= msgs.min(axis=(1, 2), keepdims=True)
    beliefs = grid.copy()
    for n in range(nodes):
        for f in incoming[n]:
            beliefs[n] += msgs[f]
    beliefs = beliefs.reshape(nodes, nv * nu)
    return argmin_tiebreak(beliefs, domain.tie_order()), beliefs


def solve_mrf(
    unary: np.ndarray,
    edges,
    domain: TranslationDomain,
    alpha: float,
    gamma: float,
    iters: int,
) -> tuple[np.ndarray, float, str]:
    """Minimize the pyramid energy; returns ``(labels, energy, source)``.

    The BP labeling is kept unless the all-zero or the independent per-node
    argmin labeling has strictly lower energy (BP carries no guarantee on
    loopy graphs).
    """
    if not np.all(np.isfinite(unary)):
        raise ValueError("non-finite data term")
    order = domain.tie_order()
    bp_labels, _ = min_sum_bp(unary, edges, domain, alpha, gamma, iters)
    candidates = [("bp", bp_labels)]
    if domain.u_min <= 0 <= domain.u_max and domain.v_min <= 0 <= domain.v_max:
        candidates.append(("zero", np.full(unary.shape[0], domain.index(0, 0))))
    candidates.append(("independent", argmin_tiebreak(unary, order)))
    best = None
    for name, labels in candidates:
        e = mrf_energy(unary, edges, labels, domain, alpha, gamma)
        if best is None or e < best[1]:
            best = (labels, e, name)
    if best[2] != "bp":
        log.debug("BP labeling replaced by %s labeling", best[2])
    return best


def solve_grid_layer(
    pyr: GridCellPyramid,
    pf_test: np.ndarray,
    pf_ex: np.ndarray,
    domain: TranslationDomain,
    params: MatchParams,
    volume: np.ndarray | None = None,
) -> FlowField:
    if params.lam is None:
        raise ValueError("lambda must be set before solving")
    if volume is None:
        volume = patch_cost_volume(pf_test, pf_ex, domain, params.lam)
    unary = cell_cost_matrix(pyr, volume, params.lam)
    labels, energy, source = solve_mrf(
        unary, pyr.edges, domain, params.alpha, params.gamma, params.bp_iters
    )
    u, v = domain.labels()
    return FlowField(
        granularity="cell",
        u=u[labels],
        v=v[labels],
        cost=unary[np.arange(len(labels)), labels],
        energy=energy,
        source=source,
    )


def solve_patch_layer(
    cell_flow: FlowField,
    pyr: GridCellPyramid,
    pf_test: np.ndarray,
    pf_ex: np.ndarray,
    domain: TranslationDomain,
    params: MatchParams,
    volume: np.ndarray | None = None,
) -> FlowField:
    """Per patch: ``argmin_t min(d(t), lam) + alpha * min(||t - t_parent||_1, gamma)``."""
    if params.lam is None:
        raise ValueError("lambda must be set before solving")
    if volume is None:
        volume = patch_cost_volume(pf_test, pf_ex, domain, params.lam)
    leaf = pyr.leaf_of_patch()
    if np.any(leaf < 0):
        raise ValueError("patch without a parent cell")
    pu, pv = cell_flow.u[leaf], cell_flow.v[leaf]
    u, v = domain.labels()
    order = domain.tie_order()
    n = volume.shape[0]
    best = np.empty(n, dtype=np.int64)
    cost = np.empty(n)
    chunk = max(1, (1 << 22) // max(1, domain.size))
    for lo in range(0, n, chunk):
        sl = slice(lo, lo + chunk)
        dist = np.abs(u[None, :] - pu[sl, None]) + np.abs(v[None, :] - pv[sl, None])
        c = np.minimum(volume[sl], params.lam) + params.alpha * np.minimum(dist, params.gamma)
        best[sl] = argmin_tiebreak(c, order)
        cost[sl] = c[np.arange(c.shape[0]), best[sl]]
    shape = (pyr.rows, pyr.cols)
    return FlowField(
        granularity="patch",
        u=u[best].reshape(shape),
        v=v[best].reshape(shape),
        cost=cost.reshape(shape),
        energy=float(cost.sum()),
    )


# Target number of feature values gathered at once in the pixel search.
PIXEL_BLOCK = 1 << 16


def solve_pixel_layer(
    patch_flow: FlowField,
    pixf_test: np.ndarray,
    pixf_ex: np.ndarray,
    params: MatchParams,
    radius: int,
    pool_width: int,
    lam: float,
) -> FlowField:
    """Per pixel: search ``+-radius`` around the parent patch translation (in pixels).

    Pixels in the dropped right/bottom pooling margin use the nearest patch
    as parent.  Cost is ``min(d(t), lam) + alpha * min(||t - t_parent||_1,
    gamma * pool_width)``; out-of-bounds targets cost ``lam`` plus smoothness.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    h, w, m = pixf_test.shape
    he, we = pixf_ex.shape[:2]
    if pixf_ex.shape[2] != m:
        raise ValueError("feature dimensions differ")
    rows, cols = patch_flow.u.shape
    py = np.minimum(np.arange(h) // pool_width, rows - 1)
    px = np.minimum(np.arange(w) // pool_width, cols - 1)
    up = patch_flow.u[py[:, None], px[None, :]] * pool_width
    vp = patch_flow.v[py[:, None], px[None, :]] * pool_width
    gamma_pix = params.gamma * pool_width
    se = pixf_ex.reshape(he * we, m)

    best_cost = np.full((h, w), np.inf)
    best_u = np.zeros((h, w), dtype=np.int64)
    best_v = np.zeros((h, w), dtype=np.int64)
    # Row blocks keep the gathered exemplar features cache-sized.
    block = max(1, PIXEL_BLOCK // max(1, w * m))
    buf = np.empty((min(block, h) * w, m))
    for y0 in range(0, h, block):
        y1 = min(h, y0 + block)
        n = (y1 - y0) * w
        st = pixf_test[y0:y1].reshape(n, m)
        gather = buf[:n]
        yy, xx = np.mgrid[y0:y1, 0:w]
        bc, bu, bv = best_cost[y0:y1], best_u[y0:y1], best_v[y0:y1]
        for dv in range(-radius, radius + 1):
            for du in range(-radius, radius + 1):
                u, v = up[y0:y1] + du, vp[y0:y1] + dv
                ty, tx = yy + v, xx + u
                ok = (ty >= 0) & (ty < he) & (tx >= 0) & (tx < we)
                target = (np.clip(ty, 0, he - 1) * we + np.clip(tx, 0, we - 1)).ravel()
                np.take(se, target, axis=0, out=gather)
                np.subtract(gather, st, out=gather)
                np.abs(gather, out=gather)
                d = gather.sum(axis=1).reshape(y1 - y0, w)
                d = np.where(ok, np.minimum(d, lam), lam)
                c = d + params.alpha * min(abs(du) + abs(dv), gamma_pix)
                l1, bl1 = np.abs(u) + np.abs(v), np.abs(bu) + np.abs(bv)
                earlier = (l1 < bl1) | ((l1 == bl1) & ((v < bv) | ((v == bv) & (u < bu))))
                take = (c < bc) | ((c == bc) & earlier)
                np.copyto(bc, c, where=take)
                np.copyto(bu, u, where=take)
                np.copyto(bv, v, where=take)
    return FlowField(
        granularity="pixel",
        u=best_u,
        v=best_v,
        cost=best_cost,
        energy=float(best_cost.sum()),
    )


def match(
    test: np.ndarray,
    exemplar: np.ndarray,
    dictionary,
    encoder: EncoderConfig | None = None,
    params: MatchParams | None = None,
    pixel: bool = True,
) -> MatchResult:
    """Full pipeline: encode, pool, grid-cell BP, patch layer, optional pixel layer."""
    encoder = encoder or EncoderConfig()
    params = params or MatchParams()
    timings: dict[str, float] = {}

    def lap(stage, t0):
        timings[stage] = (time.perf_counter() - t0) * 1e3
        return time.perf_counter()

    t0 = time.perf_counter()
    sf_test = encode_image(dictionary, test, encoder)
    sf_ex = encode_image(dictionary, exemplar, encoder)
    t0 = lap("encode", t0)
    pf_test = max_pool(sf_test, encoder.pool_width)
    pf_ex = max_pool(sf_ex, encoder.pool_width)
    pyr = build_grid_pyramid(pf_test, params.levels)
    t0 = lap("pool", t0)

    lam = params.lam
    if lam is None:
        lam = estimate_lambda(pf_test, pf_ex, params.lambda_samples, params.seed)
    lam = max(lam, LAMBDA_FLOOR)
    solved = replace(params, lam=lam)
    domain = TranslationDomain.full(pf_test.shape, pf_ex.shape, params.candidate_stride)
    volume = patch_cost_volume(pf_test, pf_ex, domain, lam)
    cell_flow = solve_grid_layer(pyr, pf_test, pf_ex, domain, solved, volume)
    t0 = lap("grid", t0)
    patch_flow = solve_patch_layer(cell_flow, pyr, pf_test, pf_ex, domain, solved, volume)
    t0 = lap("patch", t0)

    pixel_flow = None
    lam_pix = None
    if pixel:
        lam_pix = max(
            estimate_lambda(sf_test, sf_ex, params.lambda_samples, params.seed), LAMBDA_FLOOR
        )
        radius = encoder.pool_width if params.pixel_radius is None else params.pixel_radius
        pixel_flow = solve_pixel_layer(
            patch_flow, sf_test, sf_ex, solved, radius, encoder.pool_width, lam_pix
        )
        lap("pixel", t0)
    return MatchResult(
        cell_flow=cell_flow,
        patch_flow=patch_flow,
        pixel_flow=pixel_flow,
        energy=cell_flow.energy,
        lam=lam,
        lam_pixel=lam_pix,
        timings_ms=timings,
    )
