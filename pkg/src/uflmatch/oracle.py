"""Brute-force reference computations used to check the fast solvers.

Written directly from the defining formulas; nothing here calls into the
production solvers.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

MAX_LABELINGS = 10**6
MAX_SUPPORTS = 10**5


def labeling_energy(data_costs, edges, labeling, translations, alpha, gamma) -> float:
    total = 0.0
    for node, lab in enumerate(labeling):
        total += float(data_costs[node][lab])
    for i, j in edges:
        ui, vi = translations[labeling[i]]
        uj, vj = translations[labeling[j]]
        total += alpha * min(abs(ui - uj) + abs(vi - vj), gamma)
    return total


def brute_force_labeling(edges, data_costs, alpha, gamma, translations):
    """Exhaustively minimize the pairwise energy.

    ``data_costs[i][l]`` is the cost of node ``i`` taking label ``l`` and
    ``translations[l]`` the ``(u, v)`` of label ``l``.  Returns
    ``(labeling, energy)`` with the lexicographically first minimizer.
    """
    nodes = len(data_costs)
    labels = len(translations)
    if labels**nodes > MAX_LABELINGS:
        raise ValueError(f"{labels}^{nodes} labelings exceeds the enumeration limit")
    best, best_e = None, math.inf
    for labeling in itertools.product(range(labels), repeat=nodes):
        e = labeling_energy(data_costs, edges, labeling, translations, alpha, gamma)
        if e < best_e:
            best, best_e = labeling, e
    return list(best), best_e


def naive_min_convolution(h, alpha, gamma, translations=None):
    """``m(t) = min_t' h(t') + alpha * min(||t - t'||_1, gamma)`` by double loop.

    ``h`` is 1-D or 2-D (rows indexed by v, columns by u); unit spacing unless
    explicit ``translations`` (same shape as ``h``, entries ``(u, v)``) are given.
    """
    h = np.asarray(h, dtype=np.float64)
    flat = h.ravel()
    if translations is None:
        if h.ndim == 1:
            coords = [(i, 0) for i in range(h.size)]
        else:
            coords = [(c, r) for r in range(h.shape[0]) for c in range(h.shape[1])]
    else:
        coords = [tuple(t) for t in np.asarray(translations).reshape(-1, 2)]
    out = np.empty(flat.size)
    for a, (ua, va) in enumerate(coords):
        best = math.inf
        for b, (ub, vb) in enumerate(coords):
            dist = abs(ua - ub) + abs(va - vb)
            pen = alpha * min(dist, gamma) if alpha != 0 else 0.0
            best = min(best, flat[b] + pen)
        out[a] = best
    return out.reshape(h.shape)


def exhaustive_omp_bound(codewords, patch, k) -> float:
    """Smallest least-squares residual norm over all size-``k`` atom supports.

    ``codewords`` holds one atom per row.
    """
    codewords = np.asarray(codewords, dtype=np.float64)
    patch = np.asarray(patch, dtype=np.float64)
    m = codewords.shape[0]
    if math.comb(m, k) > MAX_SUPPORTS:
        raise ValueError("too many supports to enumerate")
    best = math.inf
    for support in itertools.combinations(range(m), k):
        a = codewords[list(support)].T
        coef, *_ = np.linalg.lstsq(a, patch, rcond=None)
        best = min(best, float(np.linalg.norm(patch - a @ coef)))
    return best
