"""Slow reference implementations shared by the unit and acceptance tests."""
import itertools
import math

import numpy as np


def brute_force_krum(X):
    """Classical Krum by exhaustive search over every m-subset containing i."""
    n = X.shape[0]
    m = math.ceil((n + 1) / 2)
    scores = []
    for i in range(n):
        best = math.inf
        for rest in itertools.combinations([j for j in range(n) if j != i], m - 1):
            s = sum(math.dist(X[i], X[j]) for j in rest)
            best = min(best, s)
        scores.append(best)
    # first minimum in index order
    return min(range(n), key=lambda i: (scores[i], i)), scores


def grid_gm(X, res=1e-4):
    """Brute-force minimizer of the sum of distances on a 2-D grid.

    A coarse grid over the bounding box is refined around its best point, each
    stage ten times finer over a window of +-20 cells, until the step is ``res``.
    """
    lo, hi = X.min(axis=0), X.max(axis=0)
    step = max((hi - lo).max() / 200, res)
    best = None
    while True:
        if best is not None:
            lo, hi = best - 20 * step, best + 20 * step
            step = max(step / 10, res)
        xs = np.arange(lo[0], hi[0] + step / 2, step)
        ys = np.arange(lo[1], hi[1] + step / 2, step)
        G = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
        obj = np.linalg.norm(G[:, None, :] - X[None], axis=2).sum(axis=1)
        best = G[np.argmin(obj)]
        if step <= res:
            return best
