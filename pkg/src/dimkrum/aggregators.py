"""Baseline robust aggregators: FedAvg, coordinate median, RFA, CRFL, FoolsGold, ResidualBase."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dimkrum.core import (
    AggregationOutcome,
    ClientRoundSet,
    ContractError,
    DimensionMismatch,
    ServerState,
    as_update,
    weighted_aggregate,
)

GM_TOL = 1e-9
GM_MAX_ITER = 1000
_SINGULAR_EPS = 1e-12
_PERTURB = 1e-9


def _uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def fedavg(rs: ClientRoundSet) -> AggregationOutcome:
    p = _uniform(rs.n)
    return AggregationOutcome(weighted_aggregate(rs, p), p)


def coordinate_median(rs: ClientRoundSet) -> AggregationOutcome:
    # np.median averages the two central order statistics for even n
    X = rs.updates[rs.id_order]
    return AggregationOutcome(np.median(X, axis=0), _uniform(rs.n))


def gm_objective(y: np.ndarray, X: np.ndarray) -> float:
    return float(np.linalg.norm(X - y, axis=1).sum())


def _subgradient_escape(y, X, hit):
    """At data point ``X[hit]``: return None if optimal, else a nudged iterate.

    ``X[hit]`` minimizes the sum of distances iff the pull of the remaining
    points has norm <= 1 (the weight of the coincident point).
    """
    others = np.delete(X, hit, axis=0)
    diffs = others - y
    norms = np.linalg.norm(diffs, axis=1)
    keep = norms > _SINGULAR_EPS
    pull = (diffs[keep] / norms[keep, None]).sum(axis=0)
    mult = 1 + int((~keep).sum())  # duplicates of the data point share its weight
    g = np.linalg.norm(pull)
    if g <= mult:
        return None
    return y + _PERTURB * pull / g


def weiszfeld(X: np.ndarray, tol: float = GM_TOL, max_iter: int = GM_MAX_ITER, trace: list | None = None):
    """Geometric median of the rows of ``X`` by Weiszfeld iteration.

    Starts at the coordinate mean.  If ``trace`` is given, the objective of
    every iterate (starting point included) is appended to it.
    """
    X = np.asarray(X, dtype=np.float64)
    y = X.mean(axis=0)
    best_y, best_obj = y, gm_objective(y, X)
    if trace is not None:
        trace.append(best_obj)
    for _ in range(max_iter):
        dist = np.linalg.norm(X - y, axis=1)
        close = np.flatnonzero(dist < _SINGULAR_EPS)
        if close.size:
            nudged = _subgradient_escape(y, X, int(close[0]))
            if nudged is None:
                return y
            y_new = nudged
        else:
            w = 1.0 / dist
            y_new = (w[:, None] * X).sum(axis=0) / w.sum()
        obj = gm_objective(y_new, X)
        if trace is not None:
            trace.append(obj)
        step = np.linalg.norm(y_new - y)
        y = y_new
        if obj <= best_obj:
            best_y, best_obj = y, obj
        if step < tol:
            break
    return best_y


def geometric_median(rs: ClientRoundSet, tol: float = GM_TOL, max_iter: int = GM_MAX_ITER) -> AggregationOutcome:
    if tol <= 0 or max_iter < 1:
        raise ContractError("tol must be positive and max_iter >= 1")
    y = weiszfeld(rs.updates[rs.id_order], tol, max_iter)
    return AggregationOutcome(y, _uniform(rs.n))


@dataclass(frozen=True)
class CrflConfig:
    noise_std: float = 0.01
    bound_slope: float = 0.05
    bound_intercept: float = 2.0

    def __post_init__(self):
        if self.noise_std <= 0 or self.bound_slope <= 0 or self.bound_intercept <= 0:
            raise ContractError("CRFL noise_std, bound_slope and bound_intercept must be positive")

    def bound(self, t: int) -> float:
        return self.bound_slope * t + self.bound_intercept


def crfl_postprocess(
    agg,
    server: ServerState,
    cfg: CrflConfig,
    rng: np.random.Generator,
    is_last_round: bool,
    t: int | None = None,
) -> np.ndarray:
    """Noise the aggregate, then shrink ``w + agg`` onto the L2 ball of radius ``slope*t + intercept``.

    Returns the effective aggregate (projected weights minus current weights).
    ``t`` defaults to the round being produced, ``server.round + 1``.
    """
    agg = as_update(agg, server.weights.shape[0])
    if is_last_round:
        return agg.copy()
    t = server.round + 1 if t is None else t
    noisy = agg + rng.normal(0.0, cfg.noise_std, size=agg.shape[0])
    cand = server.weights + noisy
    norm = np.linalg.norm(cand)
    bound = cfg.bound(t)
    if norm > bound:
        cand = cand * (bound / norm)
    return cand - server.weights


@dataclass
class FoolsGoldHistory:
    cumulative: np.ndarray

    @classmethod
    def zeros(cls, n: int, d: int) -> "FoolsGoldHistory":
        return cls(np.zeros((n, d)))

    def updated(self, rs: ClientRoundSet) -> "FoolsGoldHistory":
        if self.cumulative.shape != rs.updates.shape:
            raise DimensionMismatch(f"history shape {self.cumulative.shape} != round shape {rs.updates.shape}")
        return FoolsGoldHistory(self.cumulative + rs.updates)


def _cosine_matrix(H: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(H, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = H / safe[:, None]
    cs = U @ U.T
    cs[norms == 0, :] = 0.0
    cs[:, norms == 0] = 0.0
    return cs


def foolsgold_p(history: np.ndarray) -> np.ndarray:
    """FoolsGold client weights from cumulative update histories."""
    n = history.shape[0]
    cs = _cosine_matrix(history)
    np.fill_diagonal(cs, 0.0)
    maxcs = cs.max(axis=1)
    # pardoning: scale down similarity towards clients that look less sybil-like
    for i in range(n):
        for j in range(n):
            if i != j and maxcs[i] < maxcs[j]:
                cs[i, j] *= maxcs[i] / maxcs[j]
    wv = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    if wv.max() == 0:
        return _uniform(n)
    wv = wv / wv.max()
    wv[wv == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        wv = np.log(wv / (1.0 - wv)) + 0.5
    wv = np.clip(np.nan_to_num(wv, nan=0.0, posinf=1.0, neginf=0.0), 0.0, 1.0)
    if wv.sum() == 0:
        return _uniform(n)
    return wv / wv.sum()


def foolsgold_weights(rs: ClientRoundSet, hist: FoolsGoldHistory) -> AggregationOutcome:
    """Weights from ``hist`` (already including this round, see ``FoolsGoldHistory.updated``)."""
    if hist.cumulative.shape != rs.updates.shape:
        raise DimensionMismatch(f"history shape {hist.cumulative.shape} != round shape {rs.updates.shape}")
    p = foolsgold_p(hist.cumulative)
    return AggregationOutcome(weighted_aggregate(rs, p), p)


def residual_p(X: np.ndarray) -> np.ndarray:
    med = np.median(X, axis=0)
    r = np.linalg.norm(X - med, axis=1)
    scale = np.median(r)
    if scale == 0:
        return _uniform(X.shape[0])
    w = 1.0 / (1.0 + r / scale)
    return w / w.sum()


def residual_weights(rs: ClientRoundSet) -> AggregationOutcome:
    """Down-weight clients by their L2 residual from the coordinate median."""
    p = residual_p(rs.updates)
    return AggregationOutcome(weighted_aggregate(rs, p), p)
