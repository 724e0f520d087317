"""Krum-family selection (Krum, Multi-Krum, Bulyan) and Dim-Krum.

Every client scores itself by the sum of distances to its ``m = ceil((n+1)/2)``
nearest updates (itself included), and the lowest score wins.  Dim-Krum swaps
the Euclidean distance for the mean absolute difference over the ``K`` most
divergent coordinates of each pair, can carry scores across rounds
(memory), and perturbs the aggregate with noise scaled by the spread of the
selected updates.

Ties are always broken towards the lowest index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dimkrum.core import AggregationOutcome, ClientRoundSet, ContractError, as_update, weighted_aggregate

VARIANTS = ("krum", "multikrum", "bulyan", "dimkrum")


@dataclass(frozen=True)
class DimKrumConfig:
    rho: float = 1e-3
    alpha: float = 0.9
    lam: float = 5.0
    variant: str = "dimkrum"

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ContractError(f"rho must lie in (0, 1], got {self.rho}")
        if not 0.0 <= self.alpha < 1.0:
            raise ContractError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.lam < 0:
            raise ContractError(f"lambda must be non-negative, got {self.lam}")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown Krum variant {self.variant!r}")

    def num_dims(self, d: int) -> int:
        return num_topk_dims(self.rho, d)


def num_topk_dims(rho: float, d: int) -> int:
    """``K = max(1, floor(rho * d))``."""
    # 1e-9 slack keeps e.g. 0.001 * 3000 from flooring to 2.
    return max(1, math.floor(rho * d + 1e-9))


@dataclass
class MemoryState:
    dis_mem: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "MemoryState":
        return cls(np.zeros(n))


@dataclass(frozen=True)
class DistanceMatrix:
    entries: np.ndarray
    metric_tag: str


@dataclass
class SelectionReport:
    distances: DistanceMatrix
    neighbor_sets: list[tuple[int, ...]]
    dis_sums: np.ndarray
    i_star: int
    selected: tuple[int, ...]
    weights_p: np.ndarray
    raw_dis_sums: np.ndarray = field(default=None, repr=False)

    def to_json(self, max_n_for_distances: int = 20) -> dict:
        out = {
            "dis_sums": [float(v) for v in self.dis_sums],
            "i_star": int(self.i_star),
            "selected": [int(i) for i in self.selected],
            "weights_p": [float(v) for v in self.weights_p],
        }
        if len(self.dis_sums) <= max_n_for_distances:
            out["distances"] = self.distances.entries.tolist()
        return out


def neighbor_count(n: int) -> int:
    return (n + 2) // 2  # ceil((n + 1) / 2)


def pairwise_l2(rs: ClientRoundSet | np.ndarray) -> DistanceMatrix:
    X = rs.updates if isinstance(rs, ClientRoundSet) else np.asarray(rs, dtype=np.float64)
    n = X.shape[0]
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = np.linalg.norm(X[i] - X[j])
    return DistanceMatrix(D, "l2")


def topk_dims(x_i, x_j, K: int) -> np.ndarray:
    """Indices of the ``K`` largest ``|x_i - x_j|``, ties to the lower index, sorted."""
    diff = np.abs(as_update(x_i) - as_update(x_j, len(x_i)))
    if not 1 <= K <= diff.shape[0]:
        raise ContractError(f"K={K} must lie in [1, d={diff.shape[0]}]")
    # stable sort on -diff keeps lower indices first among equal values
    return np.sort(np.argsort(-diff, kind="stable")[:K])


def _topk_mean(absdiff: np.ndarray, K: int) -> float:
    d = absdiff.shape[0]
    if K == d:
        return float(absdiff.sum() / K)
    # the top-K values do not depend on tie-breaking, only their indices do
    return float(np.sort(np.partition(absdiff, d - K)[d - K:]).sum() / K)


def dimkrum_distance(x_i, x_j, K: int) -> float:
    """Mean ``|x_i - x_j|`` over the top-``K`` coordinates of largest difference."""
    diff = np.abs(as_update(x_i) - as_update(x_j, len(x_i)))
    if not 1 <= K <= diff.shape[0]:
        raise ContractError(f"K={K} must lie in [1, d={diff.shape[0]}]")
    return _topk_mean(diff, K)


def pairwise_dimkrum(rs: ClientRoundSet | np.ndarray, K: int) -> DistanceMatrix:
    X = rs.updates if isinstance(rs, ClientRoundSet) else np.asarray(rs, dtype=np.float64)
    n, d = X.shape
    if not 1 <= K <= d:
        raise ContractError(f"K={K} must lie in [1, d={d}]")
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = _topk_mean(np.abs(X[i] - X[j]), K)
    return DistanceMatrix(D, "dimkrum_topk")


def neighbor_sets(D: DistanceMatrix | np.ndarray) -> list[tuple[int, ...]]:
    """``N_i``: the ``ceil((n+1)/2)`` closest clients to ``i``, always containing ``i``."""
    E = D.entries if isinstance(D, DistanceMatrix) else np.asarray(D)
    n = E.shape[0]
    m = neighbor_count(n)
    out = []
    for i in range(n):
        others = sorted((j for j in range(n) if j != i), key=lambda j: (E[i, j], j))
        out.append((i, *others[: m - 1]))
    return out


def dis_sums(D: DistanceMatrix | np.ndarray, neighbors) -> np.ndarray:
    E = D.entries if isinstance(D, DistanceMatrix) else np.asarray(D)
    if len(neighbors) != E.shape[0]:
        raise ContractError("one neighbor set per client is required")
    return np.array([sum(E[i, j] for j in sorted(nb)) for i, nb in enumerate(neighbors)])


def apply_memory(raw, mem: MemoryState, alpha: float) -> tuple[np.ndarray, MemoryState]:
    """``out = raw + alpha * mem``; the post-memory scores become the new memory."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != mem.dis_mem.shape:
        raise ContractError(f"memory has length {mem.dis_mem.shape[0]}, scores {raw.shape[0]}")
    out = raw + alpha * mem.dis_mem
    return out, MemoryState(out.copy())


def _argmin(values: np.ndarray) -> int:
    return int(np.argmin(values))  # first occurrence == lowest index


def _krum_pass(D: np.ndarray):
    nbrs = neighbor_sets(D)
    raw = dis_sums(D, nbrs)
    return nbrs, raw


def select(
    rs: ClientRoundSet, cfg: DimKrumConfig, mem: MemoryState | None = None
) -> tuple[SelectionReport, MemoryState]:
    """Run one selection step.  Returns the report and the next memory state.

    Memory is only used by the ``dimkrum`` variant; the classical variants
    return ``mem`` untouched.
    """
    n = rs.n
    mem = mem if mem is not None else MemoryState.zeros(n)
    if mem.dis_mem.shape != (n,):
        raise ContractError(f"memory has length {mem.dis_mem.shape[0]}, round has {n} clients")
    if cfg.variant == "bulyan" and n < 3:
        raise ContractError("bulyan needs at least 3 clients")

    if cfg.variant == "dimkrum":
        dm = pairwise_dimkrum(rs, cfg.num_dims(rs.dim))
    else:
        dm = pairwise_l2(rs)
    nbrs, raw = _krum_pass(dm.entries)
    scores, new_mem = raw, mem
    if cfg.variant == "dimkrum":
        scores, new_mem = apply_memory(raw, mem, cfg.alpha)
    i_star = _argmin(scores)

    if cfg.variant == "krum":
        selected = (i_star,)
    elif cfg.variant in ("multikrum", "dimkrum"):
        selected = tuple(sorted(nbrs[i_star]))
    else:
        selected = _bulyan_selection(dm.entries, neighbor_count(n))

    p = np.zeros(n)
    p[list(selected)] = 1.0 / len(selected)
    report = SelectionReport(dm, nbrs, scores, i_star, selected, p, raw_dis_sums=raw)
    return report, new_mem


def _bulyan_selection(D: np.ndarray, target: int) -> tuple[int, ...]:
    pool = list(range(D.shape[0]))
    chosen = []
    while len(chosen) < target:
        sub = D[np.ix_(pool, pool)]
        _, raw = _krum_pass(sub)
        winner = pool[_argmin(raw)]
        chosen.append(winner)
        pool.remove(winner)
    return tuple(sorted(chosen))


def adaptive_noise(
    agg,
    rs: ClientRoundSet,
    selected,
    lam: float,
    rng: np.random.Generator,
    is_last_round: bool,
) -> np.ndarray:
    """Add ``N(0, (lam * sigma_S)^2)`` per coordinate, skipped in the last round.

    ``sigma_S`` is the unbiased per-coordinate std over the selected updates.
    """
    agg = as_update(agg, rs.dim)
    selected = sorted(selected)
    if len(selected) < 2:
        raise ContractError("adaptive noise needs at least 2 selected clients")
    if is_last_round or lam == 0:
        return agg.copy()
    sigma = rs.updates[selected].std(axis=0, ddof=1)
    return agg + rng.standard_normal(rs.dim) * (lam * sigma)


class KrumAggregator:
    """Stateful wrapper used by the simulator: selection, averaging, noise."""

    def __init__(self, cfg: DimKrumConfig, n: int, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.memory = MemoryState.zeros(n)
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def __call__(self, rs: ClientRoundSet, is_last_round: bool = False) -> AggregationOutcome:
        report, self.memory = select(rs, self.cfg, self.memory)
        agg = weighted_aggregate(rs, report.weights_p)
        if self.cfg.variant == "dimkrum" and self.cfg.lam > 0:
            agg = adaptive_noise(agg, rs, report.selected, self.cfg.lam, self.rng, is_last_round)
        return AggregationOutcome(agg, report.weights_p, report)
