"""Detection-error analysis for a Gaussian demo of clean vs. backdoored updates.

Clean coordinates follow ``N(mu_i, sigma_i^2)``; a backdoored update is an
independent clean draw shifted by ``delta_i``.  A detector that ranks clients by
squared deviation from ``mu`` errs when the backdoored client looks closer to
``mu`` than a clean one.  This module gives the exact single-coordinate error,
the Chebyshev bound for a coordinate set, a Monte Carlo estimate of the set
error, and the fraction-of-coordinates indicators used to motivate Dim-Krum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dimkrum.core import ClientRoundSet, ContractError
from dimkrum.krum import dis_sums, neighbor_sets, num_topk_dims, pairwise_l2


def normal_cdf(x: float) -> float:
    """Standard normal CDF via ``erfc`` (absolute error well below 1e-12)."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def single_dim_error_prob(delta: float, sigma: float) -> float:
    """``2 Phi(a) Phi(-a)`` with ``a = delta / (sqrt(2) sigma)``."""
    if not sigma > 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    a = delta / (math.sqrt(2.0) * sigma)
    return 2.0 * normal_cdf(a) * normal_cdf(-a)


@dataclass
class GaussianDemoSpec:
    mu: np.ndarray
    sigma: np.ndarray
    delta: np.ndarray
    support: frozenset = field(default=None)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if not (self.mu.shape == self.sigma.shape == self.delta.shape) or self.mu.ndim != 1:
            raise ContractError("mu, sigma and delta must be 1-D arrays of equal length")
        if np.any(self.sigma <= 0):
            raise ContractError("sigma must be strictly positive")
        nonzero = frozenset(int(i) for i in np.flatnonzero(self.delta))
        if self.support is None:
            self.support = nonzero
        elif frozenset(self.support) != nonzero:
            raise ContractError("support must equal the set of nonzero delta entries")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def sparse(cls, dim: int, support_size: int, strength: float, sigma: float = 1.0) -> "GaussianDemoSpec":
        """Zero mean, constant ``sigma``, ``strength`` on the first ``support_size`` coordinates."""
        delta = np.zeros(dim)
        delta[:support_size] = strength
        return cls(np.zeros(dim), np.full(dim, sigma), delta)


def _index_set(spec: GaussianDemoSpec, A) -> np.ndarray:
    idx = np.arange(spec.dim) if A is None else np.array(sorted(A), dtype=int)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= spec.dim:
        raise ContractError("index set must be non-empty and within [0, dim)")
    return idx


def set_error_bound(spec: GaussianDemoSpec, A=None) -> float:
    """Chebyshev bound ``4 sum s^2 (s^2 + D^2) / (sum D^2)^2`` over ``A`` (all coordinates if None)."""
    idx = _index_set(spec, A)
    s2 = spec.sigma[idx] ** 2
    d2 = spec.delta[idx] ** 2
    denom = d2.sum()
    if denom <= 0:
        raise ContractError("delta is zero on every coordinate of A")
    return float(4.0 * (s2 * (s2 + d2)).sum() / denom**2)


def set_error_moments(spec: GaussianDemoSpec, A=None) -> tuple[float, float]:
    """Mean and variance of ``sum_A |x_bd - mu|^2 - |x_clean - mu|^2``."""
    idx = _index_set(spec, A)
    s2 = spec.sigma[idx] ** 2
    d2 = spec.delta[idx] ** 2
    return float(d2.sum()), float((4.0 * s2 * (s2 + d2)).sum())


def mc_error_prob(
    spec: GaussianDemoSpec,
    A=None,
    samples: int = 10**6,
    rng: np.random.Generator | None = None,
    batch: int | None = None,
) -> tuple[float, float]:
    """Monte Carlo estimate of the set-level detection error and its binomial standard error.

    Samples are drawn in batches to bound memory; ties count as non-errors.
    """
    if samples < 1000:
        raise ContractError("mc_error_prob needs at least 1000 samples")
    rng = rng if rng is not None else np.random.default_rng()
    idx = _index_set(spec, A)
    mu, sig, dl = spec.mu[idx], spec.sigma[idx], spec.delta[idx]
    k = idx.size
    batch = batch or max(1, min(samples, 4_000_000 // max(k, 1)))
    errors = 0
    done = 0
    while done < samples:
        b = min(batch, samples - done)
        clean = mu + sig * rng.standard_normal((b, k))
        bd = mu + sig * rng.standard_normal((b, k)) + dl
        errors += int(np.count_nonzero(((bd - mu) ** 2).sum(axis=1) < ((clean - mu) ** 2).sum(axis=1)))
        done += b
    p = errors / samples
    return p, math.sqrt(p * (1.0 - p) / samples)


def sample_demo_round(
    spec: GaussianDemoSpec, n: int, backdoor_index: int, rng: np.random.Generator, round: int = 0
) -> ClientRoundSet:
    """``n - 1`` clean clients plus one clean draw shifted by ``delta`` at ``backdoor_index``."""
    if n < 2:
        raise ContractError("a demo round needs n >= 2")
    if not 0 <= backdoor_index < n:
        raise ContractError(f"backdoor_index {backdoor_index} outside [0, {n})")
    X = spec.mu + spec.sigma * rng.standard_normal((n, spec.dim))
    X[backdoor_index] += spec.delta
    return ClientRoundSet(X, tuple(range(n)), round)


def delta_hat(rs: ClientRoundSet, backdoor_index: int) -> np.ndarray:
    """Unbiased estimate of the backdoor shift: ``n/(n-1) * (x_bd - mean_i x_i)``."""
    n = rs.n
    if not 0 <= backdoor_index < n:
        raise ContractError(f"backdoor_index {backdoor_index} outside [0, {n})")
    X = rs.updates
    bd = X[backdoor_index]
    # (x_bd - mean) * n/(n-1) == (x_bd - mean of the others), computed without
    # forming the mean so a common translation cancels exactly
    others = np.delete(X, backdoor_index, axis=0)
    return (bd - others).sum(axis=0) / (n - 1)


@dataclass
class IndicatorReport:
    fractions: list[float]
    dims_used: list[int]
    dis_sum_ratio: list[float]
    rel_strength: list[float]

    def rows(self):
        for f, k, r, s in zip(self.fractions, self.dims_used, self.dis_sum_ratio, self.rel_strength):
            yield {"fraction": f, "dims": k, "dis_sum_ratio": r, "rel_strength": s}


def indicators(rs: ClientRoundSet, backdoor_index: int, fractions: Sequence[float]) -> IndicatorReport:
    """Backdoor detectability on the coordinates with the largest estimated shift.

    For each fraction, keep the ``max(1, floor(f*d))`` coordinates with largest
    ``|delta_hat|`` and report the backdoor client's Krum distance-sum over the
    median distance-sum, and the RMS of ``delta_hat`` over the pooled clean std.
    """
    if rs.n < 3:
        raise ContractError("indicators need at least 3 clients")
    fr = sorted(float(f) for f in fractions)
    if not fr or fr[0] <= 0 or fr[-1] > 1:
        raise ContractError("fractions must lie in (0, 1]")
    dh = delta_hat(rs, backdoor_index)
    # stable order: largest |delta_hat| first, lower index on ties
    ranking = np.argsort(-np.abs(dh), kind="stable")
    clean = np.delete(rs.updates, backdoor_index, axis=0)
    ks, ratios, strengths = [], [], []
    for f in fr:
        k = num_topk_dims(f, rs.dim)
        cols = np.sort(ranking[:k])
        sub = rs.updates[:, cols]
        D = pairwise_l2(sub).entries
        sums = dis_sums(D, neighbor_sets(D))
        med = float(np.median(sums))
        ratio = float(sums[backdoor_index] / med) if med > 0 else (1.0 if sums[backdoor_index] == 0 else math.inf)
        pooled = math.sqrt(float(clean[:, cols].var(axis=0, ddof=1).mean()))
        rms = math.sqrt(float((dh[cols] ** 2).mean()))
        strength = rms / pooled if pooled > 0 else (0.0 if rms == 0 else math.inf)
        ks.append(k)
        ratios.append(ratio)
        strengths.append(strength)
    return IndicatorReport(fr, ks, ratios, strengths)
