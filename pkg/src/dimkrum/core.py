"""Shared types for one federated round and the weighted-sum aggregation contract.

Client updates are flat float64 vectors.  A round is stored as an ``(n, d)``
matrix; reductions over clients always run in ascending client-id order, so a
permuted round produces bit-identical aggregates.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from dimkrum.krum import SelectionReport

WEIGHT_SUM_ATOL = 1e-9
FLUPD_MAGIC = b"FLUPD1"
_FLUPD_HEADER = struct.Struct("<III")


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class DimensionMismatch(ContractError):
    """Update vectors (or weights) disagree on dimension."""


def as_update(values, dim: int | None = None) -> np.ndarray:
    """Validate and return ``values`` as a finite 1-D float64 update vector."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"update must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatch(f"update has dim {arr.shape[0]}, expected {dim}")
    if arr.shape[0] == 0:
        raise DimensionMismatch("update must have positive dimension")
    if not np.all(np.isfinite(arr)):
        raise ContractError("update contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class ClientRoundSet:
    """The ``n`` local updates gathered by the server in one round.

    ``updates`` is ``(n, d)``; row ``i`` belongs to ``client_ids[i]``.
    """

    updates: np.ndarray
    client_ids: tuple[int, ...] = ()
    round: int = 0

    def __post_init__(self):
        upd = self.updates
        if not isinstance(upd, np.ndarray):
            rows = [np.asarray(u, dtype=np.float64) for u in upd]
            if len({r.shape for r in rows}) > 1:
                raise DimensionMismatch("client updates have different dimensions")
            upd = np.stack(rows) if rows else np.empty((0, 0))
        upd = np.asarray(upd, dtype=np.float64)
        if upd.ndim != 2:
            raise DimensionMismatch(f"updates must be (n, d), got shape {upd.shape}")
        n = upd.shape[0]
        if n < 2:
            raise ContractError(f"a round needs at least 2 clients, got {n}")
        if upd.shape[1] == 0:
            raise DimensionMismatch("updates must have positive dimension")
        if not np.all(np.isfinite(upd)):
            raise ContractError("round contains NaN or Inf updates")
        ids = tuple(int(c) for c in self.client_ids) if self.client_ids else tuple(range(n))
        if len(ids) != n or len(set(ids)) != n or min(ids) < 0:
            raise ContractError("client_ids must be n distinct non-negative integers")
        if self.round < 0:
            raise ContractError("round must be non-negative")
        upd = upd.copy()
        upd.setflags(write=False)
        object.__setattr__(self, "updates", upd)
        object.__setattr__(self, "client_ids", ids)

    @property
    def n(self) -> int:
        return self.updates.shape[0]

    @property
    def dim(self) -> int:
        return self.updates.shape[1]

    @property
    def id_order(self) -> np.ndarray:
        """Row positions sorted by client id (the canonical summation order)."""
        return np.argsort(self.client_ids, kind="stable")

    def subset(self, indices: Sequence[int]) -> np.ndarray:
        return self.updates[sorted(indices)]


@dataclass(frozen=True)
class ServerState:
    weights: np.ndarray
    round: int = 0

    def __post_init__(self):
        w = as_update(self.weights).copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


@dataclass
class AggregationOutcome:
    """Aggregate plus the per-client weights ``p`` that produced it."""

    aggregate: np.ndarray
    weights_p: np.ndarray
    report: "SelectionReport | None" = None
    extra: dict = field(default_factory=dict)


def check_probability_vector(p, n: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (n,):
        raise DimensionMismatch(f"weights p must have length {n}, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ContractError("weights p must be finite and non-negative")
    if abs(p.sum() - 1.0) > WEIGHT_SUM_ATOL:
        raise ContractError(f"weights p sum to {p.sum()!r}, not 1")
    return p


def weighted_aggregate(rs: ClientRoundSet, p) -> np.ndarray:
    """``sum_i p_i * x_i`` accumulated client by client in ascending id order.

    ``p[i]`` weights row ``i`` of ``rs.updates``.
    """
    p = check_probability_vector(p, rs.n)
    out = np.zeros(rs.dim)
    for i in rs.id_order:
        if p[i] != 0.0:
            out += p[i] * rs.updates[i]
    return out


def apply_update(server: ServerState, agg) -> ServerState:
    agg = as_update(agg, server.weights.shape[0])
    return ServerState(server.weights + agg, server.round + 1)


def write_flupd(path: str | Path, rs: ClientRoundSet) -> None:
    """Write a round in FLUPD1 format (little-endian, client-major).

    The file appears atomically: bytes go to a temporary sibling first.
    """
    payload = np.ascontiguousarray(rs.updates, dtype="<f8").tobytes()
    atomic_write_bytes(path, FLUPD_MAGIC + _FLUPD_HEADER.pack(rs.n, rs.dim, rs.round) + payload)


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write ``data`` to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def read_flupd(path: str | Path) -> ClientRoundSet:
    raw = Path(path).read_bytes()
    head = len(FLUPD_MAGIC) + _FLUPD_HEADER.size
    if raw[: len(FLUPD_MAGIC)] != FLUPD_MAGIC or len(raw) < head:
        raise ContractError(f"{path}: not an FLUPD1 file")
    n, d, rnd = _FLUPD_HEADER.unpack_from(raw, len(FLUPD_MAGIC))
    if len(raw) != head + 8 * n * d:
        raise ContractError(f"{path}: expected {n}x{d} doubles, file size {len(raw)}")
    upd = np.frombuffer(raw, dtype="<f8", offset=head).reshape(n, d).astype(np.float64)
    return ClientRoundSet(upd, tuple(range(n)), rnd)
