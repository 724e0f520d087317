"""Dim-Krum robust aggregation, baselines, detection-error theory and a toy backdoor simulator."""
from dimkrum.core import (
    AggregationOutcome,
    ClientRoundSet,
    ContractError,
    DimensionMismatch,
    ServerState,
    apply_update,
    read_flupd,
    weighted_aggregate,
    write_flupd,
)
from dimkrum.krum import DimKrumConfig, MemoryState, SelectionReport, select

__version__ = "0.1.0"
