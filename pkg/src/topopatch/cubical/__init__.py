"""Cubical persistent homology: fast engine, brute-force oracle, diagram types."""

from .engine import backend_name, betti_numbers, compute_persistence
from .oracle import MAX_ORACLE_VOXELS, oracle_persistence
from .types import (
    MODES,
    SUBLEVEL,
    SUPERLEVEL,
    PersistenceDiagram,
    PersistencePair,
    betti_from_diagram,
    filter_low_persistence,
    load_diagram_csv,
    save_diagram_csv,
    sort_pairs,
)

__all__ = [
    "MODES",
    "SUBLEVEL",
    "SUPERLEVEL",
    "MAX_ORACLE_VOXELS",
    "PersistenceDiagram",
    "PersistencePair",
    "backend_name",
    "betti_from_diagram",
    "betti_numbers",
    "compute_persistence",
    "filter_low_persistence",
    "load_diagram_csv",
    "oracle_persistence",
    "save_diagram_csv",
    "sort_pairs",
]
