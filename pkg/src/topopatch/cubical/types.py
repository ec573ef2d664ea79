"""Persistence pairs, diagrams, and their CSV serialization.

Sign conventions: sublevel pairs ascend (birth <= death, essential death
= +inf). Superlevel diagrams are the sign-flipped sublevel diagrams of the
negated volume, so their pairs descend (birth >= death, essential death =
-inf). Persistence is always the magnitude |death - birth|.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from ..errors import ParameterError

SUBLEVEL = "sublevel"
SUPERLEVEL = "superlevel"
MODES = (SUBLEVEL, SUPERLEVEL)


class PersistencePair(NamedTuple):
    dim: int
    birth: float
    death: float

    @property
    def persistence(self) -> float:
        return abs(self.death - self.birth)

    @property
    def essential(self) -> bool:
        return math.isinf(self.death)


@dataclass(frozen=True)
class PersistenceDiagram:
    """Multiset of persistence pairs for one filtration of one volume."""

    mode: str
    source_dims: tuple[int, int, int]
    pairs: tuple[PersistencePair, ...]

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")

    def select_dim(self, dim: int) -> tuple[PersistencePair, ...]:
        return tuple(p for p in self.pairs if p.dim == dim)

    def as_multiset(self) -> dict[tuple[int, float, float], int]:
        out: dict[tuple[int, float, float], int] = {}
        for p in self.pairs:
            key = (p.dim, p.birth, p.death)
            out[key] = out.get(key, 0) + 1
        return out

    def counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for p in self.pairs:
            out[p.dim] = out.get(p.dim, 0) + 1
        return out


def sort_pairs(pairs: Iterable[PersistencePair]) -> tuple[PersistencePair, ...]:
    return tuple(sorted(pairs, key=lambda p: (p.dim, p.birth, p.death)))


def filter_low_persistence(d: PersistenceDiagram, eps: float) -> PersistenceDiagram:
    """Drop pairs with persistence <= eps; essential pairs always survive."""
    if eps < 0:
        raise ParameterError(f"eps must be >= 0, got {eps}")
    kept = tuple(p for p in d.pairs if p.essential or p.persistence > eps)
    return PersistenceDiagram(mode=d.mode, source_dims=d.source_dims, pairs=kept)


def betti_from_diagram(d: PersistenceDiagram, threshold: float) -> tuple[int, int, int]:
    """Count classes alive at the threshold: birth <= t < death for sublevel,
    birth >= t > death for superlevel."""
    counts = [0, 0, 0]
    if d.mode == SUBLEVEL:
        for p in d.pairs:
            if p.birth <= threshold < p.death:
                counts[p.dim] += 1
    else:
        for p in d.pairs:
            if p.birth >= threshold > p.death:
                counts[p.dim] += 1
    return tuple(counts)


def save_diagram_csv(d: PersistenceDiagram, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dim,birth,death\n")
        for p in d.pairs:
            fh.write(f"{p.dim},{p.birth!r},{p.death!r}\n")


def load_diagram_csv(path, mode: str, source_dims: tuple[int, int, int]) -> PersistenceDiagram:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "dim,birth,death":
            raise ParameterError(f"{path}: unexpected diagram header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            dim_s, birth_s, death_s = line.split(",")
            pairs.append(PersistencePair(int(dim_s), float(birth_s), float(death_s)))
    return PersistenceDiagram(mode=mode, source_dims=tuple(source_dims), pairs=tuple(pairs))


def pairs_to_arrays(pairs: Iterable[PersistencePair]) -> np.ndarray:
    """(N, 3) float64 array of (dim, birth, death); deaths keep their infinities."""
    rows = [(p.dim, p.birth, p.death) for p in pairs]
    if not rows:
        return np.zeros((0, 3), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)
