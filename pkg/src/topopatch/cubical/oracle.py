"""Brute-force persistence by full boundary-matrix reduction.

This is the verification oracle: every cell of the cubical complex is
materialized, sorted by filtration value, and reduced column by column with
plain set arithmetic over Z/2. No shortcuts, no shared code with the fast
engine. Guarded to small volumes.
"""

from __future__ import annotations

import math
from itertools import product

import numpy as np

from ..errors import ParameterError, VolumeTooLarge
from ..volume import Volume3D
from .types import (
    MODES,
    SUBLEVEL,
    SUPERLEVEL,
    PersistenceDiagram,
    PersistencePair,
    sort_pairs,
)

MAX_ORACLE_VOXELS = 512


def _enumerate_cells(values: np.ndarray):
    """All cells of the vertex-based cubical complex.

    A cell is (origin, axes): the axes tuple lists the directions the cell
    spans, so dim = len(axes). The filtration value is the max over the
    cell's vertices.
    """
    nx, ny, nz = values.shape
    cells = []
    for x, y, z in product(range(nx), range(ny), range(nz)):
        for axes in (
            (),
            (0,), (1,), (2,),
            (0, 1), (0, 2), (1, 2),
            (0, 1, 2),
        ):
            span = [x, y, z]
            ok = True
            for a in axes:
                span[a] += 1
                if span[a] >= values.shape[a]:
                    ok = False
                    break
            if not ok:
                continue
            corners = [
                (x + (dx if 0 in axes else 0), y + (dy if 1 in axes else 0), z + (dz if 2 in axes else 0))
                for dx, dy, dz in product((0, 1), repeat=3)
            ]
            val = max(float(values[c]) for c in set(corners))
            cells.append(((x, y, z), axes, val))
    return cells


def _faces(cell):
    (x, y, z), axes, _ = cell
    out = []
    for a in axes:
        rest = tuple(b for b in axes if b != a)
        lo = (x, y, z)
        hi = list(lo)
        hi[a] += 1
        out.append((lo, rest))
        out.append((tuple(hi), rest))
    return out


def oracle_persistence(v: Volume3D, mode: str = SUBLEVEL) -> PersistenceDiagram:
    """Textbook persistence of the cubical V-complex; volumes above
    MAX_ORACLE_VOXELS voxels are rejected."""
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    n_vox = v.dims[0] * v.dims[1] * v.dims[2]
    if n_vox > MAX_ORACLE_VOXELS:
        raise VolumeTooLarge(f"{n_vox} voxels exceeds the oracle guard of {MAX_ORACLE_VOXELS}")

    values = v.data if mode == SUBLEVEL else -v.data
    cells = _enumerate_cells(values)
    # Face-before-coface total order: value, then dimension, then position.
    cells.sort(key=lambda c: (c[2], len(c[1]), c[0], c[1]))
    index_of = {(c[0], c[1]): i for i, c in enumerate(cells)}

    columns: list[set[int]] = []
    for c in cells:
        columns.append({index_of[f] for f in _faces(c)})

    low_to_col: dict[int, int] = {}
    pair_of: dict[int, int] = {}
    for j in range(len(cells)):
        col = columns[j]
        while col:
            low = max(col)
            other = low_to_col.get(low)
            if other is None:
                break
            col ^= columns[other]
        if col:
            low = max(col)
            low_to_col[low] = j
            pair_of[low] = j
        columns[j] = col

    flip = -1.0 if mode == SUPERLEVEL else 1.0
    pairs = []
    paired = set(pair_of) | set(pair_of.values())
    for i, j in pair_of.items():
        birth = cells[i][2]
        death = cells[j][2]
        if death > birth:
            pairs.append(PersistencePair(len(cells[i][1]), flip * birth, flip * death))
    for i, c in enumerate(cells):
        if i not in paired:
            # essential class: never dies
            pairs.append(PersistencePair(len(c[1]), flip * c[2], flip * math.inf))

    pairs = [p for p in pairs if p.dim <= 2]
    return PersistenceDiagram(mode=mode, source_dims=v.dims, pairs=sort_pairs(pairs))
