"""Cubical persistence of 3D volumes (V-construction, lower-star rule).

Cell values are assembled vectorized in numpy; the filtration sweeps run in
the compiled kernel when it is importable, otherwise in the pure-Python
fallback. Set TOPOPATCH_PURE_PYTHON=1 to force the fallback.
"""

from __future__ import annotations

import math
import os
from typing import Iterable

import numpy as np

from ..errors import ParameterError
from ..volume import Volume3D
from .types import (
    MODES,
    SUBLEVEL,
    SUPERLEVEL,
    PersistenceDiagram,
    PersistencePair,
    betti_from_diagram,
    sort_pairs,
)
from . import _kernel_py

if os.environ.get("TOPOPATCH_PURE_PYTHON"):
    _kernel = _kernel_py
else:
    try:
        from . import _kernel  # type: ignore[attr-defined]
    except ImportError:
        _kernel = _kernel_py


def backend_name() -> str:
    return _kernel.BACKEND


def _ravel_f(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.ravel(order="F"))


def _cell_values(values: np.ndarray):
    """Edge, square, and cube filtration values (max over vertices), flat in
    the index order the kernels expect."""
    v = values
    ex = np.maximum(v[:-1, :, :], v[1:, :, :])
    ey = np.maximum(v[:, :-1, :], v[:, 1:, :])
    ez = np.maximum(v[:, :, :-1], v[:, :, 1:])
    sxy = np.maximum(ex[:, :-1, :], ex[:, 1:, :])
    sxz = np.maximum(ex[:, :, :-1], ex[:, :, 1:])
    syz = np.maximum(ey[:, :, :-1], ey[:, :, 1:])
    cube = np.maximum(sxy[:, :, :-1], sxy[:, :, 1:])
    edge_vals = np.concatenate([_ravel_f(ex), _ravel_f(ey), _ravel_f(ez)])
    sq_vals = np.concatenate([_ravel_f(sxy), _ravel_f(sxz), _ravel_f(syz)])
    cube_vals = _ravel_f(cube)
    return edge_vals, sq_vals, cube_vals


def _stable_order(vals: np.ndarray) -> np.ndarray:
    return np.argsort(vals, kind="stable").astype(np.int64)


def _sublevel_pairs(values: np.ndarray, dims: set[int]):
    nx, ny, nz = values.shape
    vflat = _ravel_f(values)
    edge_vals, sq_vals, cube_vals = _cell_values(values)
    out = []

    edge_order = _stable_order(edge_vals)
    if 0 in dims:
        b0, d0, ess = _kernel.pairs_dim0(nx, ny, nz, vflat, edge_vals, edge_order)
        out += [PersistencePair(0, float(b), float(d)) for b, d in zip(b0, d0)]
        out += [PersistencePair(0, float(b), math.inf) for b in ess]

    need2 = (2 in dims) or (1 in dims)
    if need2 and sq_vals.size:
        sq_order = _stable_order(sq_vals)
        b2, d2, positive = _kernel.pairs_dim2(nx, ny, nz, cube_vals, sq_vals, sq_order)
        if 2 in dims:
            out += [PersistencePair(2, float(b), float(d)) for b, d in zip(b2, d2)]
        if 1 in dims:
            edge_rank = np.empty(len(edge_vals), dtype=np.int64)
            edge_rank[edge_order] = np.arange(len(edge_vals), dtype=np.int64)
            evals_by_rank = edge_vals[edge_order]
            b1, d1 = _kernel.pairs_dim1(
                nx, ny, nz, evals_by_rank, edge_rank, sq_vals, sq_order, positive
            )
            out += [PersistencePair(1, float(b), float(d)) for b, d in zip(b1, d1)]
    return out


def compute_persistence(
    v: Volume3D, mode: str = SUBLEVEL, dims: Iterable[int] = (0, 1, 2)
) -> PersistenceDiagram:
    """Persistence pairs of the sublevel (or superlevel) filtration.

    Zero-persistence pairs are dropped at source; essential classes carry an
    infinite death. Superlevel is the sign-flipped sublevel persistence of
    the negated volume.
    """
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    dims = set(int(d) for d in dims)
    if not dims:
        raise ParameterError("dims must be a non-empty subset of {0, 1, 2}")
    if not dims <= {0, 1, 2}:
        raise ParameterError(f"dims must be within {{0, 1, 2}}, got {sorted(dims)}")

    values = v.data.astype(np.float32, copy=False)
    if mode == SUPERLEVEL:
        pairs = _sublevel_pairs(-values, dims)
        pairs = [PersistencePair(p.dim, -p.birth, -p.death) for p in pairs]
    else:
        pairs = _sublevel_pairs(values, dims)
    return PersistenceDiagram(mode=mode, source_dims=v.dims, pairs=sort_pairs(pairs))


def betti_numbers(v: Volume3D, threshold: float, mode: str = SUBLEVEL) -> tuple[int, int, int]:
    """(b0, b1, b2) of the filtration at the given threshold."""
    d = compute_persistence(v, mode=mode, dims=(0, 1, 2))
    return betti_from_diagram(d, float(threshold))
