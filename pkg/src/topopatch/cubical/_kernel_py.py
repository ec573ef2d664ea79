"""Pure-Python persistence kernels (fallback backend).

Same cell indexing and same algorithms as the compiled kernel: dim 0 by
union-find over the edge filtration, dim 2 by union-find over the dual
adjacency swept in reverse, dim 1 by boundary-matrix reduction over the
square columns with the positive columns cleared. Indexing conventions:

  vertex (x,y,z)        -> x + nx*(y + ny*z)
  x-edge (ex,y,z)       -> ex + (nx-1)*(y + ny*z)
  y-edge (x,ey,z)       -> Ex + x + nx*(ey + (ny-1)*z)
  z-edge (x,y,ez)       -> Ex + Ey + x + nx*(y + ny*ez)
  xy-square (i,j,k)     -> i + (nx-1)*(j + (ny-1)*k)
  xz-square (i,y,k)     -> Sxy + i + (nx-1)*(y + ny*k)
  yz-square (x,j,k)     -> Sxy + Sxz + x + nx*(j + (ny-1)*k)
  cube (i,j,k)          -> i + (nx-1)*(j + (ny-1)*k)
"""

from __future__ import annotations

import heapq
import math

import numpy as np

BACKEND = "python"


def _counts(nx, ny, nz):
    Ex = (nx - 1) * ny * nz
    Ey = nx * (ny - 1) * nz
    Ez = nx * ny * (nz - 1)
    Sxy = (nx - 1) * (ny - 1) * nz
    Sxz = (nx - 1) * ny * (nz - 1)
    Syz = nx * (ny - 1) * (nz - 1)
    NC = (nx - 1) * (ny - 1) * (nz - 1)
    return Ex, Ey, Ez, Sxy, Sxz, Syz, NC


def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def pairs_dim0(nx, ny, nz, vflat, edge_vals, edge_order):
    Ex, Ey, _, _, _, _, _ = _counts(nx, ny, nz)
    nv = nx * ny * nz
    parent = list(range(nv))
    birth = [float(vflat[i]) for i in range(nv)]
    births, deaths = [], []
    nxny = nx * ny
    for e in edge_order:
        e = int(e)
        if e < Ex:
            ex = e % (nx - 1)
            r = e // (nx - 1)
            v1 = ex + nx * r
            v2 = v1 + 1
        elif e < Ex + Ey:
            l = e - Ex
            x = l % nx
            r = l // nx
            ey = r % (ny - 1)
            z = r // (ny - 1)
            v1 = x + nx * (ey + ny * z)
            v2 = v1 + nx
        else:
            l = e - Ex - Ey
            v1 = l
            v2 = v1 + nxny
        ra, rb = _find(parent, v1), _find(parent, v2)
        if ra == rb:
            continue
        w = float(edge_vals[e])
        ba, bb = birth[ra], birth[rb]
        dying = max(ba, bb)
        if w > dying:
            births.append(dying)
            deaths.append(w)
        parent[rb] = ra
        birth[ra] = min(ba, bb)
    essentials = [birth[i] for i in range(nv) if parent[i] == i]
    return births, deaths, essentials


def _square_cubes(s, nx, ny, nz, Sxy, Sxz, NC):
    """Dual nodes (cube index or NC for the outside) on both sides of square s."""
    cnx, cny, cnz = nx - 1, ny - 1, nz - 1
    if s < Sxy:
        i = s % cnx
        r = s // cnx
        j = r % cny
        k = r // cny
        ca = i + cnx * (j + cny * (k - 1)) if k - 1 >= 0 else NC
        cb = i + cnx * (j + cny * k) if k <= cnz - 1 else NC
    elif s < Sxy + Sxz:
        l = s - Sxy
        i = l % cnx
        r = l // cnx
        y = r % ny
        k = r // ny
        ca = i + cnx * ((y - 1) + cny * k) if y - 1 >= 0 else NC
        cb = i + cnx * (y + cny * k) if y <= cny - 1 else NC
    else:
        l = s - Sxy - Sxz
        x = l % nx
        r = l // nx
        j = r % cny
        k = r // cny
        ca = (x - 1) + cnx * (j + cny * k) if x - 1 >= 0 else NC
        cb = x + cnx * (j + cny * k) if x <= cnx - 1 else NC
    return ca, cb


def pairs_dim2(nx, ny, nz, cube_vals, sq_vals, sq_order):
    _, _, _, Sxy, Sxz, Syz, NC = _counts(nx, ny, nz)
    ns = Sxy + Sxz + Syz
    parent = list(range(NC + 1))
    birth = [float(cube_vals[i]) for i in range(NC)] + [math.inf]
    positive = np.zeros(ns, dtype=np.uint8)
    births, deaths = [], []
    for m in range(ns - 1, -1, -1):
        s = int(sq_order[m])
        ca, cb = _square_cubes(s, nx, ny, nz, Sxy, Sxz, NC)
        ra, rb = _find(parent, ca), _find(parent, cb)
        if ra == rb:
            continue
        positive[s] = 1
        w = float(sq_vals[s])
        ba, bb = birth[ra], birth[rb]
        dying = min(ba, bb)
        if dying > w:
            births.append(w)
            deaths.append(dying)
        parent[rb] = ra
        birth[ra] = max(ba, bb)
    return births, deaths, positive


def _square_edges(s, nx, ny, nz, Ex, Ey, Sxy, Sxz):
    cnx, cny = nx - 1, ny - 1
    Exy = Ex + Ey
    if s < Sxy:
        i = s % cnx
        r = s // cnx
        j = r % cny
        k = r // cny
        e1 = i + cnx * (j + ny * k)
        e2 = i + cnx * ((j + 1) + ny * k)
        e3 = Ex + i + nx * (j + cny * k)
        e4 = e3 + 1
    elif s < Sxy + Sxz:
        l = s - Sxy
        i = l % cnx
        r = l // cnx
        y = r % ny
        k = r // ny
        e1 = i + cnx * (y + ny * k)
        e2 = i + cnx * (y + ny * (k + 1))
        e3 = Exy + i + nx * (y + ny * k)
        e4 = e3 + 1
    else:
        l = s - Sxy - Sxz
        x = l % nx
        r = l // nx
        j = r % cny
        k = r // cny
        e1 = Ex + x + nx * (j + cny * k)
        e2 = Ex + x + nx * (j + cny * (k + 1))
        e3 = Exy + x + nx * (j + ny * k)
        e4 = Exy + x + nx * ((j + 1) + ny * k)
    return e1, e2, e3, e4


def _heap_pivot(heap):
    # Entries are negated ranks; equal pairs cancel over Z/2.
    while heap:
        t = heapq.heappop(heap)
        if heap and heap[0] == t:
            heapq.heappop(heap)
            continue
        return t
    return None


def pairs_dim1(nx, ny, nz, evals_by_rank, edge_rank, sq_vals, sq_order, positive):
    Ex, Ey, _, Sxy, Sxz, _, _ = _counts(nx, ny, nz)
    births, deaths = [], []
    # pivot rank -> ("virgin", square id) or ("col", [negated ranks])
    claims: dict[int, tuple] = {}

    def initial_entries(s):
        return [-int(edge_rank[e]) for e in _square_edges(s, nx, ny, nz, Ex, Ey, Sxy, Sxz)]

    for s in sq_order:
        s = int(s)
        if positive[s]:
            continue
        heap = initial_entries(s)
        heapq.heapify(heap)
        added = False
        while True:
            t = _heap_pivot(heap)
            if t is None:
                break  # column vanished; nothing to pair
            p = -t
            claim = claims.get(p)
            if claim is None:
                rest = []
                while True:
                    u = _heap_pivot(heap)
                    if u is None:
                        break
                    rest.append(u)
                if added:
                    claims[p] = ("col", [t] + rest)
                else:
                    claims[p] = ("virgin", s)
                birth = float(evals_by_rank[p])
                death = float(sq_vals[s])
                if death > birth:
                    births.append(birth)
                    deaths.append(death)
                break
            heapq.heappush(heap, t)
            kind, payload = claim
            entries = initial_entries(payload) if kind == "virgin" else payload
            for u in entries:
                heapq.heappush(heap, u)
            added = True
    return births, deaths
