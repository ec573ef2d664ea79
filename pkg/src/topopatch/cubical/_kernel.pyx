# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled persistence kernels.

Mirrors _kernel_py exactly (same indexing, same sweep orders, same
tie-breaking); see that module for the conventions. Only the inner loops
differ: raw union-find arrays, a hand-rolled max-heap for column
reduction, and an arena for reduced columns.
"""

import numpy as np

from cpython.mem cimport PyMem_Free, PyMem_Malloc, PyMem_Realloc
from libc.stdint cimport int64_t, uint8_t

BACKEND = "cython"


cdef inline int64_t uf_find(int64_t* parent, int64_t i) noexcept nogil:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def pairs_dim0(int64_t nx, int64_t ny, int64_t nz,
               float[::1] vflat, float[::1] edge_vals, int64_t[::1] edge_order):
    cdef int64_t Ex = (nx - 1) * ny * nz
    cdef int64_t Ey = nx * (ny - 1) * nz
    cdef int64_t nv = nx * ny * nz
    cdef int64_t ne = edge_vals.shape[0]
    cdef int64_t nxny = nx * ny

    parent_arr = np.arange(nv, dtype=np.int64)
    birth_arr = np.asarray(vflat, dtype=np.float32).copy()
    cdef int64_t[::1] parent = parent_arr
    cdef float[::1] birth = birth_arr
    cdef int64_t* pp = &parent[0]

    births, deaths = [], []
    cdef int64_t m, e, l, r, v1, v2, ra, rb
    cdef float w, ba, bb
    for m in range(ne):
        e = edge_order[m]
        if e < Ex:
            r = e // (nx - 1)
            v1 = (e % (nx - 1)) + nx * r
            v2 = v1 + 1
        elif e < Ex + Ey:
            l = e - Ex
            r = l // nx
            v1 = (l % nx) + nx * ((r % (ny - 1)) + ny * (r // (ny - 1)))
            v2 = v1 + nx
        else:
            v1 = e - Ex - Ey
            v2 = v1 + nxny
        ra = uf_find(pp, v1)
        rb = uf_find(pp, v2)
        if ra == rb:
            continue
        w = edge_vals[e]
        ba = birth[ra]
        bb = birth[rb]
        if ba >= bb:
            if w > ba:
                births.append(ba)
                deaths.append(w)
            birth[ra] = bb
        else:
            if w > bb:
                births.append(bb)
                deaths.append(w)
        pp[rb] = ra
    essentials = []
    for v1 in range(nv):
        if pp[v1] == v1:
            essentials.append(birth[v1])
    return births, deaths, essentials


def pairs_dim2(int64_t nx, int64_t ny, int64_t nz,
               float[::1] cube_vals, float[::1] sq_vals, int64_t[::1] sq_order):
    cdef int64_t cnx = nx - 1
    cdef int64_t cny = ny - 1
    cdef int64_t cnz = nz - 1
    cdef int64_t Sxy = cnx * cny * nz
    cdef int64_t Sxz = cnx * ny * cnz
    cdef int64_t ns = sq_vals.shape[0]
    cdef int64_t NC = cube_vals.shape[0]

    parent_arr = np.arange(NC + 1, dtype=np.int64)
    birth_arr = np.empty(NC + 1, dtype=np.float64)
    birth_arr[:NC] = np.asarray(cube_vals, dtype=np.float64)
    birth_arr[NC] = np.inf
    positive_arr = np.zeros(ns, dtype=np.uint8)
    cdef int64_t[::1] parent = parent_arr
    cdef double[::1] birth = birth_arr
    cdef uint8_t[::1] positive = positive_arr
    cdef int64_t* pp = &parent[0]

    births, deaths = [], []
    cdef int64_t m, s, l, r, i, j, k, y, x, ca, cb, ra, rb
    cdef double w, ba, bb
    for m in range(ns - 1, -1, -1):
        s = sq_order[m]
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
        ra = uf_find(pp, ca)
        rb = uf_find(pp, cb)
        if ra == rb:
            continue
        positive[s] = 1
        w = sq_vals[s]
        ba = birth[ra]
        bb = birth[rb]
        if ba <= bb:
            if ba > w:
                births.append(w)
                deaths.append(ba)
            birth[ra] = bb
        else:
            if bb > w:
                births.append(w)
                deaths.append(bb)
        pp[rb] = ra
    return births, deaths, positive_arr


# -- dim 1: boundary reduction over square columns ----------------------------

cdef struct Heap:
    int64_t* data
    Py_ssize_t n
    Py_ssize_t cap


cdef inline int heap_reserve(Heap* h, Py_ssize_t need) except -1:
    cdef Py_ssize_t cap
    cdef int64_t* p
    if h.n + need > h.cap:
        cap = h.cap
        while h.n + need > cap:
            cap *= 2
        p = <int64_t*>PyMem_Realloc(h.data, cap * sizeof(int64_t))
        if p == NULL:
            raise MemoryError()
        h.data = p
        h.cap = cap
    return 0


cdef inline void heap_push(Heap* h, int64_t val) noexcept nogil:
    cdef Py_ssize_t i = h.n
    cdef Py_ssize_t up
    h.data[i] = val
    h.n += 1
    while i > 0:
        up = (i - 1) >> 1
        if h.data[up] < h.data[i]:
            h.data[up], h.data[i] = h.data[i], h.data[up]
            i = up
        else:
            break


cdef inline int64_t heap_pop(Heap* h) noexcept nogil:
    cdef int64_t top = h.data[0]
    cdef Py_ssize_t i = 0, child
    h.n -= 1
    h.data[0] = h.data[h.n]
    while True:
        child = 2 * i + 1
        if child >= h.n:
            break
        if child + 1 < h.n and h.data[child + 1] > h.data[child]:
            child += 1
        if h.data[child] > h.data[i]:
            h.data[child], h.data[i] = h.data[i], h.data[child]
            i = child
        else:
            break
    return top


cdef inline int64_t heap_pivot(Heap* h) noexcept nogil:
    # pop the max entry; equal pairs cancel over Z/2
    cdef int64_t t
    while h.n > 0:
        t = heap_pop(h)
        if h.n > 0 and h.data[0] == t:
            heap_pop(h)
            continue
        return t
    return -1


cdef inline void square_edges(int64_t s, int64_t nx, int64_t ny, int64_t nz,
                              int64_t Ex, int64_t Ey, int64_t Sxy, int64_t Sxz,
                              int64_t* out) noexcept nogil:
    cdef int64_t cnx = nx - 1
    cdef int64_t cny = ny - 1
    cdef int64_t Exy = Ex + Ey
    cdef int64_t l, r, i, j, k, y, x
    if s < Sxy:
        i = s % cnx
        r = s // cnx
        j = r % cny
        k = r // cny
        out[0] = i + cnx * (j + ny * k)
        out[1] = i + cnx * ((j + 1) + ny * k)
        out[2] = Ex + i + nx * (j + cny * k)
        out[3] = out[2] + 1
    elif s < Sxy + Sxz:
        l = s - Sxy
        i = l % cnx
        r = l // cnx
        y = r % ny
        k = r // ny
        out[0] = i + cnx * (y + ny * k)
        out[1] = i + cnx * (y + ny * (k + 1))
        out[2] = Exy + i + nx * (y + ny * k)
        out[3] = out[2] + 1
    else:
        l = s - Sxy - Sxz
        x = l % nx
        r = l // nx
        j = r % cny
        k = r // cny
        out[0] = Ex + x + nx * (j + cny * k)
        out[1] = Ex + x + nx * (j + cny * (k + 1))
        out[2] = Exy + x + nx * (j + ny * k)
        out[3] = Exy + x + nx * ((j + 1) + ny * k)


def pairs_dim1(int64_t nx, int64_t ny, int64_t nz,
               float[::1] evals_by_rank, int64_t[::1] edge_rank,
               float[::1] sq_vals, int64_t[::1] sq_order, uint8_t[::1] positive):
    cdef int64_t Ex = (nx - 1) * ny * nz
    cdef int64_t Ey = nx * (ny - 1) * nz
    cdef int64_t Sxy = (nx - 1) * (ny - 1) * nz
    cdef int64_t Sxz = (nx - 1) * ny * (nz - 1)
    cdef int64_t ns = sq_vals.shape[0]
    cdef int64_t ne = edge_rank.shape[0]

    claim_sq_arr = np.full(ne, -1, dtype=np.int64)
    claim_off_arr = np.full(ne, -1, dtype=np.int64)
    claim_len_arr = np.zeros(ne, dtype=np.int64)
    cdef int64_t[::1] claim_sq = claim_sq_arr
    cdef int64_t[::1] claim_off = claim_off_arr
    cdef int64_t[::1] claim_len = claim_len_arr

    births, deaths = [], []

    cdef Heap heap
    heap.cap = 1024
    heap.n = 0
    heap.data = <int64_t*>PyMem_Malloc(heap.cap * sizeof(int64_t))
    if heap.data == NULL:
        raise MemoryError()

    cdef int64_t arena_cap = 4096
    cdef int64_t arena_n = 0
    cdef int64_t* arena = <int64_t*>PyMem_Malloc(arena_cap * sizeof(int64_t))
    if arena == NULL:
        PyMem_Free(heap.data)
        raise MemoryError()

    cdef int64_t e4[4]
    cdef int64_t r4[4]
    cdef int64_t m, s, q, t, p, pmax, owner_sq, off, ln, need, drain_start
    cdef int added, virgin_hit
    cdef float bval, dval
    cdef int64_t* ap

    try:
        for m in range(ns):
            s = sq_order[m]
            if positive[s]:
                continue
            square_edges(s, nx, ny, nz, Ex, Ey, Sxy, Sxz, e4)
            pmax = -1
            for q in range(4):
                r4[q] = edge_rank[e4[q]]
                if r4[q] > pmax:
                    pmax = r4[q]
            dval = sq_vals[s]
            if claim_sq[pmax] == -1:
                # uncontested pivot: claim without touching the heap
                claim_sq[pmax] = s
                bval = evals_by_rank[pmax]
                if dval > bval:
                    births.append(bval)
                    deaths.append(dval)
                continue
            heap.n = 0
            heap_reserve(&heap, 4)
            for q in range(4):
                heap_push(&heap, r4[q])
            added = 0
            while True:
                t = heap_pivot(&heap)
                if t == -1:
                    break  # column vanished (defensive; flags say it cannot)
                if claim_sq[t] == -1:
                    claim_sq[t] = s
                    bval = evals_by_rank[t]
                    if dval > bval:
                        births.append(bval)
                        deaths.append(dval)
                    if added:
                        # drain the rest of the column into the arena
                        drain_start = arena_n
                        need = heap.n + 1
                        if arena_n + need > arena_cap:
                            while arena_n + need > arena_cap:
                                arena_cap *= 2
                            ap = <int64_t*>PyMem_Realloc(arena, arena_cap * sizeof(int64_t))
                            if ap == NULL:
                                raise MemoryError()
                            arena = ap
                        arena[arena_n] = t
                        arena_n += 1
                        while True:
                            p = heap_pivot(&heap)
                            if p == -1:
                                break
                            arena[arena_n] = p
                            arena_n += 1
                        claim_off[t] = drain_start
                        claim_len[t] = arena_n - drain_start
                    break
                # pivot already claimed: add the owner's column
                owner_sq = claim_sq[t]
                off = claim_off[t]
                heap_reserve(&heap, 5)
                heap_push(&heap, t)
                if off == -1:
                    square_edges(owner_sq, nx, ny, nz, Ex, Ey, Sxy, Sxz, e4)
                    for q in range(4):
                        heap_push(&heap, edge_rank[e4[q]])
                else:
                    ln = claim_len[t]
                    heap_reserve(&heap, ln)
                    for q in range(ln):
                        heap_push(&heap, arena[off + q])
                added = 1
    finally:
        PyMem_Free(heap.data)
        PyMem_Free(arena)
    return births, deaths
