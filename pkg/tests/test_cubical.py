import math
import os

import numpy as np
import pytest

import topopatch.cubical.engine as engine_mod
from topopatch.cubical import (
    PersistenceDiagram,
    PersistencePair,
    backend_name,
    betti_numbers,
    compute_persistence,
    filter_low_persistence,
    load_diagram_csv,
    oracle_persistence,
    save_diagram_csv,
)
from topopatch.cubical import _kernel_py
from topopatch.errors import ParameterError, VolumeTooLarge
from topopatch.volume import Volume3D

from conftest import (
    hollow_cube_shell,
    hollow_torus_surface,
    random_volume,
    solid_torus_ring,
)


class TestSpecExamples:
    def test_single_vertex(self):
        v = Volume3D(np.full((1, 1, 1), 0.3, np.float32))
        d = compute_persistence(v, "sublevel", dims={0})
        assert d.pairs == (PersistencePair(0, pytest.approx(0.3), math.inf),)

    def test_two_minima_merge(self):
        data = np.ones((3, 3, 1), np.float32)
        data[0, 0, 0] = 0.0
        data[2, 0, 0] = 0.0
        d = compute_persistence(Volume3D(data), "sublevel", dims={0})
        assert sorted(d.pairs) == [
            PersistencePair(0, 0.0, 1.0),
            PersistencePair(0, 0.0, math.inf),
        ]

    def test_two_vertex_merge_zero_pair_dropped(self):
        v = Volume3D(np.array([0.2, 0.7], np.float32).reshape(2, 1, 1))
        d = compute_persistence(v, "sublevel")
        assert len(d.pairs) == 1
        assert d.pairs[0].dim == 0 and d.pairs[0].death == math.inf

    def test_empty_dims_rejected(self):
        with pytest.raises(ParameterError):
            compute_persistence(Volume3D(np.zeros((2, 2, 2), np.float32)), "sublevel", dims=set())

    def test_bad_mode_rejected(self):
        with pytest.raises(ParameterError):
            compute_persistence(Volume3D(np.zeros((2, 2, 2), np.float32)), "uplevel")


class TestOracleEquivalence:
    def test_random_volumes_match_oracle(self, rng):
        for _ in range(30):
            v = random_volume(rng, lo=1, hi=7, integer=bool(rng.random() < 0.4))
            for mode in ("sublevel", "superlevel"):
                a = compute_persistence(v, mode)
                b = oracle_persistence(v, mode)
                assert a.as_multiset() == b.as_multiset(), (v.dims, mode)

    def test_fixture_volumes_match_oracle(self):
        for v in (hollow_cube_shell(), solid_torus_ring()):
            a = compute_persistence(v, "sublevel")
            b = oracle_persistence(v, "sublevel")
            assert a.as_multiset() == b.as_multiset()

    def test_oracle_guard(self, rng):
        with pytest.raises(VolumeTooLarge):
            oracle_persistence(random_volume(rng, dims=(9, 9, 9)))


class TestDuality:
    def test_superlevel_is_flipped_sublevel_of_negation(self, rng):
        for _ in range(10):
            v = random_volume(rng, lo=2, hi=7)
            sup = compute_persistence(v, "superlevel")
            sub = compute_persistence(Volume3D(-v.data), "sublevel")
            flipped = {(p.dim, -p.birth, -p.death) for p in sub.pairs}
            assert {(p.dim, p.birth, p.death) for p in sup.pairs} == flipped

    def test_superlevel_pairs_descend(self, rng):
        v = random_volume(rng, dims=(5, 5, 5))
        for p in compute_persistence(v, "superlevel").pairs:
            assert p.birth > p.death


class TestBettiFixtures:
    def test_solid_block(self):
        v = np.ones((7, 7, 7), np.float32)
        v[2:5, 2:5, 2:5] = 0.0
        assert betti_numbers(Volume3D(v), 0.5) == (1, 0, 0)

    def test_hollow_cube_shell(self):
        assert betti_numbers(hollow_cube_shell(), 0.5) == (1, 0, 1)

    def test_solid_torus_ring(self):
        assert betti_numbers(solid_torus_ring(), 0.5) == (1, 1, 0)

    def test_hollow_torus_surface(self):
        assert betti_numbers(hollow_torus_surface(), 0.5) == (1, 2, 1)

    def test_superlevel_mode_counts(self):
        # ones field with a zero-shell: superlevel at 0.5 keeps the tissue,
        # the shell region becomes an enclosed cavity
        v = hollow_cube_shell()
        b0, b1, b2 = betti_numbers(v, 0.5, "superlevel")
        assert (b0, b2) == (2, 1)


class TestFilterLowPersistence:
    def test_threshold(self):
        d = PersistenceDiagram("sublevel", (3, 3, 3), (
            PersistencePair(1, 0.0, 0.1), PersistencePair(1, 0.0, 5.0)))
        out = filter_low_persistence(d, 0.5)
        assert out.pairs == (PersistencePair(1, 0.0, 5.0),)

    def test_eps_zero_identity(self, rng):
        v = random_volume(rng, dims=(4, 4, 4))
        d = compute_persistence(v, "sublevel")
        assert filter_low_persistence(d, 0.0).as_multiset() == d.as_multiset()

    def test_essential_always_retained(self):
        d = PersistenceDiagram("sublevel", (1, 1, 1), (PersistencePair(0, 0.0, math.inf),))
        assert filter_low_persistence(d, 1e9).pairs == d.pairs

    def test_negative_eps(self):
        d = PersistenceDiagram("sublevel", (1, 1, 1), ())
        with pytest.raises(ParameterError):
            filter_low_persistence(d, -0.1)

    def test_superlevel_uses_magnitude(self):
        d = PersistenceDiagram("superlevel", (3, 3, 3), (
            PersistencePair(1, 1.0, 0.9), PersistencePair(1, 1.0, 0.2)))
        out = filter_low_persistence(d, 0.5)
        assert out.pairs == (PersistencePair(1, 1.0, 0.2),)


class TestProperties:
    def test_monotone_shift_equivariance(self, rng):
        v = random_volume(rng, dims=(5, 4, 5))
        c = 0.75
        base = compute_persistence(v, "sublevel")
        shifted = compute_persistence(Volume3D(v.data + np.float32(c)), "sublevel")

        def canon(pairs, shift):
            out = []
            for p in pairs:
                death = math.inf if p.essential else float(np.float32(p.death + shift))
                out.append((p.dim, float(np.float32(p.birth + shift)), death))
            return sorted(out)

        assert canon(base.pairs, c) == canon(shifted.pairs, 0.0)

    def test_euler_consistency(self, rng):
        for _ in range(5):
            v = random_volume(rng, lo=2, hi=6)
            t = float(rng.random())
            b0, b1, b2 = betti_numbers(v, t, "sublevel")
            assert b0 - b1 + b2 == _euler_by_cell_count(v.data, t)

    def test_dim0_count_matches_union_find_simulation(self, rng):
        for _ in range(5):
            v = random_volume(rng, lo=2, hi=6)
            d = compute_persistence(v, "sublevel", dims={0})
            assert len(d.pairs) == _count_components_created(v.data)

    def test_births_deaths_are_voxel_values(self, rng):
        v = random_volume(rng, dims=(5, 5, 4))
        vals = set(np.unique(v.data).tolist())
        for p in compute_persistence(v, "sublevel").pairs:
            assert p.birth in vals
            assert p.essential or p.death in vals


def _euler_by_cell_count(data: np.ndarray, t: float) -> int:
    present = data <= t
    nx, ny, nz = data.shape
    nv = int(present.sum())
    ne = ns = nc = 0
    import itertools
    for x, y, z in itertools.product(range(nx), range(ny), range(nz)):
        if not present[x, y, z]:
            continue
        for axes in [(0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2)]:
            corners_ok = True
            for bits in itertools.product((0, 1), repeat=len(axes)):
                c = [x, y, z]
                for a, b in zip(axes, bits):
                    c[a] += b
                if c[0] >= nx or c[1] >= ny or c[2] >= nz or not present[tuple(c)]:
                    corners_ok = False
                    break
            if corners_ok:
                if len(axes) == 1:
                    ne += 1
                elif len(axes) == 2:
                    ns += 1
                else:
                    nc += 1
    return nv - ne + ns - nc


def _count_components_created(data: np.ndarray) -> int:
    """Independent union-find sweep counting merges with strictly lower birth
    plus essential components (6-connectivity, vertex order by value)."""
    nx, ny, nz = data.shape
    order = sorted(np.ndindex(nx, ny, nz), key=lambda p: (data[p], p))
    parent = {}
    birth = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    count = 0
    for p in order:
        parent[p] = p
        birth[p] = float(data[p])
        for axis in range(3):
            q = list(p)
            for delta in (-1, 1):
                q[axis] = p[axis] + delta
                if 0 <= q[axis] < data.shape[axis]:
                    qq = tuple(q)
                    if qq in parent:
                        ra, rb = find(p), find(qq)
                        if ra != rb:
                            dying = max(birth[ra], birth[rb])
                            if float(data[p]) > dying:
                                count += 1
                            parent[rb] = ra
                            birth[ra] = min(birth[ra], birth[rb])
            q[axis] = p[axis]
    roots = {find(p) for p in parent}
    return count + len(roots)


class TestSerialization:
    def test_csv_round_trip(self, rng, tmp_path):
        v = random_volume(rng, dims=(4, 4, 4))
        for mode in ("sublevel", "superlevel"):
            d = compute_persistence(v, mode)
            path = tmp_path / f"{mode}.csv"
            save_diagram_csv(d, path)
            back = load_diagram_csv(path, mode=mode, source_dims=v.dims)
            assert back.as_multiset() == d.as_multiset()

    def test_essential_serialized_as_inf(self, tmp_path):
        d = PersistenceDiagram("sublevel", (1, 1, 1), (PersistencePair(0, 0.5, math.inf),))
        path = tmp_path / "d.csv"
        save_diagram_csv(d, path)
        text = path.read_text()
        assert "inf" in text.splitlines()[1]


class TestBackends:
    def test_python_backend_matches_compiled(self, rng):
        if backend_name() != "cython":
            pytest.skip("compiled backend unavailable; nothing to compare")
        compiled = engine_mod._kernel
        try:
            for _ in range(6):
                v = random_volume(rng, lo=3, hi=12)
                a = compute_persistence(v, "sublevel")
                engine_mod._kernel = _kernel_py
                b = compute_persistence(v, "sublevel")
                engine_mod._kernel = compiled
                assert a.as_multiset() == b.as_multiset()
        finally:
            engine_mod._kernel = compiled

    def test_env_override_selects_python(self):
        import subprocess
        import sys

        code = (
            "import topopatch.cubical as c; print(c.backend_name())"
        )
        env = dict(os.environ, TOPOPATCH_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True)
        assert out.stdout.strip() == "python"
