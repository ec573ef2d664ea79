import numpy as np
import pytest

from topopatch.volume import Volume3D


def random_volume(rng, dims=None, lo=1, hi=8, integer=False) -> Volume3D:
    if dims is None:
        dims = tuple(int(d) for d in rng.integers(lo, hi, size=3))
    if integer:
        data = rng.integers(0, 4, size=dims).astype(np.float32)
    else:
        data = rng.random(dims, dtype=np.float32)
    return Volume3D(data)


def hollow_cube_shell() -> Volume3D:
    """Zeros on the 3x3x3 surface of a 5^3 field of ones; Betti (1, 0, 1)."""
    v = np.ones((5, 5, 5), np.float32)
    v[1:4, 1:4, 1:4] = 0.0
    v[2, 2, 2] = 1.0
    return Volume3D(v)


def solid_torus_ring() -> Volume3D:
    """Square ring of zeros, thickness 1, in a plane; Betti (1, 1, 0)."""
    v = np.ones((7, 7, 3), np.float32)
    v[1:6, 1:6, 1] = 0.0
    v[2:5, 2:5, 1] = 1.0
    return Volume3D(v)


def hollow_torus_surface() -> Volume3D:
    """Hollowed square-annulus tube; a voxel torus surface, Betti (1, 2, 1)."""
    v = np.ones((11, 11, 5), np.float32)
    for x in range(11):
        for y in range(11):
            ring = max(abs(x - 5), abs(y - 5))
            if 2 <= ring <= 4:
                v[x, y, 1:4] = 0.0
            if ring == 3:
                v[x, y, 2] = 1.0
    return Volume3D(v)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
