"""Dense 3D scalar volumes: the RVOL container, preprocessing, and patching.

A volume is an (nx, ny, nz) grid of float32 values. On disk (RVOL format)
the payload is x-fastest, i.e. flat index = x + nx*(y + ny*z); in memory we
keep a numpy array of shape (nx, ny, nz), so the x-fastest flat view is
``data.ravel(order="F")``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import (
    MalformedHeader,
    NonFiniteValues,
    ParameterError,
    PayloadSizeMismatch,
    TilingError,
    VolumeFileMissing,
)

RVOL_MAGIC = b"RVOL0001"


@dataclass(frozen=True)
class Volume3D:
    """Dense 3D scalar field with explicit dimensions.

    data: float32 array of shape (nx, ny, nz); all values finite.
    spacing: optional (sx, sy, sz) voxel size in mm, metadata only.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ParameterError(f"volume needs 3 positive dims, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteValues("volume contains NaN or infinite voxels")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def flat(self) -> np.ndarray:
        """Voxels in x-fastest order (the RVOL payload order)."""
        return self.data.ravel(order="F")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class PatchGrid:
    """Disjoint tiling of a volume into equally sized patches.

    Patches are kept in lexicographic (i, j, k) block order, i being the
    x-block index.
    """

    source_dims: tuple[int, int, int]
    patch_dims: tuple[int, int, int]
    patches: tuple[tuple[tuple[int, int, int], Volume3D], ...] = field(repr=False)

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(s // p for s, p in zip(self.source_dims, self.patch_dims))

    def __len__(self) -> int:
        return len(self.patches)


def load_volume(path: str | os.PathLike) -> Volume3D:
    """Read an RVOL file.

    Raises VolumeFileMissing, MalformedHeader, PayloadSizeMismatch or
    NonFiniteValues; these are distinct so callers can map them to exit
    codes.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise VolumeFileMissing(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(RVOL_MAGIC))
        if magic != RVOL_MAGIC:
            raise MalformedHeader(f"{path}: bad magic {magic!r}")
        header_line = fh.readline()
        if not header_line.endswith(b"\n"):
            raise MalformedHeader(f"{path}: unterminated header line")
        try:
            header = json.loads(header_line.decode("utf-8"))
            dims = tuple(int(d) for d in header["dims"])
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedHeader(f"{path}: {exc}") from exc
        if len(dims) != 3 or min(dims) < 1:
            raise MalformedHeader(f"{path}: bad dims {dims}")
        spacing = header.get("spacing")
        if spacing is not None:
            spacing = tuple(float(s) for s in spacing)
        payload = fh.read()
    n = dims[0] * dims[1] * dims[2]
    if len(payload) != 4 * n:
        raise PayloadSizeMismatch(
            f"{path}: header dims {dims} need {4 * n} payload bytes, got {len(payload)}"
        )
    voxels = np.frombuffer(payload, dtype="<f4")
    if not np.isfinite(voxels).all():
        raise NonFiniteValues(f"{path}: payload contains non-finite values")
    # copy out of the read-only frombuffer view
    data = voxels.reshape(dims, order="F").copy(order="F")
    return Volume3D(data=data, spacing=spacing)


def save_volume(v: Volume3D, path: str | os.PathLike) -> None:
    """Write an RVOL file; load_volume(save_volume(v)) round-trips bit-exactly."""
    header = {
        "dims": list(v.dims),
        "spacing": list(v.spacing) if v.spacing is not None else None,
    }
    payload = v.flat().astype("<f4", copy=False).tobytes()
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(RVOL_MAGIC)
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)
    os.replace(tmp, path)


def normalize_intensity(v: Volume3D) -> Volume3D:
    """Min-max rescale to [0, 1]; a constant volume maps to all zeros."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi == lo:
        return Volume3D(np.zeros(v.dims, dtype=np.float32), v.spacing)
    out = (v.data - np.float32(lo)) / np.float32(hi - lo)
    return Volume3D(np.clip(out, 0.0, 1.0), v.spacing)


def _gauss_kernel(sigma: float) -> np.ndarray:
    # Truncated at 4*sigma and renormalized to sum exactly 1.
    radius = int(math.floor(4.0 * sigma))
    if radius < 1:
        return np.array([1.0])
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_filter(v: Volume3D, sigma: float) -> Volume3D:
    """Separable Gaussian blur; kernel support 4*sigma, edges clamp-to-edge.

    sigma = 0 (or a kernel radius below one voxel) returns the input
    unchanged.
    """
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    kernel = _gauss_kernel(sigma)
    if kernel.size == 1:
        return v
    out = v.data.astype(np.float64)
    for axis in range(3):
        out = correlate1d(out, kernel, axis=axis, mode="nearest")
    return Volume3D(out.astype(np.float32), v.spacing)


def downsample(v: Volume3D, factor: int) -> Volume3D:
    """Block-mean pooling; partial blocks at the high-index boundary average
    over the voxels that exist. Output dims are ceil(n / factor)."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ParameterError(f"factor must be a positive integer, got {factor}")
    if factor == 1:
        return v
    out = v.data.astype(np.float64)
    for axis in range(3):
        n = out.shape[axis]
        starts = np.arange(0, n, factor)
        sums = np.add.reduceat(out, starts, axis=axis)
        counts = np.minimum(starts + factor, n) - starts
        shape = [1, 1, 1]
        shape[axis] = len(starts)
        out = sums / counts.reshape(shape)
    return Volume3D(out.astype(np.float32), v.spacing)


def crop_center(v: Volume3D, target: tuple[int, int, int]) -> Volume3D:
    """Centered crop; an odd margin drops the extra voxel on the high side."""
    target = tuple(int(t) for t in target)
    for axis, (t, s) in enumerate(zip(target, v.dims)):
        if t < 1 or t > s:
            raise ParameterError(
                f"crop target {t} invalid for source dim {s} on axis {'xyz'[axis]}"
            )
    offsets = [(s - t) // 2 for s, t in zip(v.dims, target)]
    (ox, oy, oz), (tx, ty, tz) = offsets, target
    return Volume3D(v.data[ox : ox + tx, oy : oy + ty, oz : oz + tz].copy(), v.spacing)


def extract_patches(v: Volume3D, patch_dims: tuple[int, int, int]) -> PatchGrid:
    """Cut the volume into disjoint patches of the given size.

    Every patch dim must divide the matching volume dim; patches come out in
    lexicographic (i, j, k) order and tile the source exactly.
    """
    patch_dims = tuple(int(p) for p in patch_dims)
    for axis, (p, s) in enumerate(zip(patch_dims, v.dims)):
        if p < 1 or s % p != 0:
            raise TilingError(
                f"patch dim {p} does not tile volume dim {s} on axis {'xyz'[axis]}"
            )
    px, py, pz = patch_dims
    patches = []
    for i in range(v.dims[0] // px):
        for j in range(v.dims[1] // py):
            for k in range(v.dims[2] // pz):
                block = v.data[
                    i * px : (i + 1) * px,
                    j * py : (j + 1) * py,
                    k * pz : (k + 1) * pz,
                ].copy()
                patches.append(((i, j, k), Volume3D(block, v.spacing)))
    return PatchGrid(source_dims=v.dims, patch_dims=patch_dims, patches=tuple(patches))


def assemble_patches(grid: PatchGrid) -> Volume3D:
    """Inverse of extract_patches; reconstructs the source volume exactly."""
    out = np.empty(grid.source_dims, dtype=np.float32)
    px, py, pz = grid.patch_dims
    spacing = None
    for (i, j, k), patch in grid.patches:
        out[i * px : (i + 1) * px, j * py : (j + 1) * py, k * pz : (k + 1) * pz] = patch.data
        spacing = patch.spacing
    return Volume3D(out, spacing)
