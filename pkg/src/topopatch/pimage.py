"""Persistence images: fixed-size rasters of persistence diagrams.

Diagram points move to birth-persistence coordinates, get a weight linear
in persistence, and are smeared with an isotropic Gaussian whose mass is
integrated exactly per pixel cell (2D CDF differences). Columns follow the
birth axis, rows the persistence axis (row 0 = lowest persistence).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ParameterError
from .volume import Volume3D
from .cubical.types import PersistenceDiagram


@dataclass(frozen=True)
class PersistenceImageParams:
    resolution: tuple[int, int] = (50, 50)  # (H, W) = (persistence, birth) bins
    birth_range: tuple[float, float] = (0.0, 1.0)
    pers_range: tuple[float, float] = (0.0, 1.0)
    sigma: float = 0.05
    # reference persistence at which the linear weight saturates to 1;
    # defaults to the top of pers_range
    weight_scale: float | None = None

    def __post_init__(self):
        h, w = self.resolution
        b_lo, b_hi = self.birth_range
        p_lo, p_hi = self.pers_range
        if h < 1 or w < 1:
            raise ParameterError(f"resolution must be positive, got {self.resolution}")
        if not b_hi > b_lo:
            raise ParameterError(f"birth_range must increase, got {self.birth_range}")
        if not (p_hi > p_lo >= 0):
            raise ParameterError(f"pers_range must satisfy hi > lo >= 0, got {self.pers_range}")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if self.weight_scale is not None and not self.weight_scale > 0:
            raise ParameterError(f"weight_scale must be positive, got {self.weight_scale}")

    @property
    def weight_reference(self) -> float:
        return self.pers_range[1] if self.weight_scale is None else self.weight_scale


@dataclass(frozen=True)
class PersistenceImage:
    params: PersistenceImageParams
    pixels: np.ndarray = field(repr=False)  # (H, W) non-negative float32
    source_dim: int = 1

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float32)
        if arr.shape != tuple(self.params.resolution):
            raise ParameterError(
                f"pixels shape {arr.shape} does not match resolution {self.params.resolution}"
            )
        if not np.isfinite(arr).all() or (arr < 0).any():
            raise ParameterError("pixels must be finite and non-negative")
        object.__setattr__(self, "pixels", arr)


def to_birth_persistence(d: PersistenceDiagram, dim: int) -> np.ndarray:
    """(N, 2) array of (birth, persistence) for the chosen homology dimension.

    Persistence is the magnitude |death - birth| so superlevel diagrams
    (descending pairs) land in the same coordinates; essential pairs are
    dropped.
    """
    pts = [(p.birth, p.persistence) for p in d.pairs if p.dim == dim and not p.essential]
    if not pts:
        return np.zeros((0, 2), dtype=np.float64)
    return np.asarray(pts, dtype=np.float64)


def render_persistence_image(pts: np.ndarray, params: PersistenceImageParams,
                             source_dim: int = 1) -> PersistenceImage:
    """Sum of weighted, per-pixel-integrated Gaussians, one per point.

    Weight is persistence / weight_reference clamped to [0, 1]; points
    outside the ranges still contribute whatever Gaussian mass falls inside.
    """
    h, w = params.resolution
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    pixels = np.zeros((h, w), dtype=np.float64)
    if pts.shape[0]:
        b_lo, b_hi = params.birth_range
        p_lo, p_hi = params.pers_range
        b_edges = np.linspace(b_lo, b_hi, w + 1)
        p_edges = np.linspace(p_lo, p_hi, h + 1)
        births = pts[:, 0][:, None]
        perses = pts[:, 1][:, None]
        weights = np.clip(pts[:, 1] / params.weight_reference, 0.0, 1.0)
        cdf_b = ndtr((b_edges[None, :] - births) / params.sigma)  # (N, W+1)
        cdf_p = ndtr((p_edges[None, :] - perses) / params.sigma)  # (N, H+1)
        mass_b = np.diff(cdf_b, axis=1)
        mass_p = np.diff(cdf_p, axis=1)
        pixels = np.einsum("n,nh,nw->hw", weights, mass_p, mass_b)
    return PersistenceImage(params=params, pixels=pixels.astype(np.float32),
                            source_dim=source_dim)


def resample_image(img: PersistenceImage, factor: int) -> PersistenceImage:
    """Block-mean pooling by the factor, which must divide both resolutions."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ParameterError(f"factor must be a positive integer, got {factor}")
    h, w = img.params.resolution
    if h % factor or w % factor:
        raise ParameterError(f"factor {factor} does not divide resolution {h}x{w}")
    if factor == 1:
        return img
    hh, ww = h // factor, w // factor
    pooled = img.pixels.reshape(hh, factor, ww, factor).mean(axis=(1, 3))
    params = PersistenceImageParams(
        resolution=(hh, ww),
        birth_range=img.params.birth_range,
        pers_range=img.params.pers_range,
        sigma=img.params.sigma,
        weight_scale=img.params.weight_scale,
    )
    return PersistenceImage(params=params, pixels=pooled.astype(np.float32),
                            source_dim=img.source_dim)


def image_to_volume(img: PersistenceImage) -> Volume3D:
    """Pack the raster into the volume container (nx=W, ny=H, nz=1) so it can
    ride the RVOL format."""
    h, w = img.pixels.shape
    return Volume3D(img.pixels.T.reshape(w, h, 1).copy())


def volume_to_image(v: Volume3D, params: PersistenceImageParams, source_dim: int = 1) -> PersistenceImage:
    w, h, nz = v.dims
    if nz != 1 or (h, w) != tuple(params.resolution):
        raise ParameterError(f"volume dims {v.dims} do not hold a {params.resolution} image")
    return PersistenceImage(params=params, pixels=v.data[:, :, 0].T.copy(), source_dim=source_dim)
