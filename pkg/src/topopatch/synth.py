"""Synthetic phantom cohorts with controllable local and global signal.

The global signal is a class-dependent count of hollow-sphere shells (low
value on the shell, so each one is a closed 2-cycle in the sublevel
filtration); the local signal is an intensity depression inside one
designated patch. Longitudinal images of one subject share geometry and
differ by voxel noise.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import zoom

from .errors import ParameterError, PlacementError
from .evaluation import SubjectRecord, save_manifest
from .volume import Volume3D, save_volume


@dataclass(frozen=True)
class LesionSpec:
    patch_index: tuple[int, int, int]
    delta: float = -0.15
    radius: float = 3.0


@dataclass(frozen=True)
class TopologySpec:
    """Void counts per class, either a fixed int or an inclusive (lo, hi)
    range sampled per subject (overlapping ranges make the global signal
    deliberately weak)."""

    class0_voids: int | tuple[int, int] = 0
    class1_voids: int | tuple[int, int] = 0
    radius_range: tuple[float, float] = (4.0, 6.0)
    shell_value: float = 0.1

    def count_range(self, label: int) -> tuple[int, int]:
        c = self.class1_voids if label == 1 else self.class0_voids
        if isinstance(c, (int, np.integer)):
            return int(c), int(c)
        lo, hi = int(c[0]), int(c[1])
        return lo, hi


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (60, 72, 60)
    patch_dims: tuple[int, int, int] = (10, 12, 10)
    n_subjects: tuple[int, int] = (20, 20)  # (class 0, class 1)
    images_per_subject: tuple[int, int] = (1, 3)
    lesion: LesionSpec | None = None
    topology: TopologySpec | None = None
    noise_sigma: float = 0.02
    base_value: float = 0.55
    texture_amplitude: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        if min(self.n_subjects) < 0 or max(self.n_subjects) < 1:
            raise ParameterError("need at least one subject")
        lo, hi = self.images_per_subject
        if lo < 1 or hi < lo:
            raise ParameterError(f"bad images_per_subject range {self.images_per_subject}")
        for s, p in zip(self.dims, self.patch_dims):
            if s % p:
                raise ParameterError(f"patch dims {self.patch_dims} do not tile {self.dims}")
        if self.lesion is not None:
            grid = tuple(s // p for s, p in zip(self.dims, self.patch_dims))
            for i, g in zip(self.lesion.patch_index, grid):
                if not (0 <= i < g):
                    raise ParameterError(f"lesion patch {self.lesion.patch_index} outside grid {grid}")
            if 2 * self.lesion.radius + 2 > min(self.patch_dims):
                raise ParameterError("lesion does not fit inside its patch")


def _subject_label(spec: PhantomSpec, subject_index: int) -> int:
    n0, n1 = spec.n_subjects
    if not (0 <= subject_index < n0 + n1):
        raise ParameterError(f"subject index {subject_index} outside cohort of {n0 + n1}")
    return 0 if subject_index < n0 else 1


def _images_for_subject(spec: PhantomSpec, subject_index: int) -> int:
    lo, hi = spec.images_per_subject
    rng = np.random.default_rng([spec.seed, subject_index, 101])
    return int(rng.integers(lo, hi + 1))


def _base_texture(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(6, 6, 6))
    factors = [d / 6 for d in spec.dims]
    smooth = zoom(coarse, factors, order=1)
    return (spec.base_value + spec.texture_amplitude * smooth).astype(np.float32)


def _place_voids(spec: PhantomSpec, rng: np.random.Generator, count: int):
    """Non-overlapping (center, radius) placements with a boundary margin
    wide enough that every shell closes strictly inside the volume."""
    placed = []
    tries = 0
    while len(placed) < count:
        tries += 1
        if tries > 200 * max(count, 1):
            raise PlacementError(f"could not place {count} voids in {spec.dims}")
        r = float(rng.uniform(*spec.topology.radius_range))
        margin = r + 2.0
        if any(d - 1 - margin <= margin for d in spec.dims):
            raise PlacementError(
                f"void radius {r:.1f} cannot fit inside dims {spec.dims}")
        center = np.array([rng.uniform(margin, d - 1 - margin) for d in spec.dims])
        if any(np.linalg.norm(center - c) < r + pr + 3.0 for c, pr in placed):
            continue
        placed.append((center, r))
    return placed


def generate_phantom(spec: PhantomSpec, subject_index: int, image_index: int):
    """One deterministic (volume, label) draw.

    Geometry (voids, lesion jitter) is a function of (seed, subject); noise
    is a function of (seed, subject, image). Values are clamped to [0, 1].
    """
    label = _subject_label(spec, subject_index)
    geom_rng = np.random.default_rng([spec.seed, subject_index, 7])
    vol = _base_texture(spec, geom_rng)
    nx, ny, nz = spec.dims
    xs, ys, zs = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")

    if spec.topology is not None:
        lo, hi = spec.topology.count_range(label)
        count = int(geom_rng.integers(lo, hi + 1))
        for center, r in _place_voids(spec, geom_rng, count):
            dist = np.sqrt((xs - center[0]) ** 2 + (ys - center[1]) ** 2 + (zs - center[2]) ** 2)
            shell = np.abs(dist - r) <= 1.2
            vol[shell] = spec.topology.shell_value

    if spec.lesion is not None and label == 1:
        px, py, pz = spec.patch_dims
        i, j, k = spec.lesion.patch_index
        rad = spec.lesion.radius
        center = np.array([
            (i + 0.5) * px + geom_rng.uniform(-1.0, 1.0),
            (j + 0.5) * py + geom_rng.uniform(-1.0, 1.0),
            (k + 0.5) * pz + geom_rng.uniform(-1.0, 1.0),
        ])
        dist = np.sqrt((xs - center[0]) ** 2 + (ys - center[1]) ** 2 + (zs - center[2]) ** 2)
        vol = vol + np.float32(spec.lesion.delta) * (dist <= rad).astype(np.float32)

    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng([spec.seed, subject_index, image_index, 13])
        vol = vol + noise_rng.normal(0.0, spec.noise_sigma, size=spec.dims).astype(np.float32)

    return Volume3D(np.clip(vol, 0.0, 1.0).astype(np.float32)), label


def generate_cohort(spec: PhantomSpec, out_dir) -> str:
    """Write every phantom as RVOL plus the JSON-lines manifest; returns the
    manifest path. Regeneration with the same spec is byte-identical."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    records = []
    n_total = sum(spec.n_subjects)
    for subject_index in range(n_total):
        label = _subject_label(spec, subject_index)
        sid = f"sub-{subject_index:04d}"
        images = []
        for image_index in range(_images_for_subject(spec, subject_index)):
            vol, _ = generate_phantom(spec, subject_index, image_index)
            rel = f"{sid}_img-{image_index:02d}.rvol"
            save_volume(vol, os.path.join(out_dir, rel))
            images.append(rel)
        records.append(SubjectRecord(subject_id=sid, label=label, images=tuple(images)))
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    save_manifest(records, manifest_path)
    return manifest_path


def spec_to_json(spec: PhantomSpec) -> str:
    d = {
        "dims": list(spec.dims),
        "patch_dims": list(spec.patch_dims),
        "n_subjects": list(spec.n_subjects),
        "images_per_subject": list(spec.images_per_subject),
        "noise_sigma": spec.noise_sigma,
        "base_value": spec.base_value,
        "texture_amplitude": spec.texture_amplitude,
        "seed": spec.seed,
        "lesion": None,
        "topology": None,
    }
    if spec.lesion is not None:
        d["lesion"] = {"patch_index": list(spec.lesion.patch_index),
                       "delta": spec.lesion.delta, "radius": spec.lesion.radius}
    if spec.topology is not None:
        def _count(c):
            return list(c) if isinstance(c, tuple) else c
        d["topology"] = {"class0_voids": _count(spec.topology.class0_voids),
                         "class1_voids": _count(spec.topology.class1_voids),
                         "radius_range": list(spec.topology.radius_range),
                         "shell_value": spec.topology.shell_value}
    return json.dumps(d, indent=1)


def spec_from_json(text: str) -> PhantomSpec:
    d = json.loads(text)
    lesion = None
    if d.get("lesion"):
        l = d["lesion"]
        lesion = LesionSpec(tuple(l["patch_index"]), float(l["delta"]), float(l["radius"]))
    topology = None
    if d.get("topology"):
        t = d["topology"]
        def _count(c):
            return tuple(int(x) for x in c) if isinstance(c, (list, tuple)) else int(c)
        topology = TopologySpec(_count(t["class0_voids"]), _count(t["class1_voids"]),
                                tuple(t["radius_range"]), float(t.get("shell_value", 0.1)))
    return PhantomSpec(
        dims=tuple(d.get("dims", (60, 72, 60))),
        patch_dims=tuple(d.get("patch_dims", (10, 12, 10))),
        n_subjects=tuple(d.get("n_subjects", (20, 20))),
        images_per_subject=tuple(d.get("images_per_subject", (1, 3))),
        lesion=lesion,
        topology=topology,
        noise_sigma=float(d.get("noise_sigma", 0.02)),
        base_value=float(d.get("base_value", 0.55)),
        texture_amplitude=float(d.get("texture_amplitude", 0.08)),
        seed=int(d.get("seed", 0)),
    )
