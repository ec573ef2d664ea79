import hashlib
import os

import numpy as np
import pytest

from topopatch.cubical import betti_numbers
from topopatch.errors import ParameterError, PlacementError
from topopatch.evaluation import load_manifest
from topopatch.synth import (
    LesionSpec,
    PhantomSpec,
    TopologySpec,
    generate_cohort,
    generate_phantom,
    spec_from_json,
    spec_to_json,
)


def small_spec(**kw):
    base = dict(dims=(30, 36, 30), patch_dims=(10, 12, 10), n_subjects=(4, 4),
                images_per_subject=(1, 2), noise_sigma=0.02, seed=5)
    base.update(kw)
    return PhantomSpec(**base)


class TestDeterminism:
    def test_same_indices_identical(self):
        spec = small_spec(topology=TopologySpec(1, 2, (3.0, 4.0)))
        a, la = generate_phantom(spec, 2, 1)
        b, lb = generate_phantom(spec, 2, 1)
        assert la == lb
        assert np.array_equal(a.data, b.data)

    def test_different_images_share_geometry(self):
        spec = small_spec(noise_sigma=0.0, topology=TopologySpec(2, 2, (3.0, 4.0)))
        a, _ = generate_phantom(spec, 1, 0)
        b, _ = generate_phantom(spec, 1, 1)
        assert np.array_equal(a.data, b.data)  # noise-free images coincide

    def test_noise_differs_across_images(self):
        spec = small_spec(topology=None)
        a, _ = generate_phantom(spec, 1, 0)
        b, _ = generate_phantom(spec, 1, 1)
        assert not np.array_equal(a.data, b.data)

    def test_cohort_regeneration_byte_identical(self, tmp_path):
        spec = small_spec(n_subjects=(2, 2))
        m1 = generate_cohort(spec, tmp_path / "a")
        m2 = generate_cohort(spec, tmp_path / "b")
        for rec in load_manifest(m1):
            for img in rec.images:
                h1 = hashlib.sha256((tmp_path / "a" / img).read_bytes()).hexdigest()
                h2 = hashlib.sha256((tmp_path / "b" / img).read_bytes()).hexdigest()
                assert h1 == h2


class TestTopologySignal:
    def test_void_count_equals_b2(self):
        spec = small_spec(dims=(40, 40, 40), patch_dims=(10, 10, 10),
                          noise_sigma=0.0,
                          topology=TopologySpec(3, 3, (3.5, 5.0)))
        vol, _ = generate_phantom(spec, 0, 0)
        b0, b1, b2 = betti_numbers(vol, 0.3, "sublevel")
        assert b2 == 3

    def test_void_count_ground_truth_over_subjects(self):
        spec = small_spec(dims=(40, 40, 40), patch_dims=(10, 10, 10),
                          noise_sigma=0.0, n_subjects=(3, 3),
                          topology=TopologySpec(1, 4, (3.0, 4.5)))
        for subject, expected in ((0, 1), (4, 4)):
            vol, label = generate_phantom(spec, subject, 0)
            assert betti_numbers(vol, 0.3, "sublevel")[2] == expected

    def test_count_ranges_sampled_per_subject(self):
        spec = small_spec(dims=(40, 40, 40), patch_dims=(10, 10, 10),
                          noise_sigma=0.0, n_subjects=(12, 1),
                          topology=TopologySpec((1, 3), 1, (3.0, 4.0)))
        counts = {betti_numbers(generate_phantom(spec, s, 0)[0], 0.3)[2]
                  for s in range(12)}
        assert counts <= {1, 2, 3}
        assert len(counts) > 1

    def test_placement_error_when_impossible(self):
        spec = small_spec(dims=(20, 24, 20), patch_dims=(10, 12, 10),
                          topology=TopologySpec(40, 40, (4.0, 6.0)))
        with pytest.raises(PlacementError):
            generate_phantom(spec, 0, 0)


class TestLesionSignal:
    def _patch_mean(self, vol, spec, index):
        px, py, pz = spec.patch_dims
        i, j, k = index
        return float(vol.data[i * px:(i + 1) * px, j * py:(j + 1) * py,
                              k * pz:(k + 1) * pz].mean())

    def test_lesion_darkens_class1_patch(self):
        lesion = LesionSpec(patch_index=(1, 1, 1), delta=-0.3, radius=3.0)
        spec = small_spec(lesion=lesion, noise_sigma=0.02, n_subjects=(10, 10))
        m0 = np.mean([self._patch_mean(generate_phantom(spec, s, 0)[0], spec, (1, 1, 1))
                      for s in range(10)])
        m1 = np.mean([self._patch_mean(generate_phantom(spec, s, 0)[0], spec, (1, 1, 1))
                      for s in range(10, 20)])
        assert m0 - m1 > 0.01

    def test_zero_delta_keeps_classes_identical(self):
        lesion = LesionSpec(patch_index=(1, 1, 1), delta=0.0, radius=3.0)
        spec = small_spec(lesion=lesion, noise_sigma=0.05, n_subjects=(25, 25))
        m0 = np.mean([self._patch_mean(generate_phantom(spec, s, 0)[0], spec, (1, 1, 1))
                      for s in range(25)])
        m1 = np.mean([self._patch_mean(generate_phantom(spec, s, 0)[0], spec, (1, 1, 1))
                      for s in range(25, 50)])
        assert abs(m0 - m1) < 0.05 / 10

    def test_lesion_must_fit_patch(self):
        with pytest.raises(ParameterError):
            small_spec(lesion=LesionSpec(patch_index=(0, 0, 0), delta=-0.1, radius=6.0))

    def test_lesion_patch_must_exist(self):
        with pytest.raises(ParameterError):
            small_spec(lesion=LesionSpec(patch_index=(5, 0, 0), delta=-0.1, radius=3.0))


class TestCohort:
    def test_manifest_counts_and_files(self, tmp_path):
        spec = small_spec(n_subjects=(5, 4), images_per_subject=(1, 3))
        manifest = generate_cohort(spec, tmp_path / "c")
        records = load_manifest(manifest)
        assert len(records) == 9
        assert sum(r.label for r in records) == 4
        for r in records:
            assert 1 <= len(r.images) <= 3
            for img in r.images:
                assert os.path.isfile(tmp_path / "c" / img)

    def test_prevalence_by_construction(self, tmp_path):
        spec = small_spec(n_subjects=(9, 11), images_per_subject=(1, 1))
        records = load_manifest(generate_cohort(spec, tmp_path / "p"))
        prevalence = sum(r.label for r in records) / len(records)
        assert abs(prevalence - 0.55) < 1 / len(records) + 1e-9

    def test_values_clamped(self):
        spec = small_spec(noise_sigma=0.3)
        vol, _ = generate_phantom(spec, 0, 0)
        assert vol.data.min() >= 0.0 and vol.data.max() <= 1.0

    def test_spec_json_round_trip(self):
        spec = small_spec(lesion=LesionSpec((1, 1, 1), -0.1, 3.0),
                          topology=TopologySpec((1, 2), 4, (3.0, 4.0), 0.15))
        assert spec_from_json(spec_to_json(spec)) == spec
