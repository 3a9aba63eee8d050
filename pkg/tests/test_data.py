"""Phantom generator checks: geometry against analytic membership, label
nesting, masking, normalization, augmentation, artifact injection, and the
volume file round trip."""

import numpy as np
import pytest

from amgformer.errors import (ContractError, DataError, DegenerateError,
                              ParameterError)
from amgformer.mmv import read_mmv, write_mmv
from amgformer.phantoms import (DEFAULT_INTENSITY, MODALITIES, ModalityBundle,
                                PhantomSpec, apply_geometric, apply_mask,
                                augment, blur3, enumerate_combinations,
                                generate, inject_artifact, normalize_bundle,
                                normalize_zscore)

# degenerate ranges and zero jitter pin the geometry exactly
FIXED = dict(wt_radius=(9.0, 9.0), tc_radius=(5.0, 5.0), et_radius=(2.5, 2.5),
             brain_radius=(13.0, 13.0), wt_jitter=0.0, inner_jitter=0.0)


def membership(size, radii):
    g = np.indices((size,) * 3, dtype=np.float64)
    c = (size - 1) / 2.0
    return (((g - c) / radii) ** 2).sum(axis=0) <= 1.0


class TestGenerate:
    def test_known_geometry_matches_analytic_membership(self):
        spec = PhantomSpec(noise_sigma=0.0, **FIXED)
        bundle = generate(spec, seed=0)
        lab = bundle.labels[0]
        np.testing.assert_array_equal(lab >= 1, membership(32, 9.0))
        np.testing.assert_array_equal(lab >= 2, membership(32, 5.0))
        np.testing.assert_array_equal(lab == 3, membership(32, 2.5))

    def test_noise_free_intensities_follow_table(self):
        spec = PhantomSpec(noise_sigma=0.0, **FIXED)
        bundle = generate(spec, seed=1)
        lab = bundle.labels[0]
        brain = membership(32, 13.0)
        table = np.asarray(DEFAULT_INTENSITY, dtype=np.float32)
        for m in range(4):
            want = np.where(brain, table[lab, m], 0.0).astype(np.float32)
            np.testing.assert_array_equal(bundle.volumes[m][0, 0], want)

    def test_labels_nest(self):
        spec = PhantomSpec()
        for seed in range(8):
            lab = generate(spec, seed=seed, batch=2).labels
            assert ((lab == 3) <= (lab >= 2)).all()
            assert ((lab >= 2) <= (lab >= 1)).all()
            for k in (1, 2, 3):
                assert (lab == k).any(), f"seed {seed} missing class {k}"

    def test_histograms_near_continuous_volumes(self):
        spec = PhantomSpec(noise_sigma=0.0, **FIXED)
        lab = generate(spec, seed=2).labels[0]
        for region, r in (((lab >= 1), 9.0), ((lab >= 2), 5.0), ((lab == 3), 2.5)):
            cont = 4.0 / 3.0 * np.pi * r ** 3
            assert abs(region.sum() - cont) < 0.35 * cont

    def test_determinism(self):
        spec = PhantomSpec()
        a = generate(spec, seed=7, batch=2)
        b = generate(spec, seed=7, batch=2)
        for va, vb in zip(a.volumes, b.volumes):
            np.testing.assert_array_equal(va, vb)
        np.testing.assert_array_equal(a.labels, b.labels)
        c = generate(spec, seed=8, batch=2)
        assert not np.array_equal(a.volumes[0], c.volumes[0])

    def test_background_exactly_zero_outside_brain(self):
        bundle = generate(PhantomSpec(), seed=3)
        corner = bundle.volumes[0][0, 0, :3, :3, :3]
        np.testing.assert_array_equal(corner, 0.0)

    def test_non_nested_spec_rejected(self):
        with pytest.raises(ParameterError):
            PhantomSpec(tc_radius=(5.0, 9.5), wt_radius=(9.0, 10.0))
        with pytest.raises(ParameterError):
            PhantomSpec(intensity=((1.0,) * 4,) * 3)

    def test_contrast_assignment(self):
        table = np.asarray(DEFAULT_INTENSITY)
        fl, t1ce = MODALITIES.index("FLAIR"), MODALITIES.index("T1CE")
        et_contrast = np.abs(table[3] - table[2])
        assert et_contrast.argmax() == t1ce
        edema_contrast = np.abs(table[1] - table[0])
        assert edema_contrast.argmax() == fl


class TestCombinations:
    def test_paper_column_order(self):
        combos = enumerate_combinations()
        assert len(combos) == 15

        def bits(*names):
            return np.array([m in names for m in MODALITIES])

        np.testing.assert_array_equal(combos[0], bits("T2"))
        np.testing.assert_array_equal(combos[1], bits("T1"))
        np.testing.assert_array_equal(combos[2], bits("T1CE"))
        np.testing.assert_array_equal(combos[3], bits("FLAIR"))
        np.testing.assert_array_equal(combos[4], bits("T1", "T2"))
        np.testing.assert_array_equal(combos[5], bits("T1CE", "T1"))
        np.testing.assert_array_equal(combos[6], bits("FLAIR", "T1CE"))
        np.testing.assert_array_equal(combos[7], bits("T1CE", "T2"))
        np.testing.assert_array_equal(combos[8], bits("FLAIR", "T2"))
        np.testing.assert_array_equal(combos[9], bits("FLAIR", "T1"))
        np.testing.assert_array_equal(combos[10], bits("FLAIR", "T1CE", "T1"))
        np.testing.assert_array_equal(combos[11], bits("FLAIR", "T1CE", "T2"))
        np.testing.assert_array_equal(combos[12], bits("FLAIR", "T1", "T2"))
        np.testing.assert_array_equal(combos[13], bits("T1CE", "T1", "T2"))
        np.testing.assert_array_equal(combos[14], bits("FLAIR", "T1CE", "T1", "T2"))

    def test_all_distinct_and_nonempty(self):
        combos = enumerate_combinations()
        assert len({tuple(c) for c in combos}) == 15
        assert all(c.any() for c in combos)


class TestApplyMask:
    def test_zero_fills_and_records(self):
        bundle = generate(PhantomSpec(), seed=0)
        masked = apply_mask(bundle, [True, False, False, True])
        assert not masked.volumes[1].any() and not masked.volumes[2].any()
        assert masked.volumes[0].any() and masked.volumes[3].any()
        np.testing.assert_array_equal(masked.mask, [True, False, False, True])
        np.testing.assert_array_equal(masked.labels, bundle.labels)
        masked.validate()

    def test_source_untouched(self):
        bundle = generate(PhantomSpec(), seed=0)
        before = bundle.volumes[1].copy()
        apply_mask(bundle, [True, False, True, True])
        np.testing.assert_array_equal(bundle.volumes[1], before)

    def test_full_mask_is_noop(self):
        bundle = generate(PhantomSpec(), seed=1)
        same = apply_mask(bundle, [True] * 4)
        for a, b in zip(same.volumes, bundle.volumes):
            np.testing.assert_array_equal(a, b)

    def test_idempotent(self):
        bundle = generate(PhantomSpec(), seed=1)
        once = apply_mask(bundle, [False, True, True, False])
        twice = apply_mask(once, [False, True, True, False])
        for a, b in zip(once.volumes, twice.volumes):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(once.mask, twice.mask)

    def test_all_absent_rejected(self):
        bundle = generate(PhantomSpec(), seed=1)
        with pytest.raises(ContractError):
            apply_mask(bundle, [False] * 4)
        partial = apply_mask(bundle, [False, True, False, False])
        with pytest.raises(ContractError):
            apply_mask(partial, [True, False, True, True])


class TestNormalize:
    def test_foreground_moments(self):
        rng = np.random.default_rng(0)
        v = np.zeros((20, 20, 20), dtype=np.float32)
        v[4:16, 4:16, 4:16] = rng.normal(3.0, 2.0, size=(12, 12, 12))
        out = normalize_zscore(v)
        fg = out[v != 0]
        assert abs(fg.mean()) < 1e-5 and abs(fg.std() - 1.0) < 1e-5
        np.testing.assert_array_equal(out[v == 0], 0.0)

    def test_affine_invariance(self):
        rng = np.random.default_rng(1)
        v = np.zeros((10, 10, 10))
        v[2:8, 2:8, 2:8] = rng.normal(size=(6, 6, 6))
        shifted = np.where(v != 0, 2.5 * v + 7.0, 0.0)
        np.testing.assert_allclose(normalize_zscore(shifted), normalize_zscore(v),
                                   atol=1e-10)

    def test_all_zero_passes_through(self):
        v = np.zeros((4, 4, 4), dtype=np.float32)
        np.testing.assert_array_equal(normalize_zscore(v), v)

    def test_constant_foreground_rejected(self):
        v = np.full((4, 4, 4), 3.0)
        with pytest.raises(DegenerateError):
            normalize_zscore(v)

    def test_bundle_skips_absent(self):
        bundle = apply_mask(generate(PhantomSpec(), seed=4), [True, True, False, True])
        normed = normalize_bundle(bundle)
        assert not normed.volumes[2].any()
        fg = normed.volumes[0][bundle.volumes[0] != 0]
        assert abs(fg.mean()) < 1e-5
        normed.validate()


class TestAugment:
    def test_identity_parameters(self):
        bundle = generate(PhantomSpec(), seed=5)
        same = apply_geometric(bundle, 0.0, (0, 1), [False, False, False])
        for a, b in zip(same.volumes, bundle.volumes):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(same.labels, bundle.labels)

    def test_flip_involution(self):
        bundle = generate(PhantomSpec(), seed=5)
        flips = [True, False, True]
        twice = apply_geometric(apply_geometric(bundle, 0.0, (0, 1), flips),
                                0.0, (0, 1), flips)
        for a, b in zip(twice.volumes, bundle.volumes):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(twice.labels, bundle.labels)

    def test_flips_preserve_label_counts(self):
        bundle = generate(PhantomSpec(), seed=6)
        flipped = apply_geometric(bundle, 0.0, (0, 1), [True, True, False])
        for k in range(4):
            assert (flipped.labels == k).sum() == (bundle.labels == k).sum()

    def test_rotation_keeps_label_alphabet_and_shapes(self):
        bundle = generate(PhantomSpec(), seed=6)
        rotated = apply_geometric(bundle, 10.0, (1, 2), [False] * 3)
        assert rotated.labels.shape == bundle.labels.shape
        assert set(np.unique(rotated.labels)) <= {0, 1, 2, 3}
        assert rotated.volumes[0].shape == bundle.volumes[0].shape

    def test_augment_deterministic_and_bounded(self):
        bundle = generate(PhantomSpec(), seed=7)
        a = augment(bundle, seed=11)
        b = augment(bundle, seed=11)
        for va, vb in zip(a.volumes, b.volumes):
            np.testing.assert_array_equal(va, vb)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert not np.array_equal(a.volumes[0], augment(bundle, seed=12).volumes[0])

    def test_augment_keeps_absent_modalities_zero(self):
        bundle = apply_mask(generate(PhantomSpec(), seed=7), [True, False, True, True])
        out = augment(bundle, seed=3)
        assert not out.volumes[1].any()
        out.validate()


class TestArtifact:
    def test_identity_with_zero_parameters(self):
        spec = PhantomSpec(blur_sigma=0.0, artifact_noise=0.0)
        bundle = generate(spec, seed=8)
        out = inject_artifact(bundle, 1, spec)
        for a, b in zip(out.volumes, bundle.volumes):
            np.testing.assert_array_equal(a, b)

    def test_only_target_changes(self):
        spec = PhantomSpec()
        bundle = generate(spec, seed=8)
        out = inject_artifact(bundle, 2, spec, seed=1)
        assert not np.array_equal(out.volumes[2], bundle.volumes[2])
        for m in (0, 1, 3):
            np.testing.assert_array_equal(out.volumes[m], bundle.volumes[m])
        np.testing.assert_array_equal(out.labels, bundle.labels)

    def test_blur_preserves_mean(self):
        rng = np.random.default_rng(2)
        noise = (rng.normal(1.0, 0.3, size=(32, 32, 32))).astype(np.float32)
        phantom = generate(PhantomSpec(), seed=0).volumes[1][0, 0]
        for v in (noise, phantom):
            for sigma in (0.8, 1.5, 3.0):
                blurred = blur3(v, sigma)
                assert abs(blurred.mean() - v.mean()) < 1e-4

    def test_blur_exact_on_constants(self):
        v = np.full((16, 16, 16), 2.5)
        np.testing.assert_allclose(blur3(v, 2.0), v, atol=1e-12)

    def test_absent_target_rejected(self):
        spec = PhantomSpec()
        bundle = apply_mask(generate(spec, seed=9), [True, True, True, False])
        with pytest.raises(ContractError):
            inject_artifact(bundle, 3, spec)
        with pytest.raises(ParameterError):
            inject_artifact(bundle, 4, spec)


class TestMmv:
    def test_round_trip_bit_exact(self, tmp_path):
        bundle = apply_mask(generate(PhantomSpec(), seed=10, batch=2),
                            [True, False, True, True])
        p = tmp_path / "case.mmv"
        write_mmv(p, bundle)
        back = read_mmv(p)
        for a, b in zip(back.volumes, bundle.volumes):
            np.testing.assert_array_equal(a, b)
            assert a.dtype == np.float32
        np.testing.assert_array_equal(back.labels, bundle.labels)
        np.testing.assert_array_equal(back.mask, bundle.mask)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.mmv"
        p.write_bytes(b'{"magic": "NOPE"}\n')
        with pytest.raises(DataError):
            read_mmv(p)

    def test_truncated_payload(self, tmp_path):
        bundle = generate(PhantomSpec(size=8, brain_radius=(3.4, 3.6),
                                      wt_radius=(2.4, 2.6), tc_radius=(1.6, 1.8),
                                      et_radius=(0.8, 1.0)), seed=0)
        p = tmp_path / "cut.mmv"
        write_mmv(p, bundle)
        data = p.read_bytes()
        p.write_bytes(data[:-7])
        with pytest.raises(DataError):
            read_mmv(p)

    def test_non_json_header(self, tmp_path):
        p = tmp_path / "junk.mmv"
        p.write_bytes(b"\x00\x01\x02 not a header\n1234")
        with pytest.raises(DataError):
            read_mmv(p)
