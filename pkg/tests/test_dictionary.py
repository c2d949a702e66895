import numpy as np
import pytest
import torch

from rfdcodec.backbone import AnalysisTransform, BackboneConfig
from rfdcodec.dictionary import (
    FeatureDictionary,
    build_dictionary,
    compute_cf,
    compute_si,
    crop_patches,
    extract_features,
    lloyd_iterations,
    load_dictionary,
    reduce_and_cluster,
    save_dictionary,
    select_representatives,
)
from rfdcodec.errors import DictionaryFormatError, FingerprintMismatchError
from rfdcodec.synth import make_bank, synth_underwater_image

FP = "ab" * 32


def tiny_analysis(seed=0, width=8):
    torch.manual_seed(seed)
    return AnalysisTransform(BackboneConfig(channel_width=width, bottleneck=4, hyper_width=4))


class TestCropPatches:
    def test_two_by_two_tiling(self):
        img = np.random.default_rng(0).uniform(0, 1, (256, 256, 3))
        pset = crop_patches(img, size=128)
        assert len(pset.patches) == 4
        assert pset.source_ids == [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)]

    def test_exact_size_is_identity(self):
        img = np.random.default_rng(1).uniform(0, 1, (128, 128, 3))
        pset = crop_patches(img, size=128)
        assert len(pset.patches) == 1
        np.testing.assert_array_equal(pset.patches[0], img)

    def test_remainder_discarded(self):
        img = np.zeros((300, 200, 3))
        pset = crop_patches(img, size=128)
        assert len(pset.patches) == 2

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            crop_patches(np.zeros((100, 200, 3)), size=128)


class TestSpatialInformation:
    def test_constant_image_zero(self):
        assert compute_si(np.full((16, 16, 3), 0.5)) == 0.0

    def test_step_edge_matches_manual_convolution(self):
        img = np.zeros((8, 8, 3))
        img[:, 4:, :] = 1.0
        luma = 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]
        kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
        ky = kx.T
        mags = []
        for y in range(1, 7):
            for x in range(1, 7):
                gx = gy = 0.0
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        gx += luma[y + dy, x + dx] * kx[dy + 1, dx + 1]
                        gy += luma[y + dy, x + dx] * ky[dy + 1, dx + 1]
                mags.append(np.hypot(gx, gy))
        assert abs(compute_si(img) - np.std(mags)) < 1e-12

    def test_transpose_invariance(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, (12, 9, 3))
        assert abs(compute_si(img) - compute_si(img.transpose(1, 0, 2))) < 1e-12


class TestColorfulness:
    def test_gray_image_zero(self):
        rng = np.random.default_rng(3)
        g = rng.uniform(0, 1, (10, 10))
        img = np.repeat(g[:, :, None], 3, axis=2)
        assert compute_cf(img) == 0.0

    def test_pure_red_closed_form(self):
        img = np.zeros((6, 6, 3))
        img[:, :, 0] = 1.0
        assert abs(compute_cf(img) - 0.3 * np.sqrt(1.25)) < 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, (8, 8, 3))
        flat = img.reshape(-1, 3)
        perm = flat[rng.permutation(len(flat))].reshape(img.shape)
        assert abs(compute_cf(img) - compute_cf(perm)) < 1e-12


class TestSelectRepresentatives:
    def test_single_image_selected(self):
        img = np.random.default_rng(5).uniform(0, 1, (16, 16, 3))
        picked, idx = select_representatives([img], groups=10)
        assert idx == [0]

    def test_identical_corpus_one_per_cell(self):
        img = np.random.default_rng(6).uniform(0, 1, (16, 16, 3))
        _, idx = select_representatives([img.copy() for _ in range(8)], groups=4)
        assert len(idx) == 1

    def test_three_cluster_coverage(self):
        rng = np.random.default_rng(7)
        corpus = []
        for _ in range(10):  # low SI, low CF: nearly flat gray
            corpus.append(np.full((16, 16, 3), 0.5) + rng.uniform(-0.01, 0.01))
        for _ in range(10):  # high SI, low CF: gray checkerboard
            img = np.indices((16, 16)).sum(axis=0) % 2 * rng.uniform(0.8, 1.0)
            corpus.append(np.repeat(img[:, :, None], 3, axis=2))
        for _ in range(10):  # low SI, high CF: flat saturated color
            img = np.zeros((16, 16, 3))
            img[:, :, 0] = rng.uniform(0.8, 1.0)
            corpus.append(img)
        from rfdcodec.dictionary import (
            _equal_frequency_cells,
            select_representative_indices,
        )

        si = np.array([compute_si(i) for i in corpus])
        cf = np.array([compute_cf(i) for i in corpus])
        groups = 9
        idx = select_representative_indices(si, cf, groups)
        gx = max(1, int(round(np.sqrt(groups))))
        gy = max(1, int(np.ceil(groups / gx)))
        cells_all = set(
            zip(_equal_frequency_cells(si, gx), _equal_frequency_cells(cf, gy))
        )
        cells_sel = set(
            zip(_equal_frequency_cells(si, gx)[idx], _equal_frequency_cells(cf, gy)[idx])
        )
        assert len(cells_sel) >= 0.9 * len(cells_all)

    def test_oversized_groups_warns(self):
        imgs = [np.random.default_rng(i).uniform(0, 1, (8, 8, 3)) for i in range(3)]
        with pytest.warns(UserWarning):
            select_representatives(imgs, groups=10)


class TestReduceAndCluster:
    def test_single_cluster_is_mean_in_reduced_space(self):
        rng = np.random.default_rng(8)
        feats = [rng.normal(size=(2, 4, 4)) for _ in range(10)]
        res = reduce_and_cluster(feats, k=1, pca_dims=8)
        vectors = np.stack([f.reshape(-1) for f in feats])
        reduced = (vectors - res.pca_mean) @ res.pca_basis.T
        centroid_reduced = (res.centroids[0].reshape(-1) - res.pca_mean) @ res.pca_basis.T
        np.testing.assert_allclose(centroid_reduced, reduced.mean(axis=0), atol=1e-5)

    def test_fewer_inputs_than_clusters_passthrough(self):
        rng = np.random.default_rng(9)
        feats = [rng.normal(size=(2, 2, 2)).astype(np.float32) for _ in range(3)]
        res = reduce_and_cluster(feats, k=5, pca_dims=8)
        assert len(res.centroids) == 3
        for got, want in zip(res.centroids, feats):
            np.testing.assert_array_equal(got, want)

    def test_two_blobs_against_bruteforce_lloyd(self):
        rng = np.random.default_rng(10)
        mu_a = np.full(8, 3.0)
        mu_b = np.full(8, -3.0)
        pts = np.concatenate(
            [
                rng.normal(mu_a, 0.05, size=(30, 8)),
                rng.normal(mu_b, 0.05, size=(30, 8)),
            ]
        )
        feats = [p.reshape(2, 2, 2) for p in pts]
        res = reduce_and_cluster(feats, k=2, pca_dims=8, seed=0)
        got = sorted(c.reshape(-1).mean() for c in res.centroids)

        # oracle: Lloyd to convergence in the raw space, data-mean init
        centers = np.stack([pts[:30].mean(axis=0) * 0.1, pts[30:].mean(axis=0) * 0.1])
        oracle, _ = lloyd_iterations(pts, centers, max_iter=1000, tol=0.0)
        want = sorted(c.mean() for c in oracle)
        assert abs(got[0] - want[0]) < 0.1
        assert abs(got[1] - want[1]) < 0.1

    def test_objective_trace_non_increasing(self):
        rng = np.random.default_rng(11)
        feats = [rng.normal(size=(3, 2, 2)) for _ in range(40)]
        res = reduce_and_cluster(feats, k=4, pca_dims=6)
        trace = res.objective_trace
        assert len(trace) >= 1
        assert all(a >= b - 1e-9 for a, b in zip(trace, trace[1:]))

    def test_invalid_k_rejected(self):
        with pytest.raises(ValueError):
            reduce_and_cluster([np.zeros((1, 2, 2))], k=0, pca_dims=4)


class TestExtractFeatures:
    def test_spatial_shapes_follow_stride_count(self):
        analysis = tiny_analysis()
        patch = np.random.default_rng(12).uniform(0, 1, (128, 128, 3))
        # oracle: each analysis stage halves resolution, scale s taps stage s
        for scale, spatial in ((2, 32), (3, 16), (4, 8)):
            feat = extract_features(patch, scale, analysis)
            assert feat.shape == (8, spatial, spatial)

    def test_deterministic_bit_exact(self):
        analysis = tiny_analysis()
        patch = np.random.default_rng(13).uniform(0, 1, (64, 64, 3))
        a = extract_features(patch, 2, analysis)
        b = extract_features(patch, 2, analysis)
        np.testing.assert_array_equal(a, b)

    def test_bad_patch_rejected(self):
        analysis = tiny_analysis()
        with pytest.raises(ValueError):
            extract_features(np.zeros((30, 30, 3)), 2, analysis)


class TestDictionaryFile:
    def _toy_dictionary(self):
        rng = np.random.default_rng(14)
        entries = {
            s: rng.normal(size=(4, 8, 64 // 2 ** s, 64 // 2 ** s)).astype(np.float32)
            for s in (2, 3, 4)
        }
        pca = {
            s: {
                "mean": rng.normal(size=32).astype(np.float32),
                "basis": rng.normal(size=(4, 32)).astype(np.float32),
            }
            for s in (2, 3, 4)
        }
        return FeatureDictionary(
            entries=entries,
            k=4,
            backbone_fingerprint=FP,
            patch_size=64,
            corpus_T=np.array([0.5, 0.6, 0.7]),
            corpus_A=np.array([0.3, 0.5, 0.6]),
            pca_basis=pca,
        )

    def test_round_trip_bit_exact(self, tmp_path):
        d = self._toy_dictionary()
        p = tmp_path / "dict.uwfd"
        save_dictionary(d, p)
        loaded = load_dictionary(p)
        assert loaded.k == d.k
        assert loaded.backbone_fingerprint == d.backbone_fingerprint
        assert loaded.patch_size == d.patch_size
        for s in (2, 3, 4):
            np.testing.assert_array_equal(loaded.entries[s], d.entries[s])
            np.testing.assert_array_equal(loaded.pca_basis[s]["mean"], d.pca_basis[s]["mean"])
            np.testing.assert_array_equal(loaded.pca_basis[s]["basis"], d.pca_basis[s]["basis"])
        np.testing.assert_allclose(loaded.corpus_T, d.corpus_T, atol=1e-7)

    def test_corrupted_magic_rejected(self, tmp_path):
        d = self._toy_dictionary()
        p = tmp_path / "dict.uwfd"
        save_dictionary(d, p)
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(DictionaryFormatError):
            load_dictionary(p)

    def test_truncated_file_rejected(self, tmp_path):
        d = self._toy_dictionary()
        p = tmp_path / "dict.uwfd"
        save_dictionary(d, p)
        p.write_bytes(p.read_bytes()[: len(p.read_bytes()) // 2])
        with pytest.raises(DictionaryFormatError):
            load_dictionary(p)

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        d = self._toy_dictionary()
        p = tmp_path / "dict.uwfd"
        save_dictionary(d, p)
        with pytest.raises(FingerprintMismatchError):
            load_dictionary(p, expected_fingerprint="cd" * 32)


class TestBuildDictionary:
    def test_build_shapes_and_determinism(self, tmp_path):
        bank = make_bank(seed=15)
        rng = np.random.default_rng(16)
        corpus = [
            synth_underwater_image(bank, rng, 128, 128)[0] for _ in range(4)
        ]
        analysis = tiny_analysis(seed=1)
        d1, report, traces = build_dictionary(
            corpus, analysis, FP, k=3, groups=4, scales=(2, 3), pca_dims=8,
            patch_size=64, seed=0,
        )
        assert d1.scales == (2, 3)
        assert d1.entries[2].shape[1:] == (8, 16, 16)
        assert d1.entries[3].shape[1:] == (8, 8, 8)
        assert len(report.rows) > 0
        for trace in traces.values():
            assert all(a >= b - 1e-9 for a, b in zip(trace, trace[1:]))

        d2, _, _ = build_dictionary(
            corpus, analysis, FP, k=3, groups=4, scales=(2, 3), pca_dims=8,
            patch_size=64, seed=0,
        )
        p1, p2 = tmp_path / "a.uwfd", tmp_path / "b.uwfd"
        save_dictionary(d1, p1)
        save_dictionary(d2, p2)
        assert p1.read_bytes() == p2.read_bytes()
