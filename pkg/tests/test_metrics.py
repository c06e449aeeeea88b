import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesion_synth.evaluation import (FeatureSet, FrozenFeatureExtractor, compute_fid, export_features,
                                     fid_confusion_matrix, inception_score)
from lesion_synth.evaluation import reports
from lesion_synth.data import write_image

from _oracles import exact_moment_sample, gaussian_fid


class TestFid:
    def test_identical_sets(self):
        A = np.random.default_rng(0).normal(size=(50, 8))
        assert compute_fid(A, A) <= 1e-6

    def test_one_dimensional_closed_form(self):
        a = exact_moment_sample(0.0, 1.0, 40)
        b = exact_moment_sample(1.0, 1.0, 40)
        assert compute_fid(a, b) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_diagonal_gaussian_oracle(self, seed):
        rng = np.random.default_rng(seed)
        D = int(rng.integers(1, 5))
        mu1, mu2 = rng.normal(size=D), rng.normal(size=D)
        v1, v2 = rng.uniform(0.2, 3, size=D), rng.uniform(0.2, 3, size=D)
        # centred orthogonal columns give an exactly diagonal sample covariance
        n = 4 * D + 4
        q = np.linalg.qr(np.column_stack([np.ones(n), rng.normal(size=(n, D))]))[0][:, 1:]
        z = q / q.std(0, ddof=1)
        a, b = mu1 + z * np.sqrt(v1), mu2 + z * np.sqrt(v2)
        assert compute_fid(a, b) == pytest.approx(gaussian_fid(mu1, v1, mu2, v2), abs=1e-6)

    def test_duplicate_samples_invariant(self):
        rng = np.random.default_rng(1)
        n = 30
        A, B = rng.normal(size=(n, 3)), rng.normal(1, 2, size=(n, 3))
        # duplication keeps the means; the N-1 covariances both scale by c, so the trace term does too
        c = 2 * (n - 1) / (2 * n - 1)
        mean_term = float(np.sum((A.mean(0) - B.mean(0)) ** 2))
        fid = compute_fid(A, B)
        fid2 = compute_fid(np.vstack([A, A]), np.vstack([B, B]))
        assert fid2 == pytest.approx(mean_term + c * (fid - mean_term), abs=1e-8)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        A, B = rng.normal(size=(20, 4)), rng.normal(0.5, 1.5, size=(25, 4))
        assert abs(compute_fid(A, B) - compute_fid(B, A)) <= 1e-8

    def test_non_negative_on_random_sets(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n, D = int(rng.integers(2, 8)), int(rng.integers(1, 6))
            assert compute_fid(rng.normal(size=(n, D)), rng.normal(size=(n, D))) >= 0

    def test_errors(self):
        with pytest.raises(ValueError):
            compute_fid(np.zeros((1, 3)), np.zeros((5, 3)))
        with pytest.raises(ValueError):
            compute_fid(np.zeros((5, 3)), np.zeros((5, 4)))
        with pytest.raises(ValueError, match="different extractors"):
            compute_fid(FeatureSet(np.zeros((3, 2)), "a"), FeatureSet(np.zeros((3, 2)), "b"))


class TestInceptionScore:
    def test_uniform_rows(self):
        assert inception_score(np.full((20, 5), 0.2))[0] == 1.0

    def test_balanced_one_hots(self):
        C = 4
        p = np.tile(np.eye(C), (5, 1))
        mean, std = inception_score(p, num_splits=5)
        assert abs(mean - C) <= 1e-12 and std <= 1e-12

    def test_repeated_one_hot(self):
        p = np.zeros((10, 3))
        p[:, 1] = 1
        assert inception_score(p)[0] == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        C = int(rng.integers(2, 8))
        p = rng.dirichlet(np.full(C, 0.3), size=int(rng.integers(1, 40)))
        mean, _ = inception_score(p, num_splits=3)
        assert 1 - 1e-9 <= mean <= C + 1e-9

    def test_unnormalised_rows_rejected(self):
        with pytest.raises(ValueError):
            inception_score(np.full((3, 3), 0.5))


class TestFidMatrix:
    def test_identical_sets_zero_diagonal(self):
        rng = np.random.default_rng(3)
        real = {c: rng.normal(c * 3, 1, size=(15, 2)) for c in range(3)}
        m = fid_confusion_matrix({c: real[c] for c in real}, real)
        np.testing.assert_allclose(np.diag(m.values), 0, atol=1e-6)
        assert m.complete and np.all(m.values >= 0)

    def test_two_class_hand_case(self):
        a0, a1 = exact_moment_sample(0.0, 1.0, 10), exact_moment_sample(2.0, 4.0, 10)
        s0, s1 = exact_moment_sample(1.0, 1.0, 10), exact_moment_sample(2.0, 1.0, 10)
        m = fid_confusion_matrix({0: s0, 1: s1}, {0: a0, 1: a1})
        expected = [[gaussian_fid(0, 1, 1, 1), gaussian_fid(2, 4, 1, 1)],
                    [gaussian_fid(0, 1, 2, 1), gaussian_fid(2, 4, 2, 1)]]
        np.testing.assert_allclose(m.values, expected, atol=1e-6)
        np.testing.assert_allclose(m.col_mean, np.mean(expected, axis=0), atol=1e-12)
        np.testing.assert_allclose(m.col_std, np.std(expected, axis=0), atol=1e-12)

    def test_missing_cell_marked_absent(self):
        rng = np.random.default_rng(4)
        real = {0: rng.normal(size=(5, 2)), 1: rng.normal(size=(5, 2))}
        m = fid_confusion_matrix({0: rng.normal(size=(5, 2)), 1: rng.normal(size=(1, 2))}, real)
        assert m.absent[1].all() and np.isnan(m.values[1]).all() and not m.absent[0].any()

    def test_per_pair_keys(self):
        rng = np.random.default_rng(5)
        real = {0: rng.normal(size=(6, 2)), 1: rng.normal(size=(6, 2))}
        synth = {(i, j): real[j] for i in range(2) for j in range(2)}
        m = fid_confusion_matrix(synth, real)
        np.testing.assert_allclose(m.values, 0, atol=1e-6)

    def test_csv_grid(self, tmp_path):
        real = {0: np.eye(3)[:, :2], 1: np.eye(3)[:, :2] + 1}
        m = fid_confusion_matrix(real, real, ["A", "B"])
        txt, csv = reports.emit(tmp_path / "fid", reports.fid_matrix_header(m), reports.fid_matrix_rows(m))
        lines = csv.read_text().splitlines()
        assert lines[0].split(",") == ["source\\target", "A", "B"] and len(lines) == 5


class TestExtractor:
    def test_deterministic_and_identical_rows(self, tmp_path):
        rng = np.random.default_rng(6)
        img = rng.random((16, 16, 3))
        for name, im in [("a", img), ("b", img), ("c", rng.random((16, 16, 3)))]:
            write_image(tmp_path / f"{name}.png", im)
        (tmp_path / "broken.png").write_bytes(b"not an image")
        ext = FrozenFeatureExtractor(seed=0)
        fs, skipped = export_features(tmp_path, ext, tmp_path / "f.csv", labels={"a": "x"})
        assert skipped == ["broken.png"] and fs.matrix.shape == (3, 64)
        np.testing.assert_array_equal(fs.matrix[0], fs.matrix[1])
        rows = (tmp_path / "f.csv").read_text().splitlines()
        assert len(rows) == 4 and rows[1].startswith("a,x,")
        again, _ = export_features(tmp_path, FrozenFeatureExtractor(seed=0), tmp_path / "g.csv")
        np.testing.assert_array_equal(again.matrix, fs.matrix)
        assert fs.extractor_id == ext.extractor_id != FrozenFeatureExtractor(seed=1).extractor_id

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ValueError):
            export_features(tmp_path, FrozenFeatureExtractor(), tmp_path / "f.csv")
