import json

import numpy as np
import pytest

from irdf import data
from irdf.errors import ChecksumError, ConfigurationError, DatasetFormatError, DimensionError


class TestGaussian:
    def test_paper_matrices(self):
        spec = data.paper_gaussian_spec()
        assert np.trace(spec.K_W) == pytest.approx(0.921)
        assert spec.x_dim == 3 and spec.s_dim == 2

    def test_moments(self):
        spec = data.paper_gaussian_spec()
        ds = data.gen_gaussian(spec, 200_000, 3)
        np.testing.assert_allclose(np.cov(ds.x.T), spec.K_X, atol=0.1)
        np.testing.assert_allclose(np.cov(ds.s.T), spec.H @ spec.K_X @ spec.H.T + spec.K_W, atol=0.02)
        # W = S - H X is uncorrelated with X
        w = ds.s - ds.x @ spec.H.T
        np.testing.assert_allclose(w.T @ ds.x / len(ds), 0.0, atol=0.03)

    def test_deterministic(self):
        spec = data.paper_gaussian_spec()
        a, b = data.gen_gaussian(spec, 100, 9), data.gen_gaussian(spec, 100, 9)
        np.testing.assert_array_equal(a.x, b.x)
        assert data.dataset_bytes(a) == data.dataset_bytes(b)

    def test_regenerate(self):
        ds = data.gen_gaussian(data.paper_gaussian_spec(), 50, 4)
        again = data.regenerate(json.loads(json.dumps(ds.metadata)))
        np.testing.assert_array_equal(ds.s, again.s)

    def test_not_positive_definite(self):
        with pytest.raises(ConfigurationError):
            data.GaussianModelSpec(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2), np.eye(2))

    def test_shape_mismatch(self):
        with pytest.raises((ConfigurationError, DimensionError)):
            data.GaussianModelSpec(np.eye(3), np.eye(2), np.eye(2))

    def test_bad_n(self):
        with pytest.raises(ConfigurationError):
            data.gen_gaussian(data.paper_gaussian_spec(), 0, 0)


class TestHighDim:
    def test_sparsity_and_shapes(self):
        ds, H = data.gen_highdim_sparse(0, 1, 500)
        assert H.shape == (6, 120) and ds.s.shape == (500, 6) and ds.x.shape == (500, 120)
        assert set(np.unique(H)) <= {-1.0, 0.0, 1.0}
        assert 0.05 < np.mean(H != 0) < 0.15

    def test_seed_h_fixes_matrix(self):
        _, H1 = data.gen_highdim_sparse(3, 1, 10)
        _, H2 = data.gen_highdim_sparse(3, 2, 10)
        np.testing.assert_array_equal(H1, H2)


class TestBinary:
    def test_class_means(self):
        ds = data.gen_binary(1.0, 0.5, 100_000, 0)
        assert abs(ds.s.mean() - 0.5) < 0.01
        assert ds.x[ds.s == 0].mean() == pytest.approx(1.0, abs=0.01)
        assert ds.x[ds.s == 1].mean() == pytest.approx(-1.0, abs=0.01)
        assert ds.x[ds.s == 0].std() == pytest.approx(0.5, abs=0.01)

    def test_bad_sigma(self):
        with pytest.raises(ConfigurationError):
            data.gen_binary(1.0, 0.0, 10, 0)

    def test_draw_fresh(self):
        ds = data.gen_binary(1.0, 1.0, 10, 0)
        s, x = data.draw_fresh(ds.metadata, 7, np.random.default_rng(0))
        assert s.shape == (7,) and x.shape == (7, 1)


class TestIdx:
    def _fixture(self, tmp_path, n=5):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(n, 4, 4), dtype=np.uint8)
        labels = rng.integers(0, 10, size=n, dtype=np.uint8)
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        data.write_idx(ip, images)
        data.write_idx(lp, labels)
        return images, labels, ip, lp

    def test_round_trip(self, tmp_path):
        images, labels, ip, lp = self._fixture(tmp_path)
        ds = data.load_mnist_idx(ip, lp)
        np.testing.assert_array_equal(ds.s, labels)
        np.testing.assert_allclose(ds.x, images.reshape(5, -1) / 255.0)
        assert ds.x.max() <= 1.0

    def test_bad_magic(self, tmp_path):
        _, _, ip, lp = self._fixture(tmp_path)
        with pytest.raises(DatasetFormatError):
            data.load_mnist_idx(lp, ip)

    def test_truncated(self, tmp_path):
        _, _, ip, lp = self._fixture(tmp_path)
        ip.write_bytes(ip.read_bytes()[:-3])
        with pytest.raises(DatasetFormatError):
            data.load_mnist_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        _, _, ip, _ = self._fixture(tmp_path)
        lp = tmp_path / "short.idx"
        data.write_idx(lp, np.zeros(3, dtype=np.uint8))
        with pytest.raises(DimensionError):
            data.load_mnist_idx(ip, lp)


class TestContainer:
    def test_round_trip(self, tmp_path):
        ds = data.gen_binary(1.0, 1.0, 40, 2)
        path = tmp_path / "d.irdf"
        data.save_dataset(path, ds)
        back = data.load_dataset(path)
        np.testing.assert_array_equal(back.s, ds.s)
        np.testing.assert_array_equal(back.x, ds.x)
        assert back.s.dtype == np.int64
        assert back.metadata["seed"] == 2

    def test_truncated(self, tmp_path):
        path = tmp_path / "d.irdf"
        data.save_dataset(path, data.gen_gaussian(data.paper_gaussian_spec(), 20, 0))
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ChecksumError):
            data.load_dataset(path)

    def test_bit_flip(self, tmp_path):
        path = tmp_path / "d.irdf"
        data.save_dataset(path, data.gen_gaussian(data.paper_gaussian_spec(), 20, 0))
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            data.load_dataset(path)

    def test_not_a_dataset(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"hello world" * 10)
        with pytest.raises(DatasetFormatError):
            data.load_dataset(path)


class TestMisc:
    def test_entropy(self):
        assert data.empirical_entropy(np.arange(10)) == pytest.approx(np.log2(10))
        assert data.empirical_entropy([1, 1, 1]) == 0.0

    def test_digits(self):
        ds = data.load_digits_dataset()
        assert ds.x.shape[1] == 64 and ds.x.max() <= 1.0
        assert set(np.unique(ds.s)) == set(range(10))

    def test_resample(self):
        ds = data.gen_binary(1.0, 1.0, 10, 0)
        s, x = ds.sample(25, np.random.default_rng(0))
        assert len(s) == 25 and x.shape == (25, 1)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            data.Dataset(np.zeros(3), np.zeros((4, 1)))
