import numpy as np
import pytest

from irdf import distortion as dist
from irdf import data
from irdf.errors import ConfigurationError, DimensionError


class TestMeasures:
    def test_squared_error(self):
        spec = dist.DistortionSpec("squared_error", dim=2)
        assert dist.distortion(spec, [1.0, 2.0], [1.0, 0.0]) == 4.0

    def test_hamming_labels(self):
        spec = dist.DistortionSpec("hamming", alphabet_size=2)
        assert dist.distortion(spec, 0, 1) == 1.0
        assert dist.distortion(spec, 1, 1) == 0.0

    def test_hamming_soft(self):
        spec = dist.DistortionSpec("hamming", alphabet_size=3)
        assert dist.distortion(spec, 2, [0.2, 0.3, 0.5]) == pytest.approx(0.5)

    def test_log_loss(self):
        spec = dist.DistortionSpec("log_loss", alphabet_size=2)
        assert dist.distortion(spec, 0, [0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-15)

    def test_cross_entropy_alias(self):
        a = dist.DistortionSpec("log_loss", alphabet_size=3)
        b = dist.DistortionSpec("cross_entropy", alphabet_size=3)
        y = np.array([[0.1, 0.6, 0.3], [0.3, 0.3, 0.4]])
        s = np.array([1, 2])
        np.testing.assert_array_equal(dist.distortion(a, s, y), dist.distortion(b, s, y))

    def test_batch_non_negative(self):
        rng = np.random.default_rng(0)
        spec = dist.DistortionSpec("squared_error", dim=3)
        out = dist.distortion(spec, rng.normal(size=(50, 3)), rng.normal(size=(50, 3)))
        assert out.shape == (50,) and np.all(out >= 0)

    def test_not_a_simplex(self):
        spec = dist.DistortionSpec("log_loss", alphabet_size=2)
        with pytest.raises(ConfigurationError):
            dist.distortion(spec, 0, [0.7, 0.7])

    def test_label_out_of_range(self):
        spec = dist.DistortionSpec("hamming", alphabet_size=2)
        with pytest.raises(ConfigurationError):
            dist.distortion(spec, 3, 0)

    def test_shape_mismatch(self):
        spec = dist.DistortionSpec("squared_error", dim=2)
        with pytest.raises(DimensionError):
            dist.distortion(spec, [1.0, 2.0], [1.0, 2.0, 3.0])

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            dist.DistortionSpec("l1", dim=1)


class TestAnalytic:
    def test_gaussian(self):
        spec = data.paper_gaussian_spec()
        g = dist.analytic_reduced_gaussian(spec.K_W, spec.H, [1.0, 0.0, 0.0], [0.0, 0.0])
        # tr K_W + ||first column of H||^2
        assert g == pytest.approx(0.921 + 0.0701**2 + 0.0305**2, abs=1e-12)

    def test_gaussian_is_conditional_mean(self):
        # Monte Carlo over S | X = x for a fixed (x, y)
        spec = data.paper_gaussian_spec()
        rng = np.random.default_rng(1)
        x = np.array([0.5, -1.0, 1.5])
        y = np.array([0.3, -0.2])
        w = rng.multivariate_normal(np.zeros(2), spec.K_W, size=400_000)
        mc = np.mean(np.sum((spec.H @ x + w - y) ** 2, axis=1))
        assert mc == pytest.approx(dist.analytic_reduced_gaussian(spec.K_W, spec.H, x, y), rel=5e-3)

    def test_binary(self):
        assert dist.analytic_reduced_binary(1.0, 1.0, 1.0, 0) == pytest.approx(np.exp(-2) / (1 + np.exp(-2)), rel=1e-12)

    def test_binary_soft_matches_labels(self):
        x = np.linspace(-3, 3, 7)
        hard0 = dist.analytic_reduced_binary(1.0, 0.7, x, np.zeros(7, dtype=int))
        soft0 = dist.analytic_reduced_binary(1.0, 0.7, x, np.tile([1.0, 0.0], (7, 1)))
        np.testing.assert_allclose(hard0, soft0, rtol=1e-15)

    def test_posterior_extreme(self):
        assert np.isfinite(dist.posterior_label0(1.0, 0.01, -100.0))


class TestAuxiliary:
    def test_uniform_box(self):
        aux = dist.AuxiliarySamplerSpec(dim=2, strategy="broad", broad="uniform", low=-1, high=1)
        y = dist.sample_auxiliary(aux, 1000)
        assert y.shape == (1000, 2) and np.all(np.abs(y) <= 1)

    def test_mixture_weight_one_is_pushforward(self):
        aux = dist.AuxiliarySamplerSpec(dim=2, strategy="mixture", weight=1.0)

        def push(count, rng):
            return np.full((count, 2), 7.0)

        np.testing.assert_array_equal(dist.sample_auxiliary(aux, 10, pushforward=push), 7.0)

    def test_normal_mean(self):
        aux = dist.AuxiliarySamplerSpec(dim=1, strategy="broad", broad="normal", loc=0.0, scale=1.0)
        y = dist.sample_auxiliary(aux, 100_000, np.random.default_rng(0))
        assert abs(y.mean()) < 0.02

    def test_simplex_kinds(self):
        for broad in ("dirichlet", "vertices"):
            aux = dist.AuxiliarySamplerSpec(dim=4, strategy="broad", broad=broad)
            y = dist.sample_auxiliary(aux, 200)
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(y >= 0)

    def test_pushforward_required(self):
        aux = dist.AuxiliarySamplerSpec(dim=2, strategy="pushforward")
        with pytest.raises(ConfigurationError):
            dist.sample_auxiliary(aux, 3)

    def test_bad_weight(self):
        with pytest.raises(ConfigurationError):
            dist.AuxiliarySamplerSpec(dim=2, weight=1.5)


class TestLearned:
    def test_tabular_regression_matches_enumeration(self):
        # finite joint law over (S, X); the enumerated d_bar(x, y) = P(S != y | x)
        rng = np.random.default_rng(0)
        n_s, n_x = 3, 4
        joint = rng.dirichlet(np.full(n_s * n_x, 5.0)).reshape(n_s, n_x)
        post = joint / joint.sum(axis=0)
        exact = 1.0 - post.T  # exact[x, y]

        spec = dist.DistortionSpec("hamming", alphabet_size=n_s)
        model = dist.make_reduced_model(n_x, n_s, hidden=(32,), activation="tanh", seed=0)

        def draw(count):
            flat = rng.choice(n_s * n_x, size=count, p=joint.ravel())
            s, xi = np.divmod(flat, n_x)
            y = np.eye(n_s)[rng.integers(n_s, size=count)]
            return s, np.eye(n_x)[xi], y

        for _ in range(300):
            s, x, y = draw(256)
            dist.regression_step(model, x, y, dist.distortion(spec, s, y), 1e-2)
        s, x, y = draw(1_000_000)
        dist.refit_output_layer(model, x, y, dist.distortion(spec, s, y), ridge=1e-9)

        xs = np.repeat(np.eye(n_x), n_s, axis=0)
        ys = np.tile(np.eye(n_s), (n_x, 1))
        fitted = dist.reduced_distortion(model, xs, ys).reshape(n_x, n_s)
        assert np.max(np.abs(fitted - exact)) <= 1e-2

    def test_gaussian_regression_rmse(self):
        spec = data.paper_gaussian_spec()
        ds = data.gen_gaussian(spec, 20000, 0)
        dspec = dist.DistortionSpec("squared_error", dim=2)
        aux = dist.AuxiliarySamplerSpec(dim=2, strategy="broad", broad="normal", loc=0.0, scale=1.5)
        rng = np.random.default_rng(1)
        model = dist.make_reduced_model(3, 2, hidden=(64, 64), seed=0, out_shift=3.0)
        steps = 3000
        for k in range(steps):
            lr = 1e-2 * (0.05 + 0.475 * (1 + np.cos(np.pi * k / steps)))
            s, x = ds.sample(256, rng)
            dist.train_reduced_distortion_step(model, (s, x), aux, dspec, lr, rng)
        s, x = ds.sample(100_000, rng)
        y = dist.sample_auxiliary(aux, 100_000, rng)
        dist.refit_output_layer(model, x, y, dist.distortion(dspec, s, y))

        _, xt = data.draw_gaussian(spec, 10_000, np.random.default_rng(2))
        yt = dist.sample_auxiliary(aux, 10_000, np.random.default_rng(3))
        truth = dist.analytic_reduced_gaussian(spec.K_W, spec.H, xt, yt)
        pred = dist.reduced_distortion(model, xt, yt)
        rel_rmse = np.sqrt(np.mean((pred - truth) ** 2)) / np.sqrt(np.mean(truth**2))
        assert rel_rmse <= 0.05

    def test_grid_matches_pairs(self):
        model = dist.make_reduced_model(3, 2, hidden=(8,), seed=1)
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(5, 2))
        G, _ = dist.reduced_distortion_grid(model, x, y, clamp=False)
        for i in range(4):
            np.testing.assert_allclose(G[i], dist.reduced_distortion(model, np.tile(x[i], (5, 1)), y, clamp=False), rtol=1e-13)

    def test_grid_input_grad(self):
        model = dist.make_reduced_model(3, 2, hidden=(8,), activation="tanh", seed=1, in_scale=[1, 2, 1, 0.5, 3])
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(5, 2))
        W = rng.normal(size=(4, 5))
        G, tape = dist.reduced_distortion_grid(model, x, y, clamp=False)
        grad = dist.grid_input_grad(model, tape, W, clamp=False)
        h = 1e-6
        for j, k in [(0, 0), (3, 1)]:
            up, dn = y.copy(), y.copy()
            up[j, k] += h
            dn[j, k] -= h
            fd = (np.sum(W * dist.reduced_distortion_grid(model, x, up, clamp=False)[0])
                  - np.sum(W * dist.reduced_distortion_grid(model, x, dn, clamp=False)[0])) / (2 * h)
            assert grad[j, k] == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_clamp(self):
        model = dist.make_reduced_model(1, 1, hidden=(4,), seed=0, out_shift=-100.0)
        assert dist.reduced_distortion(model, [0.0], [0.0]) == 0.0
        assert dist.reduced_distortion(model, [0.0], [0.0], clamp=False) < 0

    def test_dimension_check(self):
        model = dist.make_reduced_model(3, 2, hidden=(4,), seed=0)
        with pytest.raises(DimensionError):
            dist.reduced_distortion(model, np.zeros((2, 2)), np.zeros((2, 2)))

    def test_snapshot_independent(self):
        model = dist.make_reduced_model(1, 1, hidden=(4,), seed=0)
        snap = model.snapshot()
        dist.regression_step(model, [[1.0]], [[1.0]], [5.0], 0.1)
        assert not snap.params.equals(model.params)
