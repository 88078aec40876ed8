import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irdf import data, neird, oracle
from irdf.errors import ConfigurationError, NumericalError
from irdf.mapping import BasisSpec, make_mapping, map_reproductions, sample_basis

QUICK = neird.TrainConfig(epochs=5, warmup_steps=20, n=16, m=32, b=32, n_eval=64, m_eval=64, refit_x=50)


def scalar_lagrangian(lam, G):
    """Plain-loop evaluation of (F, D, R) from a grid of reduced distortions."""
    n, m = len(G), len(G[0])
    F = D = 0.0
    for row in G:
        ks = [math.exp(-lam * g) for g in row]
        total = sum(ks)
        F -= math.log(total / m) / n
        D += sum(k * g for k, g in zip(ks, row)) / total / n
    return F, D, F - lam * D


class TestEstimators:
    def test_outer_loss_small(self):
        F, _, _ = scalar_lagrangian(1.0, [[1.0, 3.0]])
        assert neird.outer_loss([[-1.0, -3.0]]) == pytest.approx(F, abs=1e-12)
        assert F == pytest.approx(1.566219, abs=1e-6)
        G = [[1.0, 3.0]]
        D = neird.estimate_distortion(neird.log_kappa(1.0, G), G)
        assert D == pytest.approx(1.238406, abs=1e-6)
        assert neird.estimate_rate(F, 1.0, D) == pytest.approx(0.327813, abs=1e-6)

    def test_estimates_match_scalar_loop(self):
        rng = np.random.default_rng(0)
        G = rng.uniform(0, 3, size=(7, 11))
        lk = neird.log_kappa(1.7, G)
        F, D, R = scalar_lagrangian(1.7, G.tolist())
        assert neird.outer_loss(lk) == pytest.approx(F, abs=1e-12)
        assert neird.estimate_distortion(lk, G) == pytest.approx(D, abs=1e-12)
        assert neird.estimate_rate(neird.outer_loss(lk), 1.7, neird.estimate_distortion(lk, G)) == pytest.approx(R, abs=1e-12)

    def test_no_overflow(self):
        lk = np.array([[-1000.0, -1001.0], [-5000.0, -5000.0]])
        val = neird.outer_loss(lk)
        assert math.isfinite(val)
        assert val == pytest.approx(0.5 * (1000 - math.log((1 + math.exp(-1)) / 2) + 5000), rel=1e-12)

    def test_lambda_zero_is_exact(self):
        G = np.random.default_rng(1).uniform(0, 5, size=(9, 13))
        lk = neird.log_kappa(0.0, G)
        F = neird.outer_loss(lk)
        assert F == 0.0
        assert neird.estimate_rate(F, 0.0, neird.estimate_distortion(lk, G)) == 0.0

    def test_negative_g_rejected(self):
        with pytest.raises(ConfigurationError):
            neird.log_kappa(1.0, [[-0.1]])

    def test_small_instance_oracle_equivalence(self):
        # finite X and Y with a tabular d_bar; Q_Y fixed; sampled estimators vs enumeration
        rng = np.random.default_rng(2)
        p_x = rng.dirichlet(np.ones(5))
        q_y = rng.dirichlet(np.ones(4))
        d_bar = rng.uniform(0, 2, size=(5, 4))
        lam = 1.3
        kern = q_y[None, :] * np.exp(-lam * d_bar)
        F_exact = -np.dot(p_x, np.log(kern.sum(axis=1)))
        D_exact = np.dot(p_x, (kern * d_bar).sum(axis=1) / kern.sum(axis=1))
        xi = rng.choice(5, size=4000, p=p_x)
        yj = rng.choice(4, size=4000, p=q_y)
        G = d_bar[np.ix_(xi, yj)]
        lk = neird.log_kappa(lam, G)
        F, D = neird.outer_loss(lk), neird.estimate_distortion(lk, G)
        assert F == pytest.approx(F_exact, abs=0.02)
        assert D == pytest.approx(D_exact, abs=0.02)
        assert F - lam * D == pytest.approx(F_exact - lam * D_exact, abs=0.03)


class TestOuterStep:
    def test_gradient_matches_finite_differences(self):
        spec = data.paper_gaussian_spec()
        red = neird.gaussian_reduced(spec.K_W, spec.H)
        mp = make_mapping(BasisSpec(dim=2), 2, hidden=(5,), activation="tanh", seed=3, optimizer="sgd")
        rng = np.random.default_rng(0)
        x = data.draw_gaussian(spec, 6, rng)[1]
        z = sample_basis(mp.basis, 8, rng)
        lam, eta = 1.5, 1e-3

        def loss_at(params):
            y = map_reproductions(replace(mp, params=params), z)
            return neird.outer_loss(neird.log_kappa(lam, red.grid(x, y)[0]))

        new, loss = neird.outer_step(mp, red, x, z, lam, eta)
        assert loss == pytest.approx(loss_at(mp.params), rel=1e-14)
        analytic = (mp.params.flatten() - new.params.flatten()) / eta
        flat, h = mp.params.flatten(), 1e-6
        for k in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[k] += h
            dn[k] -= h
            fd = (loss_at(mp.params.with_flat(up)) - loss_at(mp.params.with_flat(dn))) / (2 * h)
            assert analytic[k] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_lambda_zero_leaves_mapping(self):
        mp = make_mapping(BasisSpec(dim=2), 2, hidden=(4,))
        red = neird.constant_reduced(1.0)
        new, loss = neird.outer_step(mp, red, np.zeros((3, 3)), np.ones((4, 2)), 0.0, 0.1)
        assert loss == 0.0 and new.params.equals(mp.params)

    def test_learned_backend_gradient(self):
        # T's gradient through a learned g: compare with finite differences in y
        from irdf.distortion import make_reduced_model

        model = make_reduced_model(3, 2, hidden=(6,), seed=1)
        red = neird.LearnedReduced(model, clamp=False)
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(5, 3)), rng.normal(size=(4, 2))
        lam = 0.8
        G, tape = red.grid(x, y)
        W = neird.softmax_weights(-lam * G)
        grad = red.input_grad(tape, lam * W / len(x))
        h = 1e-6
        for j in range(4):
            for k in range(2):
                up, dn = y.copy(), y.copy()
                up[j, k] += h
                dn[j, k] -= h
                f = lambda yy: neird.outer_loss(-lam * red.grid(x, yy)[0])
                assert grad[j, k] == pytest.approx((f(up) - f(dn)) / (2 * h), rel=1e-5, abs=1e-10)


class TestFit:
    def test_constant_reduced_gives_zero_rate(self):
        ds = data.gen_gaussian(data.paper_gaussian_spec(), 500, 0)
        point = neird.run_neird(replace(QUICK, lam=2.0), ds, reduced=neird.constant_reduced(1.7))
        assert abs(point.R_hat) <= 1e-6
        assert point.D_hat == pytest.approx(1.7, abs=1e-12)

    def test_identity_on_points(self):
        ds = data.gen_gaussian(data.paper_gaussian_spec(), 500, 0)
        point = neird.run_neird(QUICK, ds)
        assert abs(point.F_hat - (point.R_hat + point.lam * point.D_hat)) <= 1e-9

    def test_deterministic(self):
        ds = data.gen_gaussian(data.paper_gaussian_spec(), 500, 0)
        a = neird.run_neird(QUICK, ds)
        b = neird.run_neird(QUICK, ds)
        assert (a.D_hat, a.R_hat) == (b.D_hat, b.R_hat)

    def test_analytic_backend_near_oracle(self):
        spec = data.paper_gaussian_spec()
        ds = data.gen_gaussian(spec, 5000, 0)
        cfg = neird.TrainConfig(lam=1.0, epochs=200, n_eval=1000, m_eval=1000)
        point = neird.run_neird(cfg, ds, reduced=neird.gaussian_reduced(spec.K_W, spec.H))
        ref = oracle.gaussian_irdf_point(spec, point.D_hat) / math.log(2)
        assert abs(point.R_bits - ref) <= 0.1

    def test_lambda_zero_fit(self):
        ds = data.gen_binary(1.0, 1.0, 300, 0)
        point = neird.run_neird(replace(QUICK, lam=0.0, distortion="hamming"), ds)
        assert point.R_hat == 0.0

    def test_hamming_and_log_loss_run(self):
        ds = data.gen_binary(1.0, 1.0, 300, 0)
        for kind in ("hamming", "log_loss"):
            point = neird.run_neird(replace(QUICK, lam=2.0, distortion=kind), ds)
            assert point.ok and math.isfinite(point.R_hat)

    def test_fresh_x_needs_generator(self):
        ds = data.Dataset(np.zeros((10, 2)), np.zeros((10, 3)))
        with pytest.raises(ConfigurationError):
            neird.run_neird(replace(QUICK, x_source="fresh"), ds)


class TestSweep:
    def test_sorted_and_warm(self):
        ds = data.gen_gaussian(data.paper_gaussian_spec(), 300, 0)
        curve = neird.sweep_lambda(QUICK, [2.0, 0.5, 1.0], ds, warm_epochs=3)
        assert [p.lam for p in curve.points] == [0.5, 1.0, 2.0]
        assert [p.epochs for p in curve.points] == [5, 3, 3]

    def test_diverged_point_recorded(self, monkeypatch):
        real = neird.fit_neird

        def flaky(cfg, ds, init=None, reduced=None):
            if cfg.lam == 1.0:
                raise NumericalError("boom")
            return real(cfg, ds, init, reduced)

        monkeypatch.setattr(neird, "fit_neird", flaky)
        ds = data.gen_gaussian(data.paper_gaussian_spec(), 300, 0)
        curve = neird.sweep_lambda(QUICK, [0.5, 1.0, 2.0], ds)
        assert [p.status for p in curve.points] == ["ok", "diverged", "ok"]
        assert len(curve.ok_points) == 2

    def test_rejects_negative(self):
        ds = data.gen_gaussian(data.paper_gaussian_spec(), 30, 0)
        with pytest.raises(ConfigurationError):
            neird.sweep_lambda(QUICK, [-1.0], ds)

    def test_log_spaced(self):
        lams = neird.log_spaced_lambdas(0.1, 10, 3)
        assert lams == pytest.approx([0.1, 1.0, 10.0])


class TestEnvelope:
    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.01, 20), st.floats(-5, 10)), min_size=1, max_size=8))
    def test_convex_non_increasing(self, lines):
        pts = [neird.LagrangianPoint(lam, 0.0, 0.0, F) for lam, F in lines]
        D = np.linspace(0, 5, 101)
        env = neird.convex_envelope(pts, D)
        assert np.all(env >= 0)
        assert np.all(np.diff(env) <= 1e-12)
        assert np.all(np.diff(env, 2) >= -1e-9)

    def test_tangent_lines_touch_oracle(self):
        spec = data.paper_gaussian_spec()
        pts = []
        for lam in (0.5, 1.0, 2.0):
            D, R = oracle.gaussian_irdf_at_slope(spec, lam)
            pts.append(neird.LagrangianPoint(lam, D, R, R + lam * D))
        for p in pts:
            assert neird.convex_envelope(pts, [p.D_hat])[0] == pytest.approx(p.R_hat, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            neird.convex_envelope([], [1.0])


class TestConfig:
    def test_round_trip(self):
        cfg = neird.TrainConfig(g_hidden=(8, 8), aux_scale=(1.0, 2.0))
        assert neird.TrainConfig.from_dict(cfg.to_dict() | {"g_hidden": [8, 8], "aux_scale": [1.0, 2.0]}) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            neird.TrainConfig.from_dict({"lambda": 1.0})

    @pytest.mark.parametrize("kw", [{"lam": -1}, {"n": 0}, {"eta": 0}, {"tilted_fraction": 2}, {"x_source": "x"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            neird.TrainConfig(**kw)
