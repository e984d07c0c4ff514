"""GP layer: kernel values, exact likelihood and prediction against a dense
inverse oracle, KISS interpolation and CG path against dense materialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attentive_gp import autodiff as ad
from attentive_gp.gp import (GPHyperparams, GPPosterior, InducingGrid, gp_nll, gp_nll_value,
                             gp_predict, kernel_matrix, kiss_matvec, kiss_nll, kiss_weights,
                             nll_graph, se_kernel)


def dense_nll_oracle(X, y, ell, noise):
    """Loss and gradients from an explicit inverse and eigenvalue log-det."""
    X = np.asarray(X, float)
    n, F = X.shape
    diff = X[:, None, :] - X[None, :, :]
    K = np.exp(-0.5 * np.sum(diff**2 / ell**2, axis=2))
    A = K + noise * np.eye(n)
    Ainv = np.linalg.inv(A)
    alpha = Ainv @ y
    loss = 0.5 * y @ alpha + 0.5 * np.sum(np.log(np.linalg.eigvalsh(A))) + 0.5 * n * np.log(2 * np.pi)
    G = 0.5 * (Ainv - np.outer(alpha, alpha))            # dL/dA
    g_noise = noise * np.trace(G)
    g_ell = np.array([np.sum(G * K * diff[:, :, f] ** 2) / ell[f] ** 2 for f in range(F)])
    g_X = np.zeros_like(X)
    for f in range(F):
        dK = -K * diff[:, :, f] / ell[f] ** 2              # d K_ij / d X_if
        g_X[:, f] = 2.0 * np.sum(G * dK, axis=1)
    return loss, g_X, g_ell, g_noise


def dense_predict_oracle(X, y, Xq, ell, noise):
    k = lambda a, b: np.exp(-0.5 * np.sum((a[:, None, :] - b[None, :, :]) ** 2 / ell**2, axis=2))
    Ainv = np.linalg.inv(k(X, X) + noise * np.eye(len(X)))
    Ks = k(Xq, X)
    return Ks @ Ainv @ y, 1.0 - np.einsum("ij,jk,ik->i", Ks, Ainv, Ks)


def _problem(seed, n=None, F=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 51))
    F = F or int(rng.integers(1, 4))
    X = rng.uniform(-2, 2, (n, F))
    y = rng.standard_normal(n)
    hyp = GPHyperparams(np.log(rng.uniform(0.5, 2.0, F)), float(np.log(rng.uniform(0.05, 0.5))))
    return X, y, hyp


class TestKernel:
    def test_unit_diagonal(self):
        hyp = GPHyperparams.default(3)
        a = np.array([0.3, -1.0, 2.0])
        assert se_kernel(a, a, hyp) == 1.0

    def test_unit_distance_value(self):
        hyp = GPHyperparams.default(1)
        assert se_kernel([0.0], [1.0], hyp) == pytest.approx(np.exp(-0.5), abs=1e-15)
        assert np.exp(-0.5) == pytest.approx(0.606531, abs=1e-6)

    def test_lengthscale_scaling(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal(2), rng.standard_normal(2)
        h1 = GPHyperparams(np.log([0.7, 1.3]), 0.0)
        h2 = GPHyperparams(np.log([1.4, 2.6]), 0.0)
        assert se_kernel(a, b, h2) == pytest.approx(se_kernel(a / 2, b / 2, h1), rel=1e-14)

    def test_single_point(self):
        K = kernel_matrix([[0.5, 0.5]], [[0.5, 0.5]], GPHyperparams.default(2))
        np.testing.assert_array_equal(K, [[1.0]])

    def test_symmetric(self):
        X, _, hyp = _problem(1, n=12)
        K = kernel_matrix(X, X, hyp)
        np.testing.assert_allclose(K, K.T, atol=1e-14)
        np.testing.assert_allclose(np.diag(K), 1.0)

    def test_loop_oracle(self):
        X, _, hyp = _problem(2, n=4)
        K = kernel_matrix(X, X, hyp)
        for i in range(4):
            for j in range(4):
                assert K[i, j] == pytest.approx(se_kernel(X[i], X[j], hyp), abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_psd(self, seed):
        X, _, hyp = _problem(seed, n=100)
        assert np.linalg.eigvalsh(kernel_matrix(X, X, hyp)).min() >= -1e-10


class TestExactNLL:
    def test_single_point_value(self):
        loss = gp_nll_value([[0.0]], [0.0], GPHyperparams.default(1, noise=1.0))
        assert loss == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(2 * np.pi), abs=1e-15)

    def test_noise_limits(self):
        X, y, hyp = _problem(3, n=10, F=2)
        fits, logdets = [], []
        for noise in (1e2, 1e4, 1e6):
            h = GPHyperparams(hyp.log_lengthscales, float(np.log(noise)))
            loss = gp_nll_value(X, y, h)
            ld = 0.5 * np.linalg.slogdet(kernel_matrix(X, X, h) + noise * np.eye(10))[1]
            fits.append(loss - ld - 5 * np.log(2 * np.pi))
            logdets.append(ld)
        assert fits[0] > fits[1] > fits[2] > 0
        assert logdets[0] < logdets[1] < logdets[2]

    @pytest.mark.parametrize("seed", range(20))
    def test_dense_oracle(self, seed):
        X, y, hyp = _problem(seed)
        loss, tape, leaves = gp_nll(X, y, hyp)
        gX, gell, gnoise = tape.gradient(loss, [leaves["X"], leaves["log_lengthscales"],
                                                leaves["log_noise"]])
        ref, rX, rell, rnoise = dense_nll_oracle(X, y, hyp.lengthscales, hyp.noise)
        assert float(loss.value) == pytest.approx(ref, rel=1e-8)
        np.testing.assert_allclose(gX, rX, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(gell, rell, rtol=1e-8, atol=1e-10)
        assert float(gnoise) == pytest.approx(rnoise, rel=1e-8, abs=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        X, y, hyp = _problem(seed, n=12, F=2)

        def via_X(t, x):
            return nll_graph(t, x, y, t.constant(hyp.log_lengthscales), t.constant(hyp.log_noise))

        def via_theta(t, th):
            return nll_graph(t, t.constant(X), y, ad.reshape(
                ad.matmul(t.constant(np.eye(3)[:2]), ad.reshape(th, (3, 1))), (2,)),
                ad.total(ad.mul(th, t.constant([0.0, 0.0, 1.0]))))

        assert ad.finite_diff_check(via_X, X) < 1e-4
        assert ad.finite_diff_check(via_theta, np.r_[hyp.log_lengthscales, hyp.log_noise]) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            gp_nll(np.zeros((3, 1)), np.zeros(4), GPHyperparams.default(1))

    def test_duplicates_need_jitter(self):
        # a rank-one kernel with negligible noise only factors after jitter
        X = np.zeros((30, 1))
        hyp = GPHyperparams(np.log([1.0]), float(np.log(1e-300)))
        post = GPPosterior(X, np.ones(30), hyp)
        assert ad.JITTER_START <= post.jitter <= ad.JITTER_MAX
        assert np.isfinite(gp_nll_value(X, np.ones(30), hyp))


class TestPredict:
    def test_interpolates_at_small_noise(self):
        rng = np.random.default_rng(0)
        X = np.linspace(-1, 1, 6)[:, None]
        y = rng.standard_normal(6)
        pd = gp_predict(X, y, X[2:3], GPHyperparams.default(1, lengthscale=0.5, noise=1e-8))
        assert pd.mean[0] == pytest.approx(y[2], abs=1e-5)

    def test_prior_far_away(self):
        X = np.linspace(0, 1, 5)[:, None]
        pd = gp_predict(X, np.ones(5), [[11.0]], GPHyperparams.default(1, lengthscale=1.0))
        assert abs(pd.mean[0]) < 1e-12
        assert pd.variance[0] == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_dense_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        X, y, hyp = _problem(100 + seed, n=15)
        Xq = rng.uniform(-3, 3, (7, X.shape[1]))
        pd = gp_predict(X, y, Xq, hyp)
        m, v = dense_predict_oracle(X, y, Xq, hyp.lengthscales, hyp.noise)
        np.testing.assert_allclose(pd.mean, m, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(pd.variance, v, rtol=1e-8, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_variance_bounded_by_prior(self, seed):
        X, y, hyp = _problem(seed, n=30)
        rng = np.random.default_rng(seed)
        pd = gp_predict(X, y, rng.uniform(-4, 4, (50, X.shape[1])), hyp)
        assert (pd.variance <= 1 + 1e-10).all() and (pd.variance >= 0).all()
        np.testing.assert_allclose(pd.obs_variance, pd.variance + hyp.noise)

    def test_variance_monotone_along_ray(self):
        hyp = GPHyperparams.default(2, lengthscale=0.8, noise=0.05)
        post = GPPosterior([[0.0, 0.0]], [1.0], hyp)
        ray = np.linspace(0, 5, 60)[:, None] * np.array([[0.6, 0.8]])
        var = post.predict(ray).variance
        assert np.all(np.diff(var) >= -1e-15)


class TestKISS:
    def test_node_is_one_hot(self):
        grid = InducingGrid([np.linspace(0, 1, 5)])
        S = kiss_weights([[0.25]], grid).toarray()
        np.testing.assert_allclose(S, [[0, 1, 0, 0, 0]], atol=1e-15)

    def test_midpoint_half_half(self):
        grid = InducingGrid([np.linspace(0, 1, 5)])
        S = kiss_weights([[0.375]], grid).toarray()
        np.testing.assert_allclose(S, [[0, 0.5, 0.5, 0, 0]], atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_partition_of_unity(self, F, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((40, F))
        grid = InducingGrid.from_features(X, 3**F)
        S = kiss_weights(X, grid)
        np.testing.assert_allclose(np.asarray(S.sum(axis=1)).ravel(), 1.0, atol=1e-12)
        assert (S.getnnz(axis=1) <= 2**F).all()
        assert (S.data >= 0).all()

    def test_on_grid_reproduces_kernel(self):
        hyp = GPHyperparams.default(2, lengthscale=0.7)
        grid = InducingGrid([np.linspace(-1, 1, 4), np.linspace(0, 2, 3)])
        X = grid.points[[0, 5, 7, 11]]
        S = kiss_weights(X, grid)
        approx = (S @ grid.kuu(hyp) @ S.T)
        np.testing.assert_allclose(approx, kernel_matrix(X, X, hyp), atol=1e-14)

    def test_matvec_dense_oracle(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, (50, 1))
        hyp = GPHyperparams.default(1, lengthscale=0.4)
        grid = InducingGrid.from_features(X, 20)
        S = kiss_weights(X, grid)
        Kuu = grid.kuu(hyp)
        v = rng.standard_normal(50)
        dense = S.toarray() @ Kuu @ S.toarray().T @ v + 0.1 * v
        np.testing.assert_allclose(kiss_matvec(S, Kuu, v, 0.1), dense, atol=1e-10)

    def test_dense_grid_matches_exact(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(-1, 1, (40, 1))
        y = np.sin(3 * X[:, 0]) + 0.1 * rng.standard_normal(40)
        hyp = GPHyperparams.default(1, lengthscale=0.5, noise=0.05)
        grid = InducingGrid.from_features(X, 4 * 40)
        k, _, _ = kiss_nll(X, y, hyp, grid)
        assert float(k.value) == pytest.approx(gp_nll_value(X, y, hyp), rel=1e-2)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-1, 1, (15, 2))
        y = rng.standard_normal(15)
        hyp = GPHyperparams(np.log([0.8, 1.1]), float(np.log(0.2)))
        grid = InducingGrid.from_features(X, 36)
        loss, tape, leaves = kiss_nll(X, y, hyp, grid)
        gX, gell, gn = tape.gradient(loss, [leaves["X"], leaves["log_lengthscales"],
                                            leaves["log_noise"]])
        h = 1e-5

        def val(X_=X, hyp_=hyp):
            return float(kiss_nll(X_, y, hyp_, grid)[0].value)

        for f in range(2):
            e = np.zeros(2)
            e[f] = h
            c = (val(hyp_=GPHyperparams(hyp.log_lengthscales + e, hyp.log_noise))
                 - val(hyp_=GPHyperparams(hyp.log_lengthscales - e, hyp.log_noise))) / (2 * h)
            assert abs(gell[f] - c) / (abs(gell[f]) + abs(c) + 1e-12) < 1e-4
        c = (val(hyp_=GPHyperparams(hyp.log_lengthscales, hyp.log_noise + h))
             - val(hyp_=GPHyperparams(hyp.log_lengthscales, hyp.log_noise - h))) / (2 * h)
        assert abs(float(gn) - c) / (abs(float(gn)) + abs(c) + 1e-12) < 1e-4
        for i in range(3):
            for f in range(2):
                Xp, Xm = X.copy(), X.copy()
                Xp[i, f] += h
                Xm[i, f] -= h
                c = (val(X_=Xp) - val(X_=Xm)) / (2 * h)
                assert abs(gX[i, f] - c) / (abs(gX[i, f]) + abs(c) + 1e-12) < 1e-4

    def test_too_many_dims(self):
        with pytest.raises(ValueError):
            InducingGrid.from_features(np.zeros((3, 5)), 1024)

    def test_grid_margin(self):
        X = np.array([[0.0], [1.0]])
        grid = InducingGrid.from_features(X, 11, margin=0.05)
        assert grid.axes[0][0] == pytest.approx(-0.05)
        assert grid.axes[0][-1] == pytest.approx(1.05)
        assert grid.u == 11

    def test_clamping_counted(self):
        grid = InducingGrid([np.linspace(0, 1, 3)])
        S = kiss_weights([[2.0], [0.5]], grid).toarray()
        assert grid.clamped == 1
        np.testing.assert_allclose(S[0], [0, 0, 1])
