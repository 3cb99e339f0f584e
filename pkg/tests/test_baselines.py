import numpy as np
import pytest

from foanil.baselines import (
    BmDivergence,
    BmState,
    MinimizerConfig,
    RankError,
    bm_fit,
    bm_objective_grad,
    ridge_regression,
)
from foanil.dynamics import InitSpec
from foanil.task_model import make_ground_truth, sample_tasks


def full(batch):
    return np.concatenate([batch.x_in, batch.x_out], 1), np.concatenate([batch.y_in, batch.y_out], 1)


def central_diff(f, z, h=1e-5):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        g[idx] = (f(zp) - f(zm)) / (2 * h)
    return g


class TestObjective:
    def test_zero_factors(self, small_gt):
        batch = sample_tasks(small_gt, 6, 3, 2, rng=1)
        state = BmState(np.zeros((8, 3)), np.zeros((3, 6)))
        loss, gb, gw = bm_objective_grad(state, batch)
        _, y = full(batch)
        assert loss == pytest.approx(0.5 * np.mean(np.sum(y**2, axis=1) / 5))
        np.testing.assert_array_equal(gb, 0.0)
        np.testing.assert_array_equal(gw, 0.0)

    def test_exact_fit(self):
        gt = make_ground_truth(6, 2, noise_var=0.0, rng=2)
        batch = sample_tasks(gt, 5, 4, 3, rng=3)
        state = BmState(gt.b_star.copy(), batch.w_star.T.copy())
        loss, _, _ = bm_objective_grad(state, batch)
        gap = np.eye(2) - batch.w_star.T @ batch.w_star
        assert loss == pytest.approx(0.125 * np.sum(gap**2), rel=1e-12)
        assert loss > 0

    @pytest.mark.parametrize("seed", range(4))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(3, 7))
        gt = make_ground_truth(d, 1, rng=seed)
        kp = int(rng.integers(1, d + 1))
        batch = sample_tasks(gt, 3, 3, 2, rng=seed)
        b, w = rng.standard_normal((d, kp)), rng.standard_normal((kp, 3))
        _, gb, gw = bm_objective_grad(BmState(b, w), batch)
        np.testing.assert_allclose(gb, central_diff(lambda z: bm_objective_grad(BmState(z, w), batch)[0], b), atol=1e-6)
        np.testing.assert_allclose(gw, central_diff(lambda z: bm_objective_grad(BmState(b, z), batch)[0], w), atol=1e-6)


class TestFit:
    def test_heads_with_frozen_body_match_least_squares(self):
        # with the regulariser switched off and B fixed the problem decouples per task
        gt = make_ground_truth(6, 2, noise_var=0.5, rng=4)
        batch = sample_tasks(gt, 4, 5, 3, rng=5)
        x, y = full(batch)
        b = gt.b_star
        from scipy.optimize import minimize

        def fun(z):
            loss, _, gw = bm_objective_grad(BmState(b, z.reshape(2, 4), reg_weight=0.0), batch)
            return loss, gw.ravel()

        res = minimize(fun, np.zeros(8), jac=True, method="L-BFGS-B", options={"gtol": 1e-12, "ftol": 0})
        for i in range(4):
            f = x[i] @ b
            ls = np.linalg.solve(f.T @ f, f.T @ y[i])
            np.testing.assert_allclose(res.x.reshape(2, 4)[:, i], ls, atol=1e-6)

    @pytest.mark.parametrize("method", ["lbfgs", "gd"])
    def test_loss_decreases(self, small_gt, method):
        batch = sample_tasks(small_gt, 30, 4, 3, rng=6)
        cfg = MinimizerConfig(method=method, max_iters=200, step=0.5)
        state = bm_fit(batch, 3, InitSpec(0.01, 0.01), cfg, rng=7)
        losses = np.array([row["loss"] for row in state.log])
        assert losses[-1] < 0.5 * losses[0]
        if method == "gd":
            assert np.all(np.diff(losses) <= 0)

    def test_convergence_log(self, small_gt, tmp_path):
        batch = sample_tasks(small_gt, 10, 4, 3, rng=6)
        state = bm_fit(batch, 2, cfg=MinimizerConfig(max_iters=20), rng=1)
        path = state.write_log(tmp_path / "log.csv")
        assert path.read_text().splitlines()[0] == "iter,loss,grad_norm,step_len"
        assert state.n_iters <= 20

    def test_divergence(self, small_gt):
        batch = sample_tasks(small_gt, 10, 4, 3, rng=6)
        batch.y_in[0, 0] = np.inf
        with pytest.raises(BmDivergence):
            bm_fit(batch, 2, cfg=MinimizerConfig(max_iters=5), rng=1)

    def test_bad_method(self):
        with pytest.raises(ValueError):
            MinimizerConfig(method="newton")


class TestRidge:
    def test_heavy_regularisation(self, rng):
        f, y = rng.standard_normal((10, 4)), rng.standard_normal(10)
        assert np.linalg.norm(ridge_regression(f, y, 1e12)) < 1e-10

    def test_unregularised_square(self, rng):
        f, y = rng.standard_normal((4, 4)), rng.standard_normal(4)
        np.testing.assert_allclose(ridge_regression(f, y, 0.0), np.linalg.solve(f, y), rtol=1e-10)

    def test_rank_error(self, rng):
        f = rng.standard_normal((3, 5))
        with pytest.raises(RankError):
            ridge_regression(f, rng.standard_normal(3), 0.0)

    def test_stationarity(self, rng):
        f, y, lam = rng.standard_normal((20, 6)), rng.standard_normal(20), 0.3
        w = ridge_regression(f, y, lam)
        grad = -f.T @ (y - f @ w) / 20 + 2 * lam * w
        assert np.linalg.norm(grad) <= 1e-10 * np.linalg.norm(f.T @ y / 20)

    def test_gradient_descent_oracle(self, rng):
        f, y, lam = rng.standard_normal((15, 5)), rng.standard_normal(15), 0.05
        w = np.zeros(5)
        step = 1.0 / (np.linalg.norm(f, 2) ** 2 / 15 + 2 * lam)
        for _ in range(20000):
            w -= step * (-f.T @ (y - f @ w) / 15 + 2 * lam * w)
        np.testing.assert_allclose(ridge_regression(f, y, lam), w, atol=1e-8)

    def test_batched(self, rng):
        f, y = rng.standard_normal((7, 12, 3)), rng.standard_normal((7, 12))
        out = ridge_regression(f, y, 0.1)
        for i in range(7):
            np.testing.assert_allclose(out[i], ridge_regression(f[i], y[i], 0.1), rtol=1e-12)
