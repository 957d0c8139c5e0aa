import numpy as np
import pytest

from ldae.losses import (
    LossSpec,
    dual_weight_vector,
    loss_weight,
    make_target,
    weighted_mse,
    weighted_residual_loss,
)
from ldae.rng import child_rng
from ldae.schedule import NoiseSchedule


def random_orthonormal(d: int, seed: int) -> np.ndarray:
    a = child_rng(seed, "orth").normal(size=(d, d))
    q, _ = np.linalg.qr(a)
    return q.T  # rows orthonormal


def fd_gradient(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return out


class TestLossSpec:
    def test_unknown_target(self):
        with pytest.raises(ValueError):
            LossSpec("predict_future")

    def test_unknown_weight(self):
        with pytest.raises(ValueError):
            LossSpec("predict_clean", weight_kind="cosine")

    def test_negative_residual_weight(self):
        with pytest.raises(ValueError):
            LossSpec("predict_original_image", residual_weight=-0.1)


class TestLossWeight:
    def test_kinds_closed_form(self):
        sched = NoiseSchedule(kind="fixed_gamma")
        t = np.array([100, 500, 1000])
        sigma = np.sqrt(2.0) * t / 1000.0
        np.testing.assert_allclose(
            loss_weight(sched, t, "inv_one_plus_sigma_sq"), 1.0 / (1.0 + sigma**2),
            rtol=0, atol=1e-15,
        )
        np.testing.assert_allclose(
            loss_weight(sched, t, "snr"), 1.0 / sigma**2, rtol=1e-15
        )
        np.testing.assert_array_equal(loss_weight(sched, t, "gamma_sq"), 1.0)
        np.testing.assert_array_equal(loss_weight(sched, t, "unit"), 1.0)

    def test_gamma_sq_on_vp_schedule(self):
        sched = NoiseSchedule(kind="linear_gamma_sq")
        t = np.array([0, 250, 1000])
        np.testing.assert_allclose(
            loss_weight(sched, t, "gamma_sq"), 1.0 - t / 1000.0, rtol=0, atol=1e-15
        )

    def test_snr_rejects_sigma_zero(self):
        sched = NoiseSchedule(kind="linear_gamma_sq")
        with pytest.raises(ValueError, match="sigma = 0"):
            loss_weight(sched, 0, "snr")


class TestWeightedMse:
    def test_known_value(self):
        pred = np.array([[1.0, 2.0], [3.0, 4.0]])
        target = np.zeros((2, 2))
        lam = np.array([1.0, 2.0])
        # per-example mean squares: (1+4)/2 = 2.5, (9+16)/2 = 12.5
        loss, _ = weighted_mse(pred, target, lam)
        assert loss == pytest.approx((1.0 * 2.5 + 2.0 * 12.5) / 2, rel=1e-15)

    def test_scalar_lambda_broadcast(self):
        pred = child_rng(0, "p").normal(size=(3, 4))
        target = child_rng(1, "t").normal(size=(3, 4))
        a, _ = weighted_mse(pred, target, 2.0)
        b, _ = weighted_mse(pred, target, np.full(3, 2.0))
        assert a == b

    def test_gradient_matches_fd(self):
        pred = child_rng(2, "p").normal(size=(2, 3, 4))
        target = child_rng(3, "t").normal(size=(2, 3, 4))
        lam = np.array([0.5, 2.0])
        _, dpred = weighted_mse(pred, target, lam)
        num = fd_gradient(lambda: weighted_mse(pred, target, lam)[0], pred)
        np.testing.assert_allclose(dpred, num, rtol=1e-6, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            weighted_mse(np.zeros((2, 3)), np.zeros((2, 4)), 1.0)

    def test_bad_lambda_shape(self):
        with pytest.raises(ValueError):
            weighted_mse(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(3))


class TestDualWeight:
    def test_layout(self):
        w = dual_weight_vector(6, 2, 0.1)
        np.testing.assert_array_equal(w, [1.0, 1.0, 0.1, 0.1, 0.1, 0.1])

    def test_full_latent_is_all_ones(self):
        np.testing.assert_array_equal(dual_weight_vector(4, 4, 0.1), np.ones(4))

    def test_range_check(self):
        with pytest.raises(ValueError):
            dual_weight_vector(4, 5, 0.1)
        with pytest.raises(ValueError):
            dual_weight_vector(4, 0, 0.1)


class TestWeightedResidualLoss:
    def test_parseval_identity(self):
        # residual_weight 1 makes the rotation invisible: the loss must
        # equal lambda-weighted mse to near machine precision
        b, n, d = 3, 5, 8
        pred = child_rng(4, "p").normal(size=(b, n, d))
        x0 = child_rng(5, "x").normal(size=(b, n, d))
        lam = np.array([0.3, 1.0, 2.5])
        basis = random_orthonormal(d, 6)
        loss_rot, dpred_rot = weighted_residual_loss(pred, x0, basis, 3, lam, 1.0)
        loss_mse, dpred_mse = weighted_mse(pred, x0, lam)
        assert loss_rot == pytest.approx(loss_mse, rel=1e-8, abs=1e-12)
        np.testing.assert_allclose(dpred_rot, dpred_mse, rtol=1e-8, atol=1e-12)

    def test_parseval_identity_in_identity_basis(self):
        b, n, d = 2, 4, 6
        pred = child_rng(7, "p").normal(size=(b, n, d))
        x0 = child_rng(8, "x").normal(size=(b, n, d))
        loss_rot, _ = weighted_residual_loss(pred, x0, np.eye(d), d, 1.0, 0.1)
        loss_mse, _ = weighted_mse(pred, x0, 1.0)
        assert loss_rot == pytest.approx(loss_mse, rel=1e-12)

    def test_downweights_complement_error(self):
        # error purely along a discarded direction costs residual_weight
        # times what the same error costs along a kept direction
        d = 4
        basis = random_orthonormal(d, 9)
        x0 = np.zeros((1, 1, d))
        kept = basis[0].reshape(1, 1, d)
        dropped = basis[-1].reshape(1, 1, d)
        loss_kept, _ = weighted_residual_loss(kept, x0, basis, 2, 1.0, 0.1)
        loss_drop, _ = weighted_residual_loss(dropped, x0, basis, 2, 1.0, 0.1)
        assert loss_drop == pytest.approx(0.1 * loss_kept, rel=1e-12)

    def test_gradient_matches_fd(self):
        b, n, d = 2, 3, 5
        pred = child_rng(10, "p").normal(size=(b, n, d))
        x0 = child_rng(11, "x").normal(size=(b, n, d))
        lam = np.array([1.5, 0.25])
        basis = random_orthonormal(d, 12)
        _, dpred = weighted_residual_loss(pred, x0, basis, 2, lam, 0.1)
        num = fd_gradient(
            lambda: weighted_residual_loss(pred, x0, basis, 2, lam, 0.1)[0], pred
        )
        np.testing.assert_allclose(dpred, num, rtol=1e-6, atol=1e-9)

    def test_non_orthonormal_basis_rejected(self):
        with pytest.raises(ValueError, match="orthonormal"):
            weighted_residual_loss(
                np.zeros((1, 2, 3)), np.zeros((1, 2, 3)),
                np.ones((3, 3)), 2, 1.0, 0.1,
            )

    def test_requires_patch_rank(self):
        with pytest.raises(ValueError):
            weighted_residual_loss(
                np.zeros((2, 3)), np.zeros((2, 3)), np.eye(3), 2, 1.0, 0.1
            )


class TestMakeTarget:
    def test_selects_by_kind(self):
        z0 = np.ones((1, 2, 3))
        eps = np.full((1, 2, 3), 2.0)
        pat = np.full((1, 2, 9), 3.0)
        assert make_target(LossSpec("predict_noise"), z0, eps, pat) is eps
        assert make_target(LossSpec("predict_clean"), z0, eps, pat) is z0
        assert make_target(LossSpec("predict_original_image"), z0, eps, pat) is pat

    def test_original_image_needs_patches(self):
        with pytest.raises(ValueError):
            make_target(LossSpec("predict_original_image"), np.ones(1), np.ones(1), None)
