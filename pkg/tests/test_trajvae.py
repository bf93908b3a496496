import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdiff.errors import DimensionMismatch, HorizonMismatch, ShapeMismatch
from trajdiff.geometry import Action, Trajectory
from trajdiff.nn import check_gradients
from trajdiff.trajvae import (
    TrajectoryVae,
    kl_to_standard_normal,
    normalize_lanes,
    reparameterize,
    train_vae,
    vae_loss,
)

torch.set_num_threads(1)


def small_vae(horizon=3, d_h=4, hidden=8, seed=0):
    return TrajectoryVae(horizon, d_h=d_h, hidden=hidden,
                         generator=torch.Generator().manual_seed(seed))


def random_traj(rng, horizon=3):
    steps = tuple(
        Action(loc=rng.uniform(0, 1, 3), rot=[1, 0, 0, 0, 1, 0], open_=int(rng.random() > 0.5))
        for _ in range(horizon)
    )
    return Trajectory(steps)


class TestEncodeDecode:
    def test_encode_deterministic_and_shaped(self):
        vae = small_vae()
        rng = np.random.default_rng(0)
        traj = random_traj(rng)
        opens = np.array([1.0, 0.0, 1.0])
        mu1, lv1 = vae.encode(traj, opens)
        mu2, lv2 = vae.encode(traj, opens)
        assert mu1.shape == (4,) and lv1.shape == (4,)
        np.testing.assert_array_equal(mu1.detach(), mu2.detach())
        np.testing.assert_array_equal(lv1.detach(), lv2.detach())

    def test_horizon_mismatch(self):
        vae = small_vae(horizon=3)
        with pytest.raises(HorizonMismatch):
            vae.encode(random_traj(np.random.default_rng(1), horizon=4), np.zeros(4))

    def test_open_flags_shape(self):
        vae = small_vae()
        with pytest.raises(ShapeMismatch):
            vae.encode(random_traj(np.random.default_rng(2)), np.zeros(5))

    def test_decode_contract(self):
        vae = small_vae()
        h = torch.zeros(4)
        traj, opens = vae.decode(h)
        traj2, opens2 = vae.decode(h)
        assert traj.horizon == 3
        assert opens.shape == (3,)
        assert np.all((opens > 0) & (opens < 1))
        np.testing.assert_array_equal(traj.lanes(), traj2.lanes())
        np.testing.assert_array_equal(opens, opens2)

    def test_decode_rotations_orthonormal(self):
        vae = small_vae(seed=3)
        traj, _ = vae.decode(torch.randn(4, generator=torch.Generator().manual_seed(4)))
        from trajdiff.geometry import rot6d_to_matrix

        for a in traj.steps:
            R = rot6d_to_matrix(a.rot)
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6

    def test_decode_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            small_vae().decode(torch.zeros(5))


class TestReparameterize:
    def test_clamped_log_var_returns_mu(self):
        mu = torch.tensor([1.0, -2.0])
        out = reparameterize(mu, torch.full((2,), -1e9), np.random.default_rng(0))
        np.testing.assert_allclose(out, mu, atol=1e-4)

    def test_seed_reproducible(self):
        mu, lv = torch.zeros(3), torch.zeros(3)
        a = reparameterize(mu, lv, np.random.default_rng(5))
        b = reparameterize(mu, lv, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            reparameterize(torch.zeros(3), torch.zeros(4), np.random.default_rng(0))

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(6)
        n = 100_000
        mu = torch.full((n, 1), 0.3, dtype=torch.float64)
        lv = torch.full((n, 1), np.log(0.25), dtype=torch.float64)
        draws = reparameterize(mu, lv, rng).numpy()
        se = 0.5 / np.sqrt(n)
        assert abs(draws.mean() - 0.3) < 3 * se


class TestVaeLoss:
    def test_kl_closed_forms(self):
        assert float(kl_to_standard_normal(torch.zeros(1, 2), torch.zeros(1, 2))) == 0.0
        one = float(kl_to_standard_normal(torch.ones(1, 1), torch.zeros(1, 1)))
        assert one == pytest.approx(0.5, abs=1e-7)

    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_kl_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        mu = torch.as_tensor(r.standard_normal((2, 5)))
        lv = torch.as_tensor(r.uniform(-4, 4, (2, 5)))
        assert float(kl_to_standard_normal(mu, lv)) >= 0.0

    def test_kl_zero_only_at_prior(self):
        r = np.random.default_rng(7)
        mu = torch.as_tensor(r.standard_normal((1, 4))) * 0.1
        lv = torch.as_tensor(r.standard_normal((1, 4))) * 0.1
        assert float(kl_to_standard_normal(mu, lv)) > 0.0

    def test_zero_kl_weight_reduces_to_reconstruction(self):
        vae = small_vae(seed=8)
        rng = np.random.default_rng(8)
        flat = vae.window_lanes(random_traj(rng), np.array([1.0, 1.0, 0.0]))
        total, parts = vae_loss(vae, flat, np.random.default_rng(9), kl_weight=0.0)
        assert float(total) == pytest.approx(parts["recon"] + parts["bce"], rel=1e-6)

    def test_gradients_match_finite_differences(self):
        vae = small_vae(horizon=2, d_h=3, hidden=6, seed=10).double()
        rng = np.random.default_rng(11)
        flat = torch.as_tensor(rng.standard_normal(2 * 10))

        def loss():
            return vae_loss(vae, flat, np.random.default_rng(42), kl_weight=0.5)[0]

        assert check_gradients(loss, list(vae.parameters())) < 1e-4


class TestWhitening:
    def test_calibration_centers_posterior_means(self):
        vae = small_vae(seed=12)
        rng = np.random.default_rng(13)
        corpus = torch.as_tensor(rng.standard_normal((64, 30)), dtype=torch.float32)
        vae.calibrate_latents(corpus)
        mu, _ = vae.encode_lanes(corpus)
        np.testing.assert_allclose(mu.detach().mean(dim=0), np.zeros(4), atol=1e-5)
        np.testing.assert_allclose(mu.detach().std(dim=0, correction=0), np.ones(4), atol=1e-4)

    def test_training_reduces_loss(self):
        vae = small_vae(horizon=2, d_h=4, hidden=16, seed=14)
        rng = np.random.default_rng(15)
        lanes = np.zeros((32, 2, 10), dtype=np.float32)
        lanes[..., :3] = rng.uniform(-1, 1, (32, 2, 3))
        lanes[..., 3] = 1.0
        lanes[..., 7] = 1.0
        lanes[..., 9] = (rng.random((32, 2)) > 0.5).astype(np.float32)
        windows = torch.as_tensor(lanes.reshape(32, -1))
        losses = train_vae(vae, windows, steps=300, batch=16, lr=3e-3, seed=16)
        assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])

    def test_normalize_lanes_maps_workspace(self):
        lanes = torch.zeros(2, 10)
        lanes[:, 0] = torch.tensor([0.0, 1.0])
        out = normalize_lanes(lanes)
        np.testing.assert_allclose(out[:, 0], [-1.0, 1.0])
        np.testing.assert_allclose(out[:, 3], lanes[:, 3])
