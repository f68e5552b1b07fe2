"""Forward process, teacher objective, and Euler sampling."""
import numpy as np
import pytest

from crossres import data, diffusion, net as nets
from crossres.grid import SeededRng


class ConstantVelocityOracle:
    """Exact rectified-flow field toward a known x0: v(x, sigma) = (x - x0)/sigma."""

    def __init__(self, x0):
        self.x0 = np.asarray(x0)
        self.spec = nets.NetSpec(channels=(1, 1), time_embed_dim=4, class_count=0)
        self.params = np.zeros(nets.param_count(self.spec))


def oracle_forward(oracle, x, sigma, class_id=None):
    return (x - oracle.x0) / sigma


class TestAddNoise:
    def test_endpoints(self):
        x0 = SeededRng(1).normal((1, 4, 4))
        eps = SeededRng(2).normal((1, 4, 4))
        assert np.array_equal(diffusion.add_noise(x0, eps, 0.0), x0)
        assert np.array_equal(diffusion.add_noise(x0, eps, 1.0), eps)

    def test_midpoint_arithmetic(self):
        x0 = np.zeros((1, 2, 2))
        eps = 2.0 * np.ones((1, 2, 2))
        assert np.allclose(diffusion.add_noise(x0, eps, 0.5), 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            diffusion.add_noise(np.zeros((1, 2, 2)), np.zeros((1, 4, 4)), 0.5)

    def test_affine_superposition(self):
        rng = SeededRng(3)
        x0a, x0b = rng.normal((1, 4, 4)), rng.normal((1, 4, 4))
        epsa, epsb = rng.normal((1, 4, 4)), rng.normal((1, 4, 4))
        lhs = diffusion.add_noise(2 * x0a + x0b, 2 * epsa + epsb, 0.3)
        rhs = 2 * diffusion.add_noise(x0a, epsa, 0.3) + diffusion.add_noise(x0b, epsb, 0.3)
        assert np.allclose(lhs, rhs, atol=1e-12)


class TestTeacherLoss:
    def test_perfect_predictor_zero_loss(self, monkeypatch):
        spec = nets.NetSpec(channels=(1, 1), time_embed_dim=4, class_count=0)
        net = nets.DenoiserNet(spec, np.zeros(nets.param_count(spec)))
        x0 = SeededRng(99).normal((1, 8, 8))

        def perfect_forward(net_, x_t, sigma, class_id=None):
            # reconstruct the true velocity from the interpolation identity
            return (x_t - x0) / max(sigma, 1e-300)

        monkeypatch.setattr(diffusion.nets, "forward", perfect_forward)
        loss, grads = diffusion.teacher_loss(net, x0, None, SeededRng(7))
        assert loss == pytest.approx(0.0, abs=1e-18)

    def test_zero_net_unit_expected_loss(self):
        spec = nets.NetSpec(channels=(1, 1), time_embed_dim=4, class_count=0)
        zero = nets.DenoiserNet(spec, np.zeros(nets.param_count(spec)))
        x0 = np.zeros((1, 8, 8))
        losses = [
            diffusion.teacher_loss(zero, x0, None, SeededRng(1000 + k))[0] for k in range(500)
        ]
        # E mean(eps^2) = 1; Monte-Carlo within 2%
        assert abs(np.mean(losses) - 1.0) < 0.02

    def test_divergence_aborts_with_diagnostics(self):
        cfg = data.DataConfig(n_per_class_low=4, n_per_class_high=6)
        ds = data.generate_samples(cfg, SeededRng(31))
        # an absurd learning rate drives the parameters to overflow
        tcfg = diffusion.TeacherConfig(
            channels=(1, 6, 1), phase1_steps=0, phase2_steps=10, batch_size=4, lr=1e200
        )
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(RuntimeError, match="diverged"):
                diffusion.train_teacher(ds, tcfg, SeededRng(32))

    def test_loss_decreases_in_training_smoke(self):
        cfg = data.DataConfig(n_per_class_low=8, n_per_class_high=22)
        ds = data.generate_samples(cfg, SeededRng(5))
        tcfg = diffusion.TeacherConfig(
            channels=(1, 8, 8, 1), phase1_steps=0, phase2_steps=200,
            batch_size=8, log_every=10,
        )
        model = diffusion.train_teacher(ds, tcfg, SeededRng(6))
        losses = [r["loss"] for r in model.log]
        assert np.mean(losses[-3:]) < np.mean(losses[:3])

    def test_fixed_seed_bitwise_identical(self):
        cfg = data.DataConfig(n_per_class_low=4, n_per_class_high=6)
        ds = data.generate_samples(cfg, SeededRng(7))
        tcfg = diffusion.TeacherConfig(channels=(1, 6, 1), phase1_steps=20, phase2_steps=20, batch_size=4)
        a = diffusion.train_teacher(ds, tcfg, SeededRng(8))
        b = diffusion.train_teacher(ds, tcfg, SeededRng(8))
        assert np.array_equal(a.net.params, b.net.params)

    def test_high_res_only_configuration(self):
        cfg = data.DataConfig(n_per_class_low=4, n_per_class_high=6)
        ds = data.generate_samples(cfg, SeededRng(9))
        tcfg = diffusion.TeacherConfig(channels=(1, 6, 1), phase1_steps=0, phase2_steps=10, batch_size=4)
        model = diffusion.train_teacher(ds, tcfg, SeededRng(10))
        assert model.trained_resolutions == [16]
        assert all(r["phase"] == "high" for r in model.log)


class TestEulerSampler:
    def test_one_step_recovers_x0_for_constant_velocity(self):
        x0 = SeededRng(11).normal((1, 8, 8))
        oracle = ConstantVelocityOracle(x0)
        eps = SeededRng(12).normal((1, 8, 8))
        # Euler from sigma=1: x - 1 * (x - x0)/1 = x0 exactly
        v = oracle_forward(oracle, eps, 1.0)
        assert np.allclose(eps - 1.0 * v, x0, atol=1e-12)

    def test_two_half_steps_equal_one_full_step(self):
        x0 = SeededRng(13).normal((1, 8, 8))
        oracle = ConstantVelocityOracle(x0)
        x = SeededRng(14).normal((1, 8, 8))
        one = x - 1.0 * oracle_forward(oracle, x, 1.0)
        half = x - 0.5 * oracle_forward(oracle, x, 1.0)
        two = half - 0.5 * oracle_forward(oracle, half, 0.5)
        assert np.allclose(one, two, atol=1e-12)

    def test_schedule_validation(self):
        spec = nets.NetSpec(channels=(1, 1), time_embed_dim=4, class_count=0)
        zero = nets.DenoiserNet(spec, np.zeros(nets.param_count(spec)))
        with pytest.raises(ValueError):
            diffusion.euler_sample(zero, None, 8, 4, SeededRng(1), sigma_schedule=np.array([0.5, 0.0]))

    def test_sampling_deterministic(self):
        spec = nets.NetSpec(channels=(1, 4, 1), time_embed_dim=4, class_count=2)
        net = nets.DenoiserNet(spec, nets.init_params(spec, SeededRng(15)))
        a = diffusion.euler_sample(net, 0, 8, 4, SeededRng(16))
        b = diffusion.euler_sample(net, 0, 8, 4, SeededRng(16))
        assert np.array_equal(a, b)
