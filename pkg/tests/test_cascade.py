"""Cascaded inference state machine: traces, transitions, noise mixing."""
import numpy as np
import pytest

from crossres import cascade, net as nets, schedule as sch
from crossres.grid import SeededRng, bilinear_upsample


def desk_partition(split_sigma=0.6, resolutions=(8, 16), flow_shift=1.0):
    return sch.build_partition([sch.sigma_to_logsnr(split_sigma)], list(resolutions), flow_shift)


def random_net(seed=0, class_count=3):
    spec = nets.NetSpec(channels=(1, 5, 1), time_embed_dim=4, class_count=class_count)
    return nets.DenoiserNet(spec, nets.init_params(spec, SeededRng(seed)))


class TestMixNoise:
    def test_alpha_zero_is_gaussian(self):
        p, g = np.ones((1, 2, 2)), 2 * np.ones((1, 2, 2))
        assert np.array_equal(cascade.mix_noise(p, g, 0.0), g)

    def test_alpha_one_is_predicted(self):
        p, g = np.ones((1, 2, 2)), 2 * np.ones((1, 2, 2))
        assert np.array_equal(cascade.mix_noise(p, g, 1.0), p)

    def test_alpha_02_weights(self):
        # beta = sqrt(1 - 0.04) = 0.9797958971132712
        p, g = np.ones((1, 1, 1)), np.ones((1, 1, 1))
        got = cascade.mix_noise(p, g, 0.2)[0, 0, 0]
        assert got == pytest.approx(0.2 + 0.9797958971132712, rel=1e-12)

    def test_unit_variance_preserved(self):
        rng = SeededRng(1)
        p, g = rng.normal(200_000), rng.normal(200_000)
        mixed = cascade.mix_noise(p[None, None], g[None, None], 0.6)
        assert abs(mixed.var() - 1.0) < 0.02

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            cascade.mix_noise(np.zeros((1, 2, 2)), np.zeros((1, 3, 3)), 0.5)
        with pytest.raises(ValueError):
            cascade.mix_noise(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 1.5)


class TestInfer:
    def test_single_stage_has_no_transitions(self):
        p = sch.build_partition([], [8])
        out, trace = cascade.infer(random_net(), cascade.CascadeParams(p, n_steps=4, class_id=0, seed=3))
        assert out.shape == (1, 8, 8)
        assert trace.transitions() == 0
        assert [r.resolution for r in trace.records] == [8, 8, 8, 8]

    def test_desk_scale_two_stage_trace(self):
        p = desk_partition()
        out, trace = cascade.infer(random_net(), cascade.CascadeParams(p, n_steps=4, class_id=1, seed=4))
        assert out.shape == (1, 16, 16)
        assert [r.resolution for r in trace.records] == [8, 8, 16, 16]
        assert [r.transition for r in trace.records] == [False, True, False, False]
        assert trace.transitions() == 1

    def test_constant_velocity_oracle_alpha_one_exact(self, monkeypatch):
        # With the exact linear-flow field and alpha = 1 the cascade output
        # equals the upsampled oracle target: Euler is exact on straight
        # trajectories and the transition continues the trajectory.
        x0_low = SeededRng(5).normal((1, 8, 8))

        def oracle_forward(net, x, sigma, class_id=None):
            res = x.shape[-1]
            target = x0_low if res == 8 else bilinear_upsample(x0_low, res, res)
            return (x - target) / sigma

        monkeypatch.setattr(cascade.nets, "forward", oracle_forward)
        p = desk_partition()
        out, trace = cascade.infer(random_net(), cascade.CascadeParams(p, 4, 1.0, None, seed=6))
        assert np.allclose(out, bilinear_upsample(x0_low, 16, 16), atol=1e-10)
        assert trace.transitions() == 1

    def test_bitwise_deterministic(self):
        p = desk_partition()
        net = random_net(7)
        params = cascade.CascadeParams(p, n_steps=5, alpha_inference=0.5, class_id=2, seed=8)
        out1, trace1 = cascade.infer(net, params)
        out2, trace2 = cascade.infer(net, params)
        assert np.array_equal(out1, out2)
        assert trace1 == trace2

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
    def test_alpha_sweep_finite(self, alpha):
        p = desk_partition()
        out, _ = cascade.infer(
            random_net(9), cascade.CascadeParams(p, n_steps=4, alpha_inference=alpha, class_id=0, seed=10)
        )
        assert np.all(np.isfinite(out))
        assert np.abs(out).max() < 100.0

    def test_rejects_stage_without_steps(self):
        # boundaries so tight that stage 2 owns no step of the N-grid
        p = sch.build_partition(
            [sch.sigma_to_logsnr(0.95), sch.sigma_to_logsnr(0.9)], [4, 8, 16]
        )
        with pytest.raises(cascade.CascadeError, match="stage"):
            cascade.infer(random_net(11), cascade.CascadeParams(p, n_steps=3, class_id=0, seed=12))

    def test_rejects_fewer_steps_than_stages(self):
        p = desk_partition()
        with pytest.raises(ValueError):
            cascade.CascadeParams(p, n_steps=1, class_id=0, seed=13)


class TestNaiveCascade:
    def test_structurally_identical_trace(self):
        p = desk_partition()
        net = random_net(14)
        params = cascade.CascadeParams(p, n_steps=4, alpha_inference=0.0, class_id=0, seed=15)
        out_a, trace_a = cascade.infer(net, params)
        out_b, trace_b = cascade.naive_cascade_infer(net, params)
        assert np.array_equal(out_a, out_b)
        assert trace_a == trace_b

    def test_produces_valid_high_res_output(self):
        p = desk_partition()
        out, trace = cascade.naive_cascade_infer(
            random_net(16), cascade.CascadeParams(p, n_steps=6, class_id=1, seed=17)
        )
        assert out.shape == (1, 16, 16)
        trace.validate(p)


class TestTraceValidation:
    def test_corrupted_transition_count_caught(self):
        p = desk_partition()
        _, trace = cascade.infer(random_net(18), cascade.CascadeParams(p, 4, 1.0, 0, 19))
        bad = cascade.InferenceTrace(
            [cascade.TraceRecord(r.step, r.stage, r.teacher_t, r.shifted_t, r.sigma, r.resolution, False)
             for r in trace.records]
        )
        with pytest.raises(cascade.CascadeError):
            bad.validate(p)

    def test_csv_write(self, tmp_path):
        p = desk_partition()
        _, trace = cascade.infer(random_net(20), cascade.CascadeParams(p, 4, 1.0, 0, 21))
        path = tmp_path / "trace.csv"
        trace.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("step,stage")
        assert len(lines) == 5
