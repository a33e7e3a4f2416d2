import math

import numpy as np
import pytest
import torch

from pointtryon.diffusion import (
    NoiseSchedule,
    add_noise,
    build_schedule,
    cfg_combine,
    denoise_step,
    diffusion_loss,
    point_focused_loss,
    sample,
    strided_schedule,
)


class TestBuildSchedule:
    def test_hand_computed_cumulative_products(self):
        s = build_schedule(3, 0.1, 0.3)
        assert np.allclose(s.beta, [0.1, 0.2, 0.3])
        assert np.allclose(s.alpha, [0.9, 0.8, 0.7])
        assert np.allclose(s.alpha_bar, [0.9, 0.72, 0.504])
        assert np.allclose(s.sigma ** 2, s.beta)

    def test_zero_noise_limit(self):
        s = build_schedule(1000, 1e-12, 1e-12)
        assert np.all(s.alpha_bar > 1.0 - 1e-8)

    def test_alpha_bar_strictly_decreasing(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            T = int(rng.integers(1, 50))
            b0 = rng.uniform(1e-5, 0.3)
            s = build_schedule(T, b0, rng.uniform(b0, 0.5))
            assert np.all(np.diff(s.alpha_bar) < 0) or T == 1
            assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))
            assert np.allclose(s.alpha_bar, np.cumprod(s.alpha))

    @pytest.mark.parametrize(
        "kw",
        [
            dict(T=0),
            dict(T=10, beta_start=0.0),
            dict(T=10, beta_end=1.0),
            dict(T=10, beta_start=0.3, beta_end=0.1),
        ],
    )
    def test_rejects_bad_arguments(self, kw):
        with pytest.raises(ValueError):
            build_schedule(**{**dict(T=10, beta_start=1e-4, beta_end=0.02), **kw})


class TestAddNoise:
    def test_noiseless_limit_returns_x0(self):
        s = build_schedule(10, 1e-12, 1e-12)
        x0 = np.random.default_rng(0).normal(size=(3, 4, 4))
        out = add_noise(x0, np.zeros_like(x0) + 1.0, 5, s)
        assert np.allclose(out, x0, atol=1e-5)

    def test_zero_signal(self):
        s = build_schedule(3, 0.1, 0.3)
        eps = np.ones((2, 2))
        out = add_noise(np.zeros((2, 2)), eps, 2, s)
        assert np.allclose(out, math.sqrt(1 - 0.72) * eps)

    def test_scalar_hand_value(self):
        s = build_schedule(3, 0.1, 0.3)  # alpha_bar[1] = 0.72
        out = add_noise(np.array(1.0), np.array(0.5), 2, s)
        assert abs(out - (math.sqrt(0.72) + math.sqrt(0.28) * 0.5)) < 1e-12
        assert abs(out - 1.1131) < 1e-4

    def test_rejects_shape_mismatch_and_bad_t(self):
        s = build_schedule(3, 0.1, 0.3)
        with pytest.raises(ValueError):
            add_noise(np.zeros((2, 2)), np.zeros((2, 3)), 1, s)
        for t in (0, 4):
            with pytest.raises(ValueError):
                add_noise(np.zeros(2), np.zeros(2), t, s)

    def test_marginal_statistics(self):
        # over many draws, mean -> sqrt(abar)*x0 and var -> 1-abar
        s = build_schedule(1000, 1e-4, 0.02)
        rng = np.random.default_rng(7)
        n = 10_000
        x0 = 0.7
        for t in (1, 250, 500, 750, 1000):
            eps = rng.standard_normal(n)
            xt = add_noise(np.full(n, x0), eps, t, s)
            ab = s.alpha_bar[t - 1]
            se_mean = math.sqrt(1 - ab) / math.sqrt(n)
            assert abs(xt.mean() - math.sqrt(ab) * x0) < 3 * se_mean + 1e-12
            se_var = (1 - ab) * math.sqrt(2 / (n - 1))
            assert abs(xt.var(ddof=1) - (1 - ab)) < 3 * se_var + 1e-12


class TestLosses:
    def test_perfect_prediction_is_zero(self):
        e = np.random.default_rng(0).normal(size=(3, 4, 4))
        assert diffusion_loss(e, e) == 0.0

    def test_hand_value(self):
        eps = np.array([[1.0, 0.0], [0.0, 2.0]])
        assert diffusion_loss(eps, np.zeros((2, 2))) == 1.25

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 5, 5))
        assert diffusion_loss(a, b) == diffusion_loss(b, a)

    def test_point_loss_lambda_zero_bitwise(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            e, eh = rng.normal(size=(2, 3, 8, 8))
            mask = (rng.random((8, 8)) < 0.3).astype(float)
            assert point_focused_loss(e, eh, mask, 0.0) == diffusion_loss(e, eh)

    def test_point_loss_all_ones_mask(self):
        rng = np.random.default_rng(3)
        e, eh = rng.normal(size=(2, 2, 6, 6))
        lam = 0.5
        got = point_focused_loss(e, eh, np.ones((6, 6)), lam)
        assert abs(got - (1 + lam) * diffusion_loss(e, eh)) < 1e-12

    def test_point_loss_hand_value(self):
        eps = np.array([[1.0, 0.0], [0.0, 2.0]])
        mask = np.array([[1.0, 0.0], [0.0, 0.0]])
        got = point_focused_loss(eps, np.zeros((2, 2)), mask, 0.5)
        assert got == 1.25 + 0.5 * 0.25

    def test_rejects_negative_lambda_and_bad_mask(self):
        e = np.zeros((2, 2))
        with pytest.raises(ValueError):
            point_focused_loss(e, e, np.ones((2, 2)), -0.1)
        with pytest.raises(ValueError):
            point_focused_loss(e, e, np.ones((3, 3)), 0.5)

    def test_gradient_matches_finite_differences(self):
        # autograd gradient of the point-focused loss vs central differences
        rng = np.random.default_rng(4)
        h = 1e-5
        for _ in range(20):
            eps = torch.tensor(rng.normal(size=(4, 4)))
            eps_hat = torch.tensor(rng.normal(size=(4, 4)), requires_grad=True)
            mask = torch.tensor((rng.random((4, 4)) < 0.4).astype(float))
            loss = point_focused_loss(eps, eps_hat, mask, 0.5)
            loss.backward()
            grad = eps_hat.grad.numpy()
            fd = np.zeros((4, 4))
            for i in range(4):
                for j in range(4):
                    for sign in (+1, -1):
                        p = eps_hat.detach().clone()
                        p[i, j] += sign * h
                        fd[i, j] += sign * float(point_focused_loss(eps, p, mask, 0.5))
            fd /= 2 * h
            denom = np.maximum(np.abs(fd), 1e-8)
            assert np.max(np.abs(grad - fd) / denom) < 1e-4


class TestGuidance:
    def test_identity_scale(self):
        rng = np.random.default_rng(0)
        u, c = rng.normal(size=(2, 3, 3))
        assert np.allclose(cfg_combine(u, c, 1.0), c)

    def test_agreement(self):
        c = np.random.default_rng(1).normal(size=(3, 3))
        assert np.allclose(cfg_combine(c, c, 7.3), c)

    def test_hand_value(self):
        assert cfg_combine(np.array(0.0), np.array(1.0), 2.0) == 2.0


class TestDenoiseStep:
    def test_deterministic_without_noise(self):
        s = build_schedule(5, 0.01, 0.05)
        x = np.random.default_rng(0).normal(size=(3, 4, 4))
        e = np.random.default_rng(1).normal(size=(3, 4, 4))
        assert np.array_equal(denoise_step(x, e, 3, s, None), denoise_step(x, e, 3, s, None))

    def test_scalar_hand_value(self):
        # schedule with alpha_2 = 0.9, alpha_bar_2 = 0.72
        s = NoiseSchedule(beta=np.array([0.2, 0.1]), timesteps=np.array([1, 2]))
        assert np.allclose(s.alpha_bar, [0.8, 0.72])
        got = denoise_step(np.array(1.0), np.array(0.5), 2, s, None)
        want = (1 - (0.1 / math.sqrt(0.28)) * 0.5) / math.sqrt(0.9)
        assert abs(got - want) < 1e-12
        assert abs(got - 0.9545) < 2e-4

    def test_no_op_limit(self):
        s = build_schedule(3, 1e-12, 1e-12)
        x = np.random.default_rng(2).normal(size=(4,))
        out = denoise_step(x, np.ones(4), 2, s, None)
        assert np.allclose(out, x, atol=1e-5)

    def test_single_step_reconstruction(self):
        # T=1: denoising the noised sample with the true eps recovers x0
        s = build_schedule(1, 0.3, 0.3)
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(2, 5, 5))
        eps = rng.normal(size=(2, 5, 5))
        x1 = add_noise(x0, eps, 1, s)
        rec = denoise_step(x1, eps, 1, s, None)
        assert np.max(np.abs(rec - x0)) < 1e-10


class TestStridedSchedule:
    def test_preserves_alpha_bar_chain(self):
        s = build_schedule(1000, 1e-4, 0.02)
        sub = strided_schedule(s, 50)
        assert sub.T == 50
        assert np.allclose(sub.alpha_bar, np.cumprod(sub.alpha))
        assert sub.timesteps[-1] == 1000
        assert np.all(np.diff(sub.alpha_bar) < 0)
        assert np.allclose(sub.alpha_bar[-1], s.alpha_bar[-1])

    def test_full_subsample_is_identity(self):
        s = build_schedule(20, 1e-3, 0.02)
        sub = strided_schedule(s, 20)
        assert np.allclose(sub.beta, s.beta)


class _StubModel:
    """Predicts a fixed fraction of x_t; enough to exercise the loop."""

    def __init__(self, shape, trained=True):
        self.shape = shape
        self.trained = trained

    def sample_shape(self, bundle):
        return self.shape

    def predict_pair(self, x_t, t, bundle, need_uncond=True):
        cond = 0.1 * x_t
        return (0.2 * x_t if need_uncond else None), cond


class TestSampleLoop:
    def test_untrained_model_rejected(self):
        with pytest.raises(ValueError):
            sample(_StubModel((1, 3, 8, 8), trained=False), None,
                   build_schedule(10, 1e-4, 0.02), 2.0, seed=0)

    def test_same_seed_identical(self):
        s = build_schedule(100, 1e-4, 0.02)
        m = _StubModel((2, 3, 8, 8))
        a = sample(m, None, s, 2.0, seed=42, num_steps=10)
        b = sample(m, None, s, 2.0, seed=42, num_steps=10)
        assert torch.equal(a, b)
        c = sample(m, None, s, 2.0, seed=43, num_steps=10)
        assert not torch.equal(a, c)

    def test_guidance_one_equals_conditional(self):
        s = build_schedule(50, 1e-4, 0.02)

        class CondOnly(_StubModel):
            def predict_pair(self, x_t, t, bundle, need_uncond=True):
                # unconditional branch deliberately poisoned: must be unused
                return (float("nan") * x_t if need_uncond else None), 0.1 * x_t

        a = sample(CondOnly((1, 3, 8, 8)), None, s, 1.0, seed=7, num_steps=10)
        assert torch.isfinite(a).all()

    def test_output_shape_matches_contract(self):
        s = build_schedule(20, 1e-4, 0.02)
        out = sample(_StubModel((3, 1, 6, 4)), None, s, 2.0, seed=0, num_steps=5)
        assert tuple(out.shape) == (3, 1, 6, 4)
