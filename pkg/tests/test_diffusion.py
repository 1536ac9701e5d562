import math

import numpy as np
import pytest

from evdi.blur import synth_blur
from evdi.core import ConfigError, DomainError, ExposureWindow, Pose2, Trajectory
from evdi.diffusion import (AvgPoolCodec, DiffusionSchedule, IdentityCodec, OracleDenoiser,
                            ShrinkageDenoiser, ZeroDenoiser, forward_noise, make_codec, make_denoiser,
                            refine_render, refined_latent, reverse_step, rsd_loss, stage1_rsd_term,
                            stage2_step, stage2_timestep)
from evdi.scene import SceneModel, backprop_render, render

from helpers import check_gradient

SCHED = DiffusionSchedule.linear()
T = SCHED.steps


def l1(x):
    return float(np.mean(np.abs(x)))


class TestSchedule:
    def test_tables(self):
        ab = SCHED.alpha_bar
        assert ab[0] == 1.0
        assert np.all(np.diff(ab) < 0)
        assert np.all((ab > 0) & (ab <= 1))
        assert SCHED.beta[1] == 1e-4 and SCHED.beta[T] == pytest.approx(0.02, rel=1e-15)
        assert np.allclose(SCHED.alpha, 1 - SCHED.beta, atol=0)

    def test_csv(self):
        lines = SCHED.to_csv().splitlines()
        assert lines[0] == "t,beta,alpha,alpha_bar,sigma" and len(lines) == T + 2
        assert float(lines[-1].split(",")[3]) == SCHED.alpha_bar[T]

    def test_bad_parameters(self):
        with pytest.raises(DomainError):
            DiffusionSchedule.linear(10, 0.5, 0.1)


class TestForward:
    def test_clean_row(self):
        z = np.random.default_rng(0).random((4, 4, 3))
        assert np.array_equal(forward_noise(SCHED, z, 0, np.ones_like(z)), z)

    def test_zero_noise(self):
        z = np.random.default_rng(1).random((4, 4, 3))
        assert np.array_equal(forward_noise(SCHED, z, 500, np.zeros_like(z)),
                              math.sqrt(SCHED.alpha_bar[500]) * z)

    @pytest.mark.parametrize("t", [10, 500, 1000])
    def test_monte_carlo_variance(self, t):
        rng = np.random.default_rng(t)
        z0 = np.full(10_000, 0.3)
        zt = forward_noise(SCHED, z0, t, rng.standard_normal(z0.shape))
        assert np.var(zt) == pytest.approx(1 - SCHED.alpha_bar[t], rel=0.05)

    def test_errors(self):
        with pytest.raises(DomainError):
            forward_noise(SCHED, np.zeros(3), T + 1, np.zeros(3))
        with pytest.raises(DomainError):
            forward_noise(SCHED, np.zeros(3), 5, np.zeros(4))


class TestReverse:
    def test_zero_eps(self):
        z = np.random.default_rng(2).random((3, 3, 1))
        assert np.allclose(reverse_step(SCHED, z, np.zeros_like(z), 7), z / math.sqrt(SCHED.alpha[7]),
                           rtol=1e-15)

    @pytest.mark.parametrize("t", [1, T // 2, T])
    def test_closed_form_identity(self, t):
        rng = np.random.default_rng(t)
        z0, eps = rng.standard_normal((2, 16, 16, 3))
        out = reverse_step(SCHED, forward_noise(SCHED, z0, t, eps), eps, t)
        a, ab, ab1 = SCHED.alpha[t], SCHED.alpha_bar[t], SCHED.alpha_bar[t - 1]
        expect = math.sqrt(ab1) * z0 + math.sqrt(a) * (1 - ab1) / math.sqrt(1 - ab) * eps
        assert np.max(np.abs(out - expect)) <= 1e-10

    def test_linear_in_z(self):
        rng = np.random.default_rng(3)
        a, b, e = rng.standard_normal((3, 5, 5, 1))
        lhs = reverse_step(SCHED, 2 * a - b, e, 40)
        rhs = 2 * reverse_step(SCHED, a, e, 40) - reverse_step(SCHED, b, e, 40)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_noise_term(self):
        z = np.zeros((2, 2, 1))
        n = np.ones_like(z)
        assert np.allclose(reverse_step(SCHED, z, z, 300, noise=n), SCHED.sigma[300])

    def test_full_chain_with_zero_denoiser(self):
        z = np.random.default_rng(4).standard_normal((3, 3, 1))
        out = z.copy()
        for t in range(T, 0, -1):
            out = reverse_step(SCHED, out, np.zeros_like(out), t)
        scale = np.prod(1 / np.sqrt(SCHED.alpha[1:]))
        assert np.allclose(out, z * scale, rtol=1e-10)

    def test_t_zero_rejected(self):
        with pytest.raises(DomainError):
            reverse_step(SCHED, np.zeros(2), np.zeros(2), 0)


class TestDenoisers:
    def test_shapes(self):
        z = np.random.default_rng(5).standard_normal((8, 8, 3))
        y = np.random.default_rng(6).random((8, 8, 3))
        for d in (ZeroDenoiser(), ShrinkageDenoiser(SCHED), OracleDenoiser(SCHED, y)):
            assert d.denoise(z, y, 100).shape == z.shape

    def test_oracle_recovers_noise(self):
        rng = np.random.default_rng(7)
        z0, eps = rng.standard_normal((2, 6, 6, 3))
        d = OracleDenoiser(SCHED, z0)
        assert np.allclose(d.denoise(forward_noise(SCHED, z0, 321, eps), None, 321), eps, atol=1e-12)

    def test_shrinkage_resizes_conditioning(self):
        y = np.random.default_rng(8).random((16, 16, 3))
        z = np.zeros((4, 4, 3))
        assert ShrinkageDenoiser(SCHED).denoise(z, y, 10).shape == z.shape

    def test_factory(self):
        assert isinstance(make_denoiser("zero", SCHED), ZeroDenoiser)
        with pytest.raises(ConfigError):
            make_denoiser("oracle", SCHED)
        with pytest.raises(ConfigError):
            make_denoiser("unet", SCHED)


class TestCodecs:
    def test_identity_round_trip(self):
        x = np.random.default_rng(9).random((5, 6, 3))
        c = IdentityCodec()
        assert np.array_equal(c.decode(c.encode(x)), x)

    def test_avgpool_shapes(self):
        c = AvgPoolCodec()
        x = np.random.default_rng(10).random((16, 24, 3))
        assert c.encode(x).shape == (4, 6, 3)
        assert c.decode(c.encode(x)).shape == x.shape
        with pytest.raises(DomainError):
            c.encode(np.zeros((10, 8, 3)))

    def test_avgpool_constant_round_trip(self):
        c = AvgPoolCodec()
        x = np.full((12, 8, 2), 0.37)
        assert np.allclose(c.decode(c.encode(x)), x, atol=1e-15)

    def test_avgpool_adjoint(self):
        rng = np.random.default_rng(11)
        c = AvgPoolCodec()
        x = rng.standard_normal((16, 12, 3))
        g = rng.standard_normal((4, 3, 3))
        assert np.sum(c.encode(x) * g) == pytest.approx(np.sum(x * c.encode_vjp(g)), rel=1e-13)

    def test_factory(self):
        assert isinstance(make_codec("avgpool"), AvgPoolCodec)
        with pytest.raises(ConfigError):
            make_codec("vae")


class TestRsd:
    def test_zero_case(self):
        z = np.zeros((4, 4, 3))
        res = rsd_loss(SCHED, z, 10, ZeroDenoiser(), None, noises=(z, z))
        assert res.value == 0.0

    def test_zero_denoiser_equal_noises_hand_formula(self):
        rng = np.random.default_rng(12)
        z0, eps = rng.standard_normal((2, 6, 6, 3))
        t = 250
        res = rsd_loss(SCHED, z0, t, ZeroDenoiser(), None, noises=(eps, eps))
        z_t = forward_noise(SCHED, z0, t, eps)
        expect = l1(forward_noise(SCHED, z0, t - 1, eps) - z_t / math.sqrt(SCHED.alpha[t]))
        assert res.value == pytest.approx(expect, rel=1e-13)

    def test_scale_equivariance_zero_denoiser(self):
        # the z0 coefficients of both branches are equal, so the value only sees the noises
        rng = np.random.default_rng(13)
        z0, e1, e2 = rng.standard_normal((3, 5, 5, 2))
        t = 600
        direct = l1(math.sqrt(1 - SCHED.alpha_bar[t - 1]) * e2
                    - math.sqrt(1 - SCHED.alpha_bar[t]) / math.sqrt(SCHED.alpha[t]) * e1)
        for s in (0.0, 0.5, 3.0):
            res = rsd_loss(SCHED, s * z0, t, ZeroDenoiser(), None, noises=(e1, e2))
            assert res.value == pytest.approx(direct, rel=1e-10)

    @pytest.mark.parametrize("t", [5, 400, 1000])
    @pytest.mark.parametrize("denoiser", ["shrinkage", "oracle"])
    def test_gradient_with_target_frozen(self, t, denoiser):
        rng = np.random.default_rng(t)
        z0 = rng.random((12, 12, 3))
        y = rng.random((12, 12, 3))
        noises = tuple(rng.standard_normal((2,) + z0.shape))
        d = make_denoiser(denoiser, SCHED, clean=rng.random(z0.shape))
        res = rsd_loss(SCHED, z0, t, d, y, noises=noises)
        f = lambda: l1(forward_noise(SCHED, z0, t - 1, noises[1]) - res.z_prev_hat)
        check_gradient(f, z0, res.grad, rng, h=1e-7)

    def test_both_branches_cancel(self):
        rng = np.random.default_rng(14)
        z0 = rng.random((8, 8, 3))
        noises = tuple(rng.standard_normal((2,) + z0.shape))
        res = rsd_loss(SCHED, z0, 300, ZeroDenoiser(), None, noises=noises, grad_mode="both")
        assert np.max(np.abs(res.grad)) <= 1e-15
        # the loss with a constant denoiser is flat in z0
        f = lambda: rsd_loss(SCHED, z0, 300, ZeroDenoiser(), None, noises=noises).value
        base = f()
        z0 += 0.1
        assert f() == pytest.approx(base, rel=1e-12)

    def test_grad_modes_and_errors(self):
        z = np.zeros((2, 2, 1))
        with pytest.raises(DomainError):
            rsd_loss(SCHED, z, 5, ZeroDenoiser(), None, noises=(z, z), grad_mode="neither")

    def test_coupled_noise_draw(self):
        z = np.zeros((3, 3, 1))
        a = rsd_loss(SCHED, z, 5, ZeroDenoiser(), None, rng=np.random.default_rng(15), coupled=True)
        assert np.allclose(a.z_prev / math.sqrt(1 - SCHED.alpha_bar[4]), a.z_t / math.sqrt(1 - SCHED.alpha_bar[5]))


def small_model(rng, view=(16, 20), pad=6, residual=True):
    m = SceneModel.create(view, pad)
    m.canvas = rng.uniform(0.1, 0.9, m.canvas.shape)
    if residual:
        m.residual = 0.05 * rng.standard_normal(m.residual.shape)
    return m


WINDOW = ExposureWindow(0.1, 0.04)


class TestStage1Term:
    @pytest.mark.parametrize("codec", [IdentityCodec(), AvgPoolCodec()])
    def test_gradient(self, codec):
        rng = np.random.default_rng(16)
        m = small_model(rng, residual=False)
        tr = Trajectory.from_endpoints(0, WINDOW, Pose2(-0.02, -1.5, 0.5), Pose2(0.02, 1.5, -0.5), 9)
        gt = rng.random((16, 20, 3))
        z_shape = codec.encode(gt).shape
        noises = tuple(rng.standard_normal((2,) + z_shape))
        den = ShrinkageDenoiser(SCHED)
        term = stage1_rsd_term(m, tr, gt, codec, den, SCHED, 200, noises=noises)
        frozen = rsd_loss(SCHED, codec.encode(synth_blur(m, tr).image), 200, den, gt, noises=noises).z_prev_hat
        f = lambda: l1(forward_noise(SCHED, codec.encode(synth_blur(m, tr).image), 199, noises[1]) - frozen)
        check_gradient(f, m.canvas, term.canvas, rng, h=1e-7)

    def test_zero_denoiser_equal_noise_hand_formula(self):
        rng = np.random.default_rng(17)
        m = small_model(rng, residual=False)
        tr = Trajectory.from_endpoints(0, WINDOW, Pose2(0, -1, 0), Pose2(0, 1, 0), 9)
        eps = rng.standard_normal((16, 20, 3))
        term = stage1_rsd_term(m, tr, np.zeros((16, 20, 3)), IdentityCodec(), ZeroDenoiser(), SCHED, 50,
                               noises=(eps, eps))
        z0 = synth_blur(m, tr).image
        expect = l1(forward_noise(SCHED, z0, 49, eps) - forward_noise(SCHED, z0, 50, eps) / math.sqrt(SCHED.alpha[50]))
        assert term.value == pytest.approx(expect, rel=1e-13)


class TestStage2:
    def test_zero_residual_latent(self):
        m = small_model(np.random.default_rng(18), residual=False)
        pose = Pose2(0.01, 0.4, -0.3)
        z, color, _, _ = refined_latent(m, pose, IdentityCodec())
        assert np.array_equal(z, color)
        assert np.array_equal(refine_render(m, pose, IdentityCodec()), render(m, pose)[0])

    def test_identity_codec_adds_residual(self):
        m = small_model(np.random.default_rng(19))
        pose = Pose2(-0.01, 1.2, 0.3)
        expect = render(m, pose)[0] + render(m, pose, "residual")[0]
        assert np.allclose(refine_render(m, pose, IdentityCodec()), expect, atol=1e-15)

    def test_avgpool_refine_shape(self):
        m = small_model(np.random.default_rng(20))
        m.residual = np.zeros(m.canvas.shape[:2] + (3,))
        out = refine_render(m, Pose2(), AvgPoolCodec())
        assert out.shape == (16, 20, 3)

    def test_residual_channel_mismatch(self):
        m = SceneModel.create((16, 20), 6, residual_channels=4)
        with pytest.raises(DomainError):
            refined_latent(m, Pose2(), IdentityCodec())

    @pytest.mark.parametrize("codec", [IdentityCodec(), AvgPoolCodec()])
    def test_gradient_reaches_residual_only(self, codec):
        rng = np.random.default_rng(21)
        m = small_model(rng)
        pose = Pose2(0.02, 0.7, -1.1)
        z_shape = codec.encode(np.zeros((16, 20, 3))).shape
        noises = tuple(rng.standard_normal((2,) + z_shape))
        den = ShrinkageDenoiser(SCHED)
        canvas0 = m.canvas.copy()
        value, grad = stage2_step(m, pose, codec, den, SCHED, 300, noises=noises)
        assert grad.shape == m.residual.shape
        assert np.array_equal(m.canvas, canvas0)
        z0, color, _, _ = refined_latent(m, pose, codec)
        frozen = rsd_loss(SCHED, z0, 300, den, color, noises=noises).z_prev_hat
        f = lambda: l1(forward_noise(SCHED, refined_latent(m, pose, codec)[0], 299, noises[1]) - frozen)
        assert value == pytest.approx(f(), rel=1e-14)
        check_gradient(f, m.residual, grad, rng, h=1e-7)


class TestTimestep:
    def test_endpoints(self):
        assert stage2_timestep(0, 500, 800, 20) == 800
        assert stage2_timestep(500, 500, 800, 20) == 20

    def test_midpoint(self):
        assert stage2_timestep(250, 500, 800, 20) == 410
        assert stage2_timestep(1, 2, 801, 20) == 411  # round half up of 410.5

    def test_monotone_and_clamped(self):
        ts = [stage2_timestep(i, 100, 800, 20) for i in range(101)]
        assert all(a >= b for a, b in zip(ts, ts[1:]))
        assert stage2_timestep(0, 10, 5000, 1) == 1000
        assert stage2_timestep(0, 0, 800, 20) == 20
