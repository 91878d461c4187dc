import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthdiff.grid import Field2D
from depthdiff.schedule import ddim_sample, make_schedule, make_spacing, rescale_zero_snr
from depthdiff.toy import (
    DistillConfig,
    GaussianDenoiser,
    PointMassDenoiser,
    ToyArchitecture,
    ToyDenoiser,
    TrainingDiverged,
    distill_lcm,
    gen_scene,
    lcm_sample,
    normals_from_depth,
    patch_loss_mask,
    train_denoiser,
    widen_input,
)
from depthdiff.toy.scenes import Sphere, sphere_depth_normals
from depthdiff.toy.training import denoising_loss, scene_tensors

SCHED = make_schedule()
ZSNR = rescale_zero_snr(SCHED)
SMALL = ToyArchitecture(width=8, hidden_layers=3, emb_dim=8)


def angle_deg(a, b):
    return np.degrees(np.arccos(np.clip(np.sum(a * b, axis=0), -1, 1)))


class TestScenes:
    def test_deterministic(self):
        a, b = gen_scene(7, 20, 24), gen_scene(7, 20, 24)
        for x, y in ((a.rgb, b.rgb), (a.depth, b.depth), (a.normals, b.normals)):
            assert np.array_equal(x.values, y.values)
        assert not np.array_equal(a.depth.values, gen_scene(8, 20, 24).depth.values)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_invariants(self, seed):
        s = gen_scene(seed, 16, 16)
        assert np.all(s.depth.values > 0)
        assert 0 <= s.rgb.values.min() and s.rgb.values.max() <= 1
        np.testing.assert_allclose(np.linalg.norm(s.normals.values, axis=0), 1, atol=1e-12)

    def test_fronto_parallel_plane(self):
        s = gen_scene(1, 16, 16, n_planes=1, n_spheres=0, max_slope=0.0)
        assert np.ptp(s.depth.values) == 0
        assert np.all(s.normals.values[2] == 1)

    def test_too_small(self):
        with pytest.raises(ValueError):
            gen_scene(0, 8, 16)

    def test_sphere_center_and_rim(self):
        d, n, inside = sphere_depth_normals(Sphere(20, 20, 100.0, 10.0), 41, 41)
        np.testing.assert_allclose(n[:, 20, 20], [0, 0, 1])
        assert d[20, 20] == 90.0
        assert abs(n[2, 20, 29]) < 0.5 and inside.sum() > 0


class TestNormalsFromDepth:
    def test_constant_and_ramp(self):
        np.testing.assert_array_equal(normals_from_depth(Field2D(np.full((4, 4), 2.0))).values[2], 1.0)
        ramp = np.tile(np.arange(6.0), (5, 1))
        n = normals_from_depth(Field2D(ramp)).values
        np.testing.assert_allclose(n[:, 2, 3], [-np.sqrt(0.5), 0, np.sqrt(0.5)], atol=1e-15)
        np.testing.assert_allclose(n[:, 0, 0], [-np.sqrt(0.5), 0, np.sqrt(0.5)], atol=1e-15)

    def test_sphere_oracle_within_two_degrees(self):
        sphere = Sphere(32, 32, 200.0, 24.0)
        d, n, inside = sphere_depth_normals(sphere, 65, 65)
        est = normals_from_depth(Field2D(np.where(inside, d, 200.0))).values
        yy, xx = np.mgrid[0:65, 0:65]
        interior = np.hypot(xx - 32, yy - 32) < 0.8 * 24
        assert angle_deg(est, n)[interior].max() <= 2.0


class TestAnalyticDenoisers:
    @pytest.mark.parametrize("param", ["epsilon", "v", "x0"])
    def test_point_mass_50_steps(self, param, rng):
        x_star = rng.normal(size=(1, 8, 8))
        den = PointMassDenoiser(x_star, SCHED, param)
        out = ddim_sample(den, np.zeros((3, 8, 8)), make_spacing(1000, 50), SCHED, seed=4)
        assert np.max(np.abs(out - x_star)) <= 1e-6

    def test_point_mass_zero_noise_error(self, rng):
        sched = make_schedule()
        den = PointMassDenoiser(rng.normal(size=(1, 2, 2)), sched)
        with pytest.raises(ZeroDivisionError):
            den(np.zeros((1, 2, 2)), None, -1)

    def test_gaussian_limits(self, rng):
        mean = rng.normal(size=(1, 4, 4))
        x = rng.normal(size=(1, 4, 4))
        tiny = GaussianDenoiser(mean, 1e-12, SCHED)
        np.testing.assert_allclose(tiny.posterior_mean(x, 500), mean, atol=1e-9)
        g = GaussianDenoiser(mean, 0.3, SCHED)
        np.testing.assert_allclose(g.posterior_mean(x, -1), x, atol=0)
        with pytest.raises(ValueError):
            GaussianDenoiser(mean, 0.0, SCHED)

    def test_gaussian_sampling_small(self):
        mean, var, n = 0.4, 0.25, 2000
        den = GaussianDenoiser(np.full((1, 1, n), mean), var, SCHED)
        out = ddim_sample(den, np.zeros((3, 1, n)), make_spacing(1000, 50), SCHED, seed=0).ravel()
        assert abs(out.mean() - mean) < 4 * np.sqrt(var / n)
        assert abs(out.var() / var - 1) < 0.15


def _fd_check(model, params, fn, idx, h=1e-4):
    for i in idx:
        p1, p2 = params.copy(), params.copy()
        p1[i] += h
        p2[i] -= h
        yield i, (fn(p1) - fn(p2)) / (2 * h)


class TestNetwork:
    def test_shapes_and_budget(self, rng):
        m = ToyDenoiser.create(ToyArchitecture(), 0)
        assert m.arch.n_params <= 100_000
        out = m(rng.normal(size=(1, 16, 16)), rng.random((3, 16, 16)), 10)
        assert out.shape == (1, 16, 16)

    def test_output_gradient_fd(self, rng):
        m = ToyDenoiser.create(SMALL, 1)
        params = m.params + 0.3 * rng.standard_normal(m.params.size)
        x, c = rng.normal(size=(2, 1, 6, 5)), rng.random((2, 3, 6, 5))
        t = np.array([3, 700])
        g_out = rng.normal(size=(2, 1, 6, 5))
        out, cache = m.apply(params, x, c, t)
        grad = m.backward(params, cache, g_out)
        fn = lambda p: float(np.sum(g_out * m.apply(p, x, c, t)[0]))
        # cover every layer: sample from each named block
        idx = [pos + int(rng.integers(np.prod(shape))) for pos, shape in m.arch.layout().values()]
        for i, num in _fd_check(m, params, fn, idx):
            assert grad[i] == pytest.approx(num, rel=1e-4, abs=1e-9)

    def test_loss_gradient_fd(self, rng):
        scene = gen_scene(0, 16, 16)
        m = ToyDenoiser.create(SMALL, 2, "v")
        x0, cond = scene_tensors([scene])
        t = np.array([250])
        eps = rng.standard_normal(x0.shape)
        loss, grad = denoising_loss(m, m.params, x0, cond, t, eps, SCHED)
        fn = lambda p: denoising_loss(m, p, x0, cond, t, eps, SCHED)[0]
        for i, num in _fd_check(m, m.params, fn, rng.choice(m.params.size, 10, replace=False)):
            assert grad[i] == pytest.approx(num, rel=1e-4, abs=1e-9)

    def test_widen_input_preserves_activations(self, rng):
        m = ToyDenoiser.create(SMALL, 3)
        wide = widen_input(m)
        x, c = rng.normal(size=(1, 1, 5, 5)), rng.random((1, 3, 5, 5))
        t = np.array([100])
        base = m.predict(x, c, t)
        dup = np.concatenate([c, x, c], axis=1)
        np.testing.assert_allclose(wide.predict(x, dup, t), base, rtol=1e-12, atol=1e-12)
        assert wide.cond_channels == 3 + 4


class TestTraining:
    def test_zero_iterations_unchanged(self):
        scene = gen_scene(0, 16, 16)
        init = ToyDenoiser.create(SMALL, 5)
        out = train_denoiser([scene], iters=0, init=init)
        assert np.array_equal(out.params, init.params)

    def test_deterministic_and_decreasing(self):
        scene = gen_scene(0, 16, 16)
        a = train_denoiser([scene], iters=150, arch=SMALL, seed=3)
        b = train_denoiser([scene], iters=150, arch=SMALL, seed=3)
        assert np.array_equal(a.params, b.params)
        tr = np.array(a.loss_trace)
        assert tr[-50:].mean() < tr[:50].mean()

    def test_divergence_raises(self):
        scene = gen_scene(0, 16, 16)
        with pytest.raises(TrainingDiverged) as exc:
            train_denoiser([scene], iters=300, arch=SMALL, lr=5.0)
        assert len(exc.value.trace) > 0

    def test_distill_zero_iterations_bit_exact(self):
        teacher = ToyDenoiser.create(SMALL, 6)
        student = distill_lcm(teacher, DistillConfig(iterations=0), [gen_scene(0, 16, 16)], ZSNR)
        assert np.array_equal(student.params, teacher.params) and student is not teacher

    def test_distill_short_run(self):
        teacher = ToyDenoiser.create(SMALL, 6)
        scene = gen_scene(0, 16, 16)
        cfg = DistillConfig(iterations=20, seed=2)
        a = distill_lcm(teacher, cfg, [scene], ZSNR)
        b = distill_lcm(teacher, cfg, [scene], ZSNR)
        assert np.array_equal(a.params, b.params)
        assert all(np.isfinite(v) and v >= 0 for v in a.loss_trace)
        out = lcm_sample(a, scene.rgb.values, ZSNR, cfg.lcm(), seed=0)
        assert out.shape == (1, 16, 16)

    def test_distill_rejects_bad_k(self):
        with pytest.raises(ValueError):
            distill_lcm(ToyDenoiser.create(SMALL, 0), DistillConfig(skip_k=1000, iterations=1),
                        [gen_scene(0, 16, 16)], ZSNR)


class TestPatchMask:
    def test_threshold(self):
        gt = np.zeros((4, 4))
        pred = np.zeros((4, 4))
        pred[:2, :2] = 0.5
        pred[2:, 2:] = 0.1
        keep = patch_loss_mask(pred, gt, 2)
        assert not keep[:2, :2].any() and keep[2:, 2:].all() and keep[:2, 2:].all()
