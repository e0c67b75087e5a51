import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rigidsplat.errors import Clipped, DimensionMismatch, NoValidPixels, StaleIntermediates
from rigidsplat.geometry import CameraIntrinsics, SE3Transform, matrix_to_rot6d
from rigidsplat.splat import (BACKEND, GaussianSet, RenderConfig, image_loss, init_gaussians,
                              project_gaussian, psnr, rasterize, rasterize_backward, ssim)
from rigidsplat.splat.losses import ssim_with_grad

K32 = CameraIntrinsics(32.0, 32.0, 15.5, 15.5, 32, 32)
BACKENDS = ["python"] + (["cython"] if BACKEND == "cython" else [])


def random_set(rng, n=20):
    # depth-separated so the sort order cannot flip under finite-difference steps
    pos = np.c_[rng.uniform(-0.4, 0.4, (n, 2)), 2.0 + 0.05 * np.arange(n)]
    return GaussianSet(pos, rng.normal(size=(n, 4)), np.log(rng.uniform(0.04, 0.12, (n, 3))),
                       rng.normal(size=n), rng.uniform(0, 1, (n, 3)), np.zeros(n, int))


def on_axis(color=(1.0, 0.0, 0.0), opacity=0.9, z=2.0, scale=0.1):
    return GaussianSet.isotropic(np.array([[0.0, 0.0, z]]), scale, opacity, color)


# -- initialization ---------------------------------------------------------

def test_init_two_by_two():
    K = CameraIntrinsics(2.0, 2.0, 0.5, 0.5, 2, 2)
    img = np.random.default_rng(0).uniform(size=(2, 2, 3))
    g = init_gaussians(img, np.ones((2, 2)), np.zeros((2, 2), int), K, SE3Transform.identity())
    assert len(g) == 4
    assert np.allclose(g.positions, [[-0.25, -0.25, 1], [0.25, -0.25, 1], [-0.25, 0.25, 1],
                                     [0.25, 0.25, 1]])
    assert np.allclose(g.colors, img.reshape(-1, 3))
    assert np.allclose(g.opacity, 0.7) and np.allclose(g.quats, [1, 0, 0, 0])


def test_init_skips_nan_and_sets_scale():
    K = CameraIntrinsics(100.0, 100.0, 1.0, 1.0, 3, 3)
    depth = np.full((3, 3), 2.0)
    depth[1, 1] = np.nan
    g = init_gaussians(np.zeros((3, 3, 3)), depth, np.zeros((3, 3), int), K, SE3Transform.identity())
    assert len(g) == 8
    assert np.allclose(g.scales, 0.02)
    with pytest.raises(NoValidPixels):
        init_gaussians(np.zeros((3, 3, 3)), np.full((3, 3), np.nan), np.zeros((3, 3), int), K,
                       SE3Transform.identity())


def test_init_places_points_in_world_frame():
    K = CameraIntrinsics(10.0, 10.0, 2.0, 2.0, 5, 5)
    cam = SE3Transform.from_twist([0.1, 0.2, -0.3, 0.05, 0.0, 0.1])
    g = init_gaussians(np.zeros((5, 5, 3)), np.full((5, 5), 3.0), np.zeros((5, 5), int), K, cam)
    uv = cam.apply(g.positions)
    assert np.allclose(uv[:, 2], 3.0)


# -- projection -------------------------------------------------------------

def test_on_axis_covariance_closed_form():
    f, s, z = 32.0, 0.1, 2.0
    mean, cov, depth = project_gaussian([0, 0, z], [1, 0, 0, 0], np.log([s] * 3), K32,
                                        SE3Transform.identity())
    assert np.allclose(mean, [15.5, 15.5]) and depth == z
    assert np.allclose(cov, ((f * s / z) ** 2 + 0.3) * np.eye(2))


def test_doubling_scales_quadruples_covariance(rng):
    q = rng.normal(size=4)
    ls = np.log(rng.uniform(0.05, 0.2, 3))
    _, c1, _ = project_gaussian([0.2, -0.1, 3.0], q, ls, K32, SE3Transform.identity())
    _, c2, _ = project_gaussian([0.2, -0.1, 3.0], q, ls + np.log(2), K32, SE3Transform.identity())
    assert np.allclose(c2 - 0.3 * np.eye(2), 4 * (c1 - 0.3 * np.eye(2)))
    assert np.all(np.linalg.eigvalsh(c1) > 0)


def test_projection_clips_near_plane():
    with pytest.raises(Clipped):
        project_gaussian([0, 0, 0.005], [1, 0, 0, 0], np.zeros(3), K32, SE3Transform.identity())


# -- forward ----------------------------------------------------------------

@pytest.mark.parametrize("backend", BACKENDS)
def test_empty_set_renders_background(backend):
    cfg = RenderConfig(background=(0.1, 0.2, 0.3))
    out = rasterize(GaussianSet.empty(), SE3Transform.identity(), K32, cfg, backend=backend)
    assert np.allclose(out.image, [0.1, 0.2, 0.3]) and np.all(out.alpha == 0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_on_axis_gaussian(backend):
    K = CameraIntrinsics(32.0, 32.0, 16.0, 16.0, 33, 33)
    out = rasterize(on_axis(), SE3Transform.identity(), K, backend=backend)
    assert np.allclose(out.image[16, 16], [0.9, 0, 0])
    assert out.alpha[16, 16] == pytest.approx(0.9)


@pytest.mark.parametrize("backend", BACKENDS)
def test_opaque_front_hides_back(backend):
    # the front Gaussian is fully opaque only at its centre pixel
    K = CameraIntrinsics(32.0, 32.0, 16.0, 16.0, 33, 33)
    front = on_axis((0, 1, 0), opacity=1.0 - 1e-12, z=2.0, scale=0.5)
    back = on_axis((1, 0, 0), opacity=0.8, z=3.0, scale=0.1)
    both = rasterize(GaussianSet.concat([back, front]), SE3Transform.identity(), K,
                     backend=backend)
    only = rasterize(front, SE3Transform.identity(), K, backend=backend)
    assert np.allclose(both.image[16, 16], only.image[16, 16], atol=1e-9)
    assert both.winner[16, 16] == 1


@pytest.mark.parametrize("backend", BACKENDS)
def test_compositing_weights_sum_to_one(backend, rng):
    g = random_set(rng, 40)
    g.colors[:] = 1.0
    out = rasterize(g, SE3Transform.identity(), K32, RenderConfig(background=(1, 1, 1)),
                    backend=backend)
    assert np.max(np.abs(out.image - 1.0)) < 1e-6
    out = rasterize(g, SE3Transform.identity(), K32, backend=backend)
    assert np.max(np.abs(out.image - out.alpha[..., None])) < 1e-6


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_render_in_unit_range_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    g = random_set(rng, 15)
    cfg = RenderConfig(background=tuple(rng.uniform(size=3)))
    a = rasterize(g, SE3Transform.identity(), K32, cfg).image
    assert a.min() >= 0 and a.max() <= 1
    b = rasterize(g.subset(rng.permutation(15)), SE3Transform.identity(), K32, cfg).image
    assert np.allclose(a, b, atol=1e-14)


def test_backends_agree(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    g = random_set(rng, 30)
    a = rasterize(g, SE3Transform.identity(), K32, backend="python")
    b = rasterize(g, SE3Transform.identity(), K32, backend="cython")
    assert np.allclose(a.image, b.image, atol=1e-12)
    assert np.array_equal(a.winner, b.winner)
    gi = np.random.default_rng(1).normal(size=a.image.shape)
    ga, gb = rasterize_backward(a, gi), rasterize_backward(b, gi)
    for k in ga:
        assert np.allclose(ga[k], gb[k], atol=1e-10), k


# -- backward ---------------------------------------------------------------

@pytest.mark.parametrize("backend", BACKENDS)
def test_color_gradient_is_accumulated_alpha(backend):
    out = rasterize(on_axis(), SE3Transform.identity(), K32, backend=backend)
    g = rasterize_backward(out, np.ones_like(out.image))
    assert np.allclose(g["colors"][0], out.alpha.sum())


def test_zero_opacity_gets_no_color_gradient():
    g = on_axis(opacity=0.5)
    g.logit_opacity[:] = -60.0
    out = rasterize(g, SE3Transform.identity(), K32)
    assert np.all(rasterize_backward(out, np.ones_like(out.image))["colors"] == 0)


def test_stale_config_and_shape_checks(rng):
    out = rasterize(random_set(rng, 5), SE3Transform.identity(), K32)
    with pytest.raises(StaleIntermediates):
        rasterize_backward(out, np.zeros_like(out.image), RenderConfig(gaussian_extent=2.0))
    with pytest.raises(DimensionMismatch):
        rasterize_backward(out, np.zeros((4, 4, 3)))


@pytest.mark.parametrize("backend", BACKENDS)
def test_all_gradient_blocks_match_finite_differences(backend):
    rng = np.random.default_rng(0)
    n = 20
    g = random_set(rng, n)
    cam = SE3Transform(
        matrix_to_rot6d(SE3Transform.from_twist([0.02, -0.01, 0.03, 0.02, 0.01, -0.03]).rotation)
        + rng.normal(scale=0.01, size=6), np.array([0.02, -0.01, 0.05]))
    Rm = SE3Transform.from_twist(rng.normal(scale=0.05, size=6)).rotation
    motion = (np.repeat(Rm[None], n, 0) + rng.normal(scale=0.01, size=(n, 3, 3)),
              rng.normal(scale=0.02, size=(n, 3)))
    target = rng.uniform(0, 1, (32, 32, 3))
    cfg = RenderConfig(background=(0.2, 0.3, 0.1))

    def loss():
        return image_loss(rasterize(g, cam, K32, cfg, motion, backend).image, target)[0]

    out = rasterize(g, cam, K32, cfg, motion, backend)
    grads = rasterize_backward(out, image_loss(out.image, target)[1])
    blocks = {"positions": g.positions, "quats": g.quats, "log_scales": g.log_scales,
              "logit_opacity": g.logit_opacity, "colors": g.colors, "motion_R": motion[0],
              "motion_t": motion[1], "cam_rot6": cam.rot6, "cam_translation": cam.translation}
    for name, arr in blocks.items():
        flat = arr.reshape(-1)
        for i in rng.choice(flat.size, min(8, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-6
            lp = loss()
            flat[i] = old - 1e-6
            lm = loss()
            flat[i] = old
            num = (lp - lm) / 2e-6
            ana = grads[name].reshape(-1)[i]
            assert abs(num - ana) / max(abs(num), abs(ana), 1e-7) < 1e-3, (name, i, num, ana)


# -- losses and metrics -----------------------------------------------------

def test_image_loss_examples(rng):
    a = rng.uniform(0.2, 0.8, (16, 16, 3))
    assert image_loss(a, a)[0] == pytest.approx(0.0, abs=1e-12)
    assert image_loss(a, a + 0.1, 0.0)[0] == pytest.approx(0.1)
    assert image_loss(a, a, 1.0)[0] == pytest.approx(0.0, abs=1e-12)
    b = a.copy()
    b[3, 4, 1] += 0.05
    assert image_loss(a, b, 1.0)[0] > 0
    with pytest.raises(DimensionMismatch):
        image_loss(a, a[:8])


def test_psnr_and_ssim_examples(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(a, a) == 99.0
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0)
    assert ssim(a, a) == pytest.approx(1.0)
    with pytest.raises(DimensionMismatch):
        psnr(a, a[:, :4])


def test_ssim_gradient_matches_finite_differences(rng):
    x = rng.uniform(size=(12, 12, 3))
    y = rng.uniform(size=(12, 12, 3))
    _, g = ssim_with_grad(x, y)
    for i in rng.choice(x.size, 10, replace=False):
        flat = x.reshape(-1)
        old = flat[i]
        flat[i] = old + 1e-6
        sp = ssim(x, y)
        flat[i] = old - 1e-6
        sm = ssim(x, y)
        flat[i] = old
        num = (sp - sm) / 2e-6
        assert abs(num - g.reshape(-1)[i]) < 1e-3 * max(abs(num), 1e-6)

