import numpy as np
import pytest

from rigidsplat.errors import ConfigInfeasible
from rigidsplat.geometry import SE3Transform, pixel_rays, se3_interpolate
from rigidsplat.se3field import field_motion, init_field
from rigidsplat.splat import rasterize
from rigidsplat.synthgen import NoiseSpec, SynthConfig, generate, perturb
from rigidsplat.tensorio import load_manifest

SMALL = dict(width=32, height=32, focal=32.0, object_blobs=800, seed=3)


def test_zero_motion_gives_identical_frames():
    b = generate(SynthConfig(cam_rot_deg=0, cam_trans=0, obj_rot_deg=0, obj_trans=0, **SMALL))
    r = b.rasters
    assert np.array_equal(r["i0"], r["i1"]) and np.array_equal(r["i0"], b.i_test)
    ok = np.isfinite(r["flow_fwd"])
    assert ok.all() and np.all(r["flow_fwd"] == 0)


def test_exact_bundle_self_consistency(tiny_bundle):
    K, r, o = tiny_bundle.K, tiny_bundle.rasters, tiny_bundle.oracle
    grid = K.pixel_grid().reshape(-1, 2)
    P = pixel_rays(K, grid) * r["d0"].reshape(-1, 1)
    labels = r["labels"].reshape(-1)
    Q = np.empty_like(P)
    for k in np.unique(labels):
        T = o.t_cam if k == 0 else o.t_cam @ o.t_obj[int(k)]
        Q[labels == k] = T.apply(P[labels == k])
    uv = np.stack([K.fx * Q[:, 0] / Q[:, 2] + K.cx, K.fy * Q[:, 1] / Q[:, 2] + K.cy], axis=-1)
    err = np.abs(uv - (grid + r["flow_fwd"].reshape(-1, 2)))
    assert np.nanmax(err) < 1e-5
    assert np.isfinite(r["d0"]).all() and np.isfinite(r["flow_fwd"]).all()


def test_pure_camera_translation_parallax():
    cfg = SynthConfig(width=33, height=33, focal=32.0, n_objects=0, cam_rot_deg=0, cam_trans=0.2,
                      obj_rot_deg=0, obj_trans=0, seed=5)
    b = generate(cfg)
    t = b.oracle.t_cam.translation
    assert np.allclose(b.oracle.t_cam.rotation, np.eye(3))
    d = b.rasters["d0"][16, 16]
    expected = cfg.focal * t[:2] / (d + t[2])
    assert np.allclose(b.rasters["flow_fwd"][16, 16], expected, atol=1e-9)


def test_mid_frame_is_interpolated_render(tiny_bundle):
    g = tiny_bundle.gaussians
    o = tiny_bundle.oracle
    fld = init_field(g, o.t_obj)
    img = rasterize(g, se3_interpolate(o.t_cam, o.ratio), tiny_bundle.K,
                    motion=field_motion(fld, o.ratio)).image
    assert np.allclose(img, tiny_bundle.i_test, atol=1e-12)


def test_generation_is_deterministic():
    a, b = generate(SynthConfig(**SMALL)), generate(SynthConfig(**SMALL))
    for k in a.rasters:
        assert np.array_equal(a.rasters[k], b.rasters[k], equal_nan=True)
    assert np.array_equal(a.i_test, b.i_test)


def test_infeasible_configs_are_rejected():
    with pytest.raises(ConfigInfeasible):
        generate(SynthConfig(obj_trans=20.0, **SMALL))
    with pytest.raises(ConfigInfeasible):
        generate(SynthConfig(cam_trans=10.0, **SMALL))
    with pytest.raises(ValueError):
        SynthConfig(ratio=1.5)


def test_config_round_trip():
    cfg = SynthConfig(noise=NoiseSpec(depth=0.1, mask_px=2), ratio=0.3)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


def test_perturb_zero_is_identity(tiny_bundle):
    p = perturb(tiny_bundle, NoiseSpec(), seed=9)
    for k, v in tiny_bundle.rasters.items():
        assert np.array_equal(p.rasters[k], v, equal_nan=True)


def test_perturb_depth_noise_level_and_seed(tiny_bundle):
    a = perturb(tiny_bundle, NoiseSpec(depth=0.05), seed=4)
    b = perturb(tiny_bundle, NoiseSpec(depth=0.05), seed=4)
    d, dn = tiny_bundle.rasters["d0"], a.rasters["d0"]
    assert 0.03 <= np.mean(np.abs(dn - d) / d) <= 0.07
    for k in a.rasters:
        assert np.array_equal(a.rasters[k], b.rasters[k], equal_nan=True)
    assert a.oracle is tiny_bundle.oracle
    assert np.array_equal(a.rasters["i0"], tiny_bundle.rasters["i0"])


def test_perturb_masks_and_flow_drop(tiny_bundle):
    lab = tiny_bundle.rasters["labels"]
    eroded = perturb(tiny_bundle, NoiseSpec(mask_px=1)).rasters["labels"]
    dilated = perturb(tiny_bundle, NoiseSpec(mask_px=-1)).rasters["labels"]
    assert (eroded > 0).sum() < (lab > 0).sum() < (dilated > 0).sum()
    dropped = perturb(tiny_bundle, NoiseSpec(flow_fwd_drop=0.2)).rasters["flow_fwd"]
    frac = np.mean(~np.isfinite(dropped[..., 0]))
    assert frac == pytest.approx(0.2, abs=1.0 / 32)


def test_written_bundle_loads_back(tiny_bundle, tmp_path):
    m = tiny_bundle.write(tmp_path / "scene")
    scene = load_manifest(m)
    assert np.allclose(scene.d0, tiny_bundle.rasters["d0"], rtol=1e-6)
    assert scene.oracle.ratio == tiny_bundle.oracle.ratio
    assert isinstance(scene.oracle.t_cam, SE3Transform)
