import numpy as np
import pytest

from rigidsplat.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from rigidsplat.errors import CheckpointError
from rigidsplat.se3field import init_field


@pytest.fixture
def ck(tiny_bundle):
    g = tiny_bundle.gaussians
    return Checkpoint(g, init_field(g, tiny_bundle.oracle.t_obj), tiny_bundle.oracle.t_cam,
                      tiny_bundle.K, {"note": "x", "history": [{"iter": 0, "total": 1.5}]})


def test_round_trip_is_exact(ck, tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", ck)
    back = load_checkpoint(tmp_path / "m.ckpt")
    for k in ("positions", "quats", "log_scales", "logit_opacity", "colors", "region_id"):
        assert np.array_equal(getattr(back.gaussians, k), getattr(ck.gaussians, k))
        assert getattr(back.gaussians, k).dtype == getattr(ck.gaussians, k).dtype
    assert np.array_equal(back.field.rot6, ck.field.rot6)
    assert np.array_equal(back.t_cam.translation, ck.t_cam.translation)
    assert back.K == ck.K and back.meta == ck.meta


def test_equal_models_give_equal_bytes(ck, tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", ck)
    save_checkpoint(tmp_path / "b.ckpt", ck)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_corrupt_files_raise(ck, tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, ck)
    raw = p.read_bytes()
    bad = tmp_path / "bad.ckpt"
    for blob in (b"NOTACKPT" + raw[8:], raw[:-10], raw[:12], raw[:8] + b"\x09" + raw[9:]):
        bad.write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
