import json
import struct

import numpy as np
import pytest

from rigidsplat.errors import CorruptHeader, DimensionMismatch, MalformedManifest, MissingFile, UnsupportedFormat
from rigidsplat.geometry import CameraIntrinsics, SE3Transform, se3_exp
from rigidsplat.tensorio import (Oracle, load_manifest, read_flow, read_image, read_labels,
                                 read_pfm, read_scalar, relabel_contiguous, write_flow,
                                 write_image, write_labels, write_manifest, write_pfm,
                                 write_scalar)

K16 = CameraIntrinsics(20.0, 20.0, 7.5, 7.5, 16, 16)


def rasters(rng, h=16, w=16, labels=None):
    lab = np.zeros((h, w), dtype=np.int64) if labels is None else labels
    return {"i0": rng.uniform(0, 1, (h, w, 3)), "i1": rng.uniform(0, 1, (h, w, 3)),
            "d0": rng.uniform(1, 5, (h, w)), "d1": rng.uniform(1, 5, (h, w)),
            "flow_fwd": rng.normal(size=(h, w, 2)), "flow_bwd": rng.normal(size=(h, w, 2)),
            "labels": lab}


def test_scalar_round_trip_is_bit_identical(tmp_path, rng):
    d = rng.normal(size=(16, 16)).astype(np.float32)
    d[3, 4] = np.nan
    write_scalar(tmp_path / "d.pfm", d)
    back = read_scalar(tmp_path / "d.pfm")
    assert np.array_equal(back, d, equal_nan=True)


def test_pfm_is_bottom_up_little_endian(tmp_path):
    d = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    write_pfm(tmp_path / "d.pfm", d)
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1")
    payload = np.frombuffer(raw[-16:], dtype="<f4")
    assert list(payload) == [3.0, 4.0, 1.0, 2.0]
    assert np.array_equal(read_pfm(tmp_path / "d.pfm"), d)


def test_flow_round_trip_and_layout(tmp_path, rng):
    f = rng.normal(size=(5, 7, 2)).astype(np.float32)
    write_flow(tmp_path / "f.flo", f)
    raw = (tmp_path / "f.flo").read_bytes()
    assert struct.unpack("<fii", raw[:12]) == (202021.25, 7, 5)
    assert np.array_equal(read_flow(tmp_path / "f.flo"), f)


def test_flow_header_payload_mismatch(tmp_path, rng):
    write_flow(tmp_path / "f.flo", rng.normal(size=(4, 4, 2)))
    raw = bytearray((tmp_path / "f.flo").read_bytes())
    raw[4:8] = struct.pack("<i", 5)
    (tmp_path / "f.flo").write_bytes(bytes(raw))
    with pytest.raises(CorruptHeader):
        read_flow(tmp_path / "f.flo")


def test_bad_flow_magic(tmp_path):
    (tmp_path / "f.flo").write_bytes(struct.pack("<fii", 1.0, 1, 1) + bytes(8))
    with pytest.raises(CorruptHeader):
        read_flow(tmp_path / "f.flo")


def test_labels_round_trip_16bit(tmp_path, rng):
    lab = rng.integers(0, 65536, size=(9, 11))
    write_labels(tmp_path / "l.pgm", lab)
    raw = (tmp_path / "l.pgm").read_bytes()
    assert raw.startswith(b"P5")
    assert np.array_equal(read_labels(tmp_path / "l.pgm"), lab)


def test_png_quantization_bound(tmp_path, rng):
    img = rng.uniform(0, 1, (8, 8, 3))
    write_image(tmp_path / "i.png", img)
    assert np.max(np.abs(read_image(tmp_path / "i.png") - img)) <= 1 / 255 + 1e-12


def test_image_pfm_is_lossless_and_clamped(tmp_path, rng):
    img = rng.uniform(-0.5, 1.5, (6, 5, 3)).astype(np.float32)
    write_image(tmp_path / "i.pfm", img)
    assert np.array_equal(read_image(tmp_path / "i.pfm"), np.clip(img, 0, 1))


@pytest.mark.parametrize("fn,name", [(write_scalar, "x.png"), (write_flow, "x.pfm"),
                                     (write_labels, "x.png"), (write_image, "x.jpg")])
def test_unsupported_extensions(tmp_path, fn, name):
    with pytest.raises(UnsupportedFormat):
        fn(tmp_path / name, np.zeros((2, 2, 3)))


def test_relabel_contiguous():
    lab = np.array([[0, 2], [2, 7]])
    new, mapping = relabel_contiguous(lab)
    assert mapping == {0: 0, 2: 1, 7: 2}
    assert np.array_equal(new, [[0, 1], [1, 2]])


def test_manifest_round_trip(tmp_path, rng):
    T = se3_exp([0.1, 0, 0, 0, 0.05, 0])
    oracle = Oracle(T, {1: SE3Transform(translation=[1, 0, 0])}, 0.3, T, 10.0)
    lab = np.zeros((16, 16), dtype=np.int64)
    lab[4:8, 4:8] = 1
    m = write_manifest(tmp_path, K16, rasters(rng, labels=lab), i_test=rng.uniform(0, 1, (16, 16, 3)),
                       oracle=oracle)
    scene = load_manifest(m)
    assert scene.intrinsics == K16
    assert scene.dynamic_regions == [1]
    assert scene.i_test.shape == (16, 16, 3)
    assert scene.oracle.ratio == 0.3
    assert np.allclose(scene.oracle.t_cam.rotation, T.rotation)


def test_manifest_relabels_sparse_ids(tmp_path, rng):
    lab = np.zeros((16, 16), dtype=np.int64)
    lab[:, 8:] = 2
    scene = load_manifest(write_manifest(tmp_path, K16, rasters(rng, labels=lab)))
    assert scene.region_ids == [0, 1]
    assert scene.label_mapping == {0: 0, 2: 1}


def test_manifest_dimension_mismatch_names_entry(tmp_path, rng):
    r = rasters(rng)
    r["d0"] = rng.uniform(1, 2, (8, 8))
    with pytest.raises(DimensionMismatch, match="d0"):
        load_manifest(write_manifest(tmp_path, K16, r))


def test_manifest_missing_file_names_entry(tmp_path, rng):
    m = write_manifest(tmp_path, K16, rasters(rng))
    (tmp_path / "flow_bwd.flo").unlink()
    with pytest.raises(MissingFile, match="flow_bwd"):
        load_manifest(m)
    doc = json.loads(m.read_text())
    del doc["frames"]["flow_bwd"]
    m.write_text(json.dumps(doc))
    scene = load_manifest(m, require=("i0", "i1", "d0", "d1", "flow_fwd", "labels"))
    assert scene.flow_bwd is None


def test_manifest_missing_key_and_bad_json(tmp_path, rng):
    m = write_manifest(tmp_path, K16, rasters(rng))
    doc = json.loads(m.read_text())
    del doc["frames"]["flow_fwd"]
    m.write_text(json.dumps(doc))
    with pytest.raises(MissingFile, match="flow_fwd"):
        load_manifest(m)
    m.write_text("{not json")
    with pytest.raises(MalformedManifest):
        load_manifest(m)
    m.write_text(json.dumps({"frames": {}}))
    with pytest.raises(MalformedManifest, match="intrinsics"):
        load_manifest(m)


def test_manifest_loading_is_deterministic(tmp_path, rng):
    m = write_manifest(tmp_path, K16, rasters(rng))
    a, b = load_manifest(m), load_manifest(m)
    for k in ("i0", "d0", "flow_fwd", "labels"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
