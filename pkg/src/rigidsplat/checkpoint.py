"""Versioned binary checkpoint for a trained model.

Layout: 8-byte magic, u32 version, u64 header length, a JSON header (sorted
keys) describing each array, then the raw little-endian array bytes in
header order.  No timestamps or compression, so equal models give equal files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .geometry import CameraIntrinsics, SE3Transform
from .se3field import MotionField
from .splat.gaussians import GaussianSet

MAGIC = b"RSPLATCK"
VERSION = 1

_GAUSS = ("positions", "quats", "log_scales", "logit_opacity", "colors", "region_id")


@dataclass
class Checkpoint:
    gaussians: GaussianSet
    field: MotionField
    t_cam: SE3Transform
    K: CameraIntrinsics
    meta: dict = field(default_factory=dict)


def _arrays(ck: Checkpoint) -> dict[str, np.ndarray]:
    out = {f"gaussians.{k}": getattr(ck.gaussians, k) for k in _GAUSS}
    out["field.rot6"] = ck.field.rot6
    out["field.trans"] = ck.field.trans
    out["field.region_id"] = ck.field.region_id
    out["t_cam.rot6"] = ck.t_cam.rot6
    out["t_cam.translation"] = ck.t_cam.translation
    return out


def save_checkpoint(path, ck: Checkpoint) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in _arrays(ck).items():
        kind = "i8" if np.asarray(arr).dtype.kind in "iu" else "f8"
        data = np.ascontiguousarray(arr, dtype="<" + kind).tobytes()
        entries.append({"name": name, "dtype": kind, "shape": list(np.shape(arr)),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"arrays": entries, "intrinsics": ck.K.to_dict(), "meta": ck.meta},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    if len(raw) < 20:
        raise CheckpointError(f"{path} is truncated")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    body = raw[20 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: array {e['name']} is truncated")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<" + e["dtype"]).reshape(e["shape"]).copy()
    try:
        g = GaussianSet(**{k: arrays[f"gaussians.{k}"] for k in _GAUSS})
        fld = MotionField(arrays["field.rot6"], arrays["field.trans"], arrays["field.region_id"])
        cam = SE3Transform(arrays["t_cam.rot6"], arrays["t_cam.translation"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc}") from exc
    return Checkpoint(g, fld, cam, CameraIntrinsics.from_dict(header["intrinsics"]),
                      header.get("meta", {}))
