"""Raster file formats and the scene manifest.

Rasters are plain numpy arrays:

* ScalarMap  ``(H, W)`` float64, NaN marks invalid pixels
* FlowMap    ``(H, W, 2)`` float64, ``(du, dv)`` per pixel
* LabelMap   ``(H, W)`` int64, 0 is the static background
* RgbImage   ``(H, W, 3)`` float64 in [0, 1]

Formats: PFM (``Pf`` / ``PF``, little-endian, bottom-up rows), Middlebury
``.flo``, 16-bit binary PGM and 8-bit PNG.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CorruptHeader, DimensionMismatch, MalformedManifest, MissingFile,
                     UnsupportedFormat)
from .geometry import CameraIntrinsics, SE3Transform

FLO_MAGIC = 202021.25


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise UnsupportedFormat(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    payload = np.ascontiguousarray(np.flipud(data).astype("<f4"))
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(payload.tobytes())


def _read_token_line(f) -> bytes:
    line = f.readline()
    while line.startswith(b"#"):
        line = f.readline()
    return line.strip()


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = _read_token_line(f)
        if tag not in (b"Pf", b"PF"):
            raise CorruptHeader(f"{path}: not a PFM file (tag {tag!r})")
        try:
            w, h = (int(x) for x in _read_token_line(f).split())
            scale = float(_read_token_line(f))
        except ValueError as exc:
            raise CorruptHeader(f"{path}: bad PFM header") from exc
        channels = 1 if tag == b"Pf" else 3
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read()
    expected = w * h * channels * 4
    if w <= 0 or h <= 0 or len(raw) != expected:
        raise CorruptHeader(f"{path}: header says {w}x{h}x{channels} but payload has {len(raw)} bytes")
    arr = np.frombuffer(raw, dtype=dtype).reshape((h, w) if channels == 1 else (h, w, 3))
    return np.flipud(arr).astype(np.float64)


# ---------------------------------------------------------------------------
# .flo
# ---------------------------------------------------------------------------

def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise UnsupportedFormat(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(np.ascontiguousarray(flow.astype("<f4")).tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(12)
        raw = f.read()
    if len(header) < 12:
        raise CorruptHeader(f"{path}: truncated .flo header")
    magic, w, h = struct.unpack("<fii", header)
    if magic != FLO_MAGIC:
        raise CorruptHeader(f"{path}: bad .flo magic {magic}")
    if w <= 0 or h <= 0 or len(raw) != w * h * 2 * 4:
        raise CorruptHeader(f"{path}: header says {w}x{h} but payload has {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, 2).astype(np.float64)


# ---------------------------------------------------------------------------
# PGM (16-bit labels)
# ---------------------------------------------------------------------------

def write_pgm16(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise UnsupportedFormat("labels must be a 2D array of values in [0, 65535]")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(np.ascontiguousarray(labels.astype(">u2")).tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptHeader(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise CorruptHeader(f"{path}: not a binary PGM")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise CorruptHeader(f"{path}: bad PGM header") from exc
    nbytes = 2 if maxval > 255 else 1
    payload = data[pos:]
    if len(payload) != w * h * nbytes:
        raise CorruptHeader(f"{path}: header says {w}x{h} but payload has {len(payload)} bytes")
    dtype = ">u2" if nbytes == 2 else "u1"
    return np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(np.int64)


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


# ---------------------------------------------------------------------------
# dispatch by extension
# ---------------------------------------------------------------------------

def _ext(path) -> str:
    return Path(path).suffix.lower()


def read_scalar(path) -> np.ndarray:
    if _ext(path) != ".pfm":
        raise UnsupportedFormat(f"{path}: scalar maps are stored as .pfm")
    arr = read_pfm(path)
    if arr.ndim != 2:
        raise UnsupportedFormat(f"{path}: expected single-channel PFM")
    return arr


def write_scalar(path, data) -> None:
    if _ext(path) != ".pfm":
        raise UnsupportedFormat(f"{path}: scalar maps are stored as .pfm")
    write_pfm(path, np.asarray(data, dtype=np.float64))


def read_flow(path) -> np.ndarray:
    if _ext(path) != ".flo":
        raise UnsupportedFormat(f"{path}: flow maps are stored as .flo")
    return read_flo(path)


def write_flow(path, flow) -> None:
    if _ext(path) != ".flo":
        raise UnsupportedFormat(f"{path}: flow maps are stored as .flo")
    write_flo(path, flow)


def read_labels(path) -> np.ndarray:
    if _ext(path) not in (".pgm", ".pnm"):
        raise UnsupportedFormat(f"{path}: label maps are stored as 16-bit .pgm")
    return read_pgm16(path)


def write_labels(path, labels) -> None:
    if _ext(path) not in (".pgm", ".pnm"):
        raise UnsupportedFormat(f"{path}: label maps are stored as 16-bit .pgm")
    write_pgm16(path, labels)


def read_image(path) -> np.ndarray:
    ext = _ext(path)
    if ext == ".png":
        img = read_png(path)
    elif ext == ".pfm":
        img = read_pfm(path)
        if img.ndim != 3:
            raise UnsupportedFormat(f"{path}: expected 3-channel PFM")
    else:
        raise UnsupportedFormat(f"{path}: images are .png or .pfm")
    return np.clip(img, 0.0, 1.0)


def write_image(path, img) -> None:
    ext = _ext(path)
    if ext == ".png":
        write_png(path, img)
    elif ext == ".pfm":
        write_pfm(path, np.asarray(img, dtype=np.float64))
    else:
        raise UnsupportedFormat(f"{path}: images are .png or .pfm")


def relabel_contiguous(labels: np.ndarray) -> tuple[np.ndarray, dict[int, int]]:
    """Map label values onto ``0..n`` preserving order; 0 stays 0 when present."""
    values = np.unique(labels)
    offset = 0 if values.size and values[0] == 0 else 1
    mapping = {int(v): i + offset for i, v in enumerate(values)}
    return (np.searchsorted(values, labels) + offset).astype(np.int64), mapping


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

FRAME_KEYS = ("i0", "i1", "d0", "d1", "flow_fwd", "flow_bwd", "labels")
OPTIONAL_FRAME_KEYS = ("labels1",)


@dataclass
class Oracle:
    t_cam: SE3Transform
    t_obj: dict[int, SE3Transform]
    ratio: float
    t_mid: SE3Transform | None = None
    scene_diameter: float | None = None

    def to_dict(self) -> dict:
        out = {
            "t_cam": self.t_cam.to_dict(),
            "t_obj": [dict(region=int(k), **v.to_dict()) for k, v in sorted(self.t_obj.items())],
            "ratio": float(self.ratio),
        }
        if self.t_mid is not None:
            out["t_mid"] = self.t_mid.to_dict()
        if self.scene_diameter is not None:
            out["scene_diameter"] = float(self.scene_diameter)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Oracle":
        t_obj = {}
        for i, entry in enumerate(d.get("t_obj", [])):
            t_obj[int(entry.get("region", i + 1))] = SE3Transform.from_dict(entry)
        t_mid = SE3Transform.from_dict(d["t_mid"]) if "t_mid" in d else None
        return cls(SE3Transform.from_dict(d["t_cam"]), t_obj, float(d.get("ratio", 0.5)),
                   t_mid, d.get("scene_diameter"))


@dataclass
class Scene:
    """A loaded, cross-validated two-view problem."""

    intrinsics: CameraIntrinsics
    i0: np.ndarray
    i1: np.ndarray
    d0: np.ndarray
    d1: np.ndarray
    flow_fwd: np.ndarray | None
    flow_bwd: np.ndarray | None
    labels: np.ndarray
    labels1: np.ndarray | None = None
    i_test: np.ndarray | None = None
    oracle: Oracle | None = None
    label_mapping: dict[int, int] = field(default_factory=dict)
    paths: dict[str, str] = field(default_factory=dict)

    @property
    def region_ids(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels)]

    @property
    def dynamic_regions(self) -> list[int]:
        return [r for r in self.region_ids if r != 0]


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise MalformedManifest(f"manifest is missing '{where}{key}'")
    return d[key]


def load_manifest(path, require: tuple[str, ...] = FRAME_KEYS) -> Scene:
    """Load a manifest and every raster it references.

    ``require`` lists the frame keys that must be present; ``flow_bwd`` may be
    dropped by forward-only callers.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"manifest {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise MalformedManifest(f"{path}: top level must be an object")
    try:
        K = CameraIntrinsics.from_dict(_require(doc, "intrinsics", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedManifest(f"intrinsics: {exc}") from exc
    frames = _require(doc, "frames", "")
    base = path.parent

    def resolve(key: str, section: dict, prefix: str) -> Path | None:
        if key not in section:
            if key in require:
                raise MissingFile(f"manifest entry '{prefix}{key}' is missing")
            return None
        p = base / section[key]
        if not p.exists():
            raise MissingFile(f"'{prefix}{key}' -> {p} does not exist")
        return p

    readers = {"i0": read_image, "i1": read_image, "d0": read_scalar, "d1": read_scalar,
               "flow_fwd": read_flow, "flow_bwd": read_flow, "labels": read_labels,
               "labels1": read_labels}
    loaded: dict[str, np.ndarray | None] = {}
    paths: dict[str, str] = {}
    for key in FRAME_KEYS + OPTIONAL_FRAME_KEYS:
        p = resolve(key, frames, "frames.")
        loaded[key] = readers[key](p) if p is not None else None
        if p is not None:
            paths[key] = str(p)
    i_test = None
    if "eval" in doc and "i_test" in doc["eval"]:
        p = resolve("i_test", doc["eval"], "eval.")
        i_test = read_image(p)
        paths["i_test"] = str(p)
    for key, arr in list(loaded.items()) + [("i_test", i_test)]:
        if arr is not None and arr.shape[:2] != (K.height, K.width):
            raise DimensionMismatch(
                f"'{key}' is {arr.shape[1]}x{arr.shape[0]} but intrinsics say {K.width}x{K.height}")
    if loaded["d0"] is None or loaded["d1"] is None or loaded["labels"] is None:
        raise MissingFile("depth maps and labels are required")
    labels, mapping = relabel_contiguous(loaded["labels"])
    labels1 = None
    if loaded["labels1"] is not None:
        vals = np.unique(loaded["labels1"])
        unknown = [int(v) for v in vals if int(v) not in mapping]
        if unknown:
            raise MalformedManifest(f"labels1 uses ids {unknown} absent from frame-0 labels")
        keys = np.asarray(sorted(mapping))
        mapped = np.asarray([mapping[int(k)] for k in keys])
        labels1 = mapped[np.searchsorted(keys, loaded["labels1"])].astype(np.int64)
    oracle = Oracle.from_dict(doc["oracle"]) if "oracle" in doc else None
    if oracle is not None and mapping and any(k != v for k, v in mapping.items()):
        oracle.t_obj = {mapping[k]: v for k, v in oracle.t_obj.items() if k in mapping}
    return Scene(K, loaded["i0"], loaded["i1"], loaded["d0"], loaded["d1"], loaded["flow_fwd"],
                 loaded["flow_bwd"], labels, labels1, i_test, oracle, mapping, paths)


def write_manifest(directory, K: CameraIntrinsics, rasters: dict[str, np.ndarray],
                   i_test: np.ndarray | None = None, oracle: Oracle | None = None,
                   extra: dict | None = None, name: str = "manifest.json") -> Path:
    """Write rasters with canonical file names plus a manifest referencing them."""
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    names = {"i0": "i0.png", "i1": "i1.png", "d0": "d0.pfm", "d1": "d1.pfm",
             "flow_fwd": "flow_fwd.flo", "flow_bwd": "flow_bwd.flo",
             "labels": "labels0.pgm", "labels1": "labels1.pgm"}
    writers = {"i0": write_image, "i1": write_image, "d0": write_scalar, "d1": write_scalar,
               "flow_fwd": write_flow, "flow_bwd": write_flow, "labels": write_labels,
               "labels1": write_labels}
    frames = {}
    for key, arr in rasters.items():
        fname = names[key]
        writers[key](directory / fname, arr)
        frames[key] = fname
    doc: dict = {"intrinsics": K.to_dict(), "frames": frames}
    if i_test is not None:
        write_image(directory / "i_test.png", i_test)
        doc["eval"] = {"i_test": "i_test.png"}
    if oracle is not None:
        doc["oracle"] = oracle.to_dict()
    if extra:
        doc.update(extra)
    out = directory / name
    out.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return out
