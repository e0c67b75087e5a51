"""Command-line driver: one subcommand per stage, plus ``pipeline`` chaining them all.

Every subcommand reads and writes files only, so ``pipeline`` is exactly the
chain of the individual stages.  Errors are printed to stderr as one JSON
object and the process exits with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .correspondence import ConsistencyParams
from .dense_ba import BAParams
from .errors import MalformedManifest, MissingFile, RigidSplatError
from .geometry import SE3Transform, pose_errors, se3_interpolate
from .init_pnp import RansacParams
from .pipeline import (TAG_RANSAC, TAG_TRAIN, StageTimer, ba_errors, build_model,
                       estimate_motions, load_ba, save_ba, stage_seed)
from . import se3field
from .splat.losses import metrics
from .splat.raster import RenderConfig
from .synthgen import NoiseSpec, SynthConfig, generate
from .tensorio import FRAME_KEYS, Scene, load_manifest, read_image, write_image

log = logging.getLogger("rigidsplat")

SECTIONS = ("synth", "ba", "ransac", "consistency", "train", "align", "render", "model")
_SECTION_TYPES = {"synth": SynthConfig, "ba": BAParams, "ransac": RansacParams,
                  "consistency": ConsistencyParams, "train": se3field.TrainConfig,
                  "align": se3field.AlignConfig, "render": RenderConfig}
_MODEL_KEYS = {"stride"}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _build(cls, section: dict, name: str, **extra):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise MalformedManifest(f"config section '{name}' has unknown keys {unknown}")
    return cls(**{**section, **extra})


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"config {path} does not exist")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise MalformedManifest(f"{path}: top level must be an object")
    unknown = sorted(set(cfg) - set(SECTIONS) - {"seed", "name"})
    if unknown:
        raise MalformedManifest(f"{path}: unknown sections {unknown}")
    # catch typos in every section, not only the ones the current stage reads
    for name in SECTIONS:
        sec = cfg.get(name, {})
        if not isinstance(sec, dict):
            raise MalformedManifest(f"{path}: section '{name}' must be an object")
        known = _MODEL_KEYS if name == "model" else {f.name for f in fields(_SECTION_TYPES[name])}
        bad = sorted(set(sec) - known)
        if bad:
            raise MalformedManifest(f"{path}: section '{name}' has unknown keys {bad}")
    return cfg


def render_config(cfg: dict) -> RenderConfig:
    sec = dict(cfg.get("render", {}))
    if "background" in sec:
        sec["background"] = tuple(sec["background"])
    return _build(RenderConfig, sec, "render")


def synth_config(cfg: dict, seed: int) -> SynthConfig:
    sec = dict(cfg.get("synth", {}))
    if "noise" in sec:
        sec["noise"] = _build(NoiseSpec, sec["noise"], "synth.noise")
    if "bg_center" in sec:
        sec["bg_center"] = tuple(sec["bg_center"])
    sec["seed"] = seed
    return _build(SynthConfig, sec, "synth")


def ba_params(cfg: dict, args) -> BAParams:
    sec = dict(cfg.get("ba", {}))
    if getattr(args, "bidirectional", None) is not None:
        sec["bidirectional"] = args.bidirectional
    if getattr(args, "iters", None) is not None:
        sec["iters"] = args.iters
    return _build(BAParams, sec, "ba")


def train_config(cfg: dict, args, seed: int) -> se3field.TrainConfig:
    sec = dict(cfg.get("train", {}))
    if getattr(args, "iters", None) is not None:
        sec["iters"] = args.iters
    return _build(se3field.TrainConfig, sec, "train", render=render_config(cfg),
                  seed=stage_seed(seed, TAG_TRAIN))


def align_config(cfg: dict, args) -> se3field.AlignConfig:
    sec = dict(cfg.get("align", {}))
    if getattr(args, "iters", None) is not None:
        sec["iters"] = args.iters
    if getattr(args, "no_ratio_align", False):
        sec["optimize_ratios"] = False
    return _build(se3field.AlignConfig, sec, "align", render=render_config(cfg))


def _seed(args, cfg) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_pose(path) -> SE3Transform:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"pose file {path} does not exist")
    doc = json.loads(path.read_text())
    for key in ("t_cam_test", "pose", "t_mid"):
        if key in doc:
            doc = doc[key]
            break
    try:
        return SE3Transform.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedManifest(f"{path}: not a pose ({exc})") from exc


def _float(x):
    return float(np.asarray(x))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> dict:
    cfg = load_config(args.config)
    sc = synth_config(cfg, _seed(args, cfg))
    bundle = generate(sc)
    manifest = bundle.write(args.out)
    log.info("wrote %s", manifest)
    return {"manifest": str(manifest)}


def cmd_ba(args) -> dict:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    params = ba_params(cfg, args)
    require = FRAME_KEYS if params.bidirectional else tuple(k for k in FRAME_KEYS if k != "flow_bwd")
    scene = load_manifest(args.manifest, require=require)
    ransac = _build(RansacParams, dict(cfg.get("ransac", {})), "ransac",
                    seed=stage_seed(seed, TAG_RANSAC))
    consistency = _build(ConsistencyParams, dict(cfg.get("consistency", {})), "consistency")
    ba = estimate_motions(scene, params, ransac, consistency)
    save_ba(args.out, ba)
    return {"ba": str(args.out), "errors": ba_errors(ba, scene)}


def cmd_train(args) -> dict:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    scene = load_manifest(args.manifest, require=FRAME_KEYS[:5] + ("labels",))
    ba = load_ba(args.ba)
    stride = int(args.stride if args.stride is not None else cfg.get("model", {}).get("stride", 1))
    consistency = _build(ConsistencyParams, dict(cfg.get("consistency", {})), "consistency")
    gaussians, fld = build_model(scene, ba, stride, se3_init=not args.no_se3_init,
                                 consistency=consistency)
    tc = train_config(cfg, args, seed)
    res = se3field.train(gaussians, fld, ba.t_cam, scene.i0, scene.i1, scene.intrinsics, tc)
    meta = {"train": tc.to_dict(), "history": res.history, "se3_init": not args.no_se3_init,
            "stride": stride}
    save_checkpoint(args.out, Checkpoint(res.gaussians, res.field, res.t_cam, scene.intrinsics,
                                         meta))
    return {"checkpoint": str(args.out), "gaussians": len(res.gaussians), "final": res.final}


def _render(ck: Checkpoint, pose: SE3Transform, ratio, cfg: RenderConfig) -> np.ndarray:
    return se3field.render_at(ck.gaussians, ck.field, pose, ck.K, ratio, cfg).image


def cmd_render(args) -> dict:
    cfg = load_config(args.config)
    ck = load_checkpoint(args.checkpoint)
    target = None
    if args.pose is not None:
        pose = _read_pose(args.pose)
    elif args.manifest is not None:
        scene = load_manifest(args.manifest)
        if scene.oracle is None or scene.oracle.t_mid is None:
            raise MalformedManifest("manifest has no oracle mid-frame pose; pass --pose")
        pose = scene.oracle.t_mid
        target = scene.i_test
    elif args.ratio == 0.0:
        pose = SE3Transform.identity()
    elif args.ratio == 1.0:
        pose = ck.t_cam
    else:
        pose = se3_interpolate(ck.t_cam, args.ratio)
    img = _render(ck, pose, args.ratio, render_config(cfg))
    write_image(args.out, img)
    out = {"image": str(args.out), "ratio": args.ratio}
    if args.target is not None:
        target = read_image(args.target)
    if target is not None:
        out["metrics"] = metrics(img, target)
    return out


def cmd_align(args) -> dict:
    cfg = load_config(args.config)
    ck = load_checkpoint(args.checkpoint)
    image = read_image(args.image)
    init = _read_pose(args.init_pose) if args.init_pose else se3_interpolate(ck.t_cam, 0.5)
    ac = align_config(cfg, args)
    res = se3field.test_time_align(ck.gaussians, ck.field, image, ck.K, init, ac)
    doc = res.to_dict()
    doc["ratio_align"] = ac.optimize_ratios
    if args.render_out:
        write_image(args.render_out, _render(ck, res.t_cam_test, res.ratios, ac.render))
    _write_json(args.out, doc)
    return {"align": str(args.out), "ratios": doc["ratios"], "final_loss": res.final_loss}


def cmd_eval(args) -> dict:
    out = {}
    if args.rendered is not None:
        if args.target is None:
            raise MissingFile("--rendered needs --target")
        out["image"] = metrics(read_image(args.rendered), read_image(args.target))
    if args.checkpoint is not None:
        if args.manifest is None:
            raise MissingFile("--checkpoint needs --manifest")
        cfg = load_config(args.config)
        rc = render_config(cfg)
        ck = load_checkpoint(args.checkpoint)
        scene = load_manifest(args.manifest)
        out.update(evaluate_model(ck, scene, rc, args.align))
    if args.out:
        _write_json(args.out, out)
    return out


def evaluate_model(ck: Checkpoint, scene: Scene, rc: RenderConfig, align_path=None) -> dict:
    out = {"frame0": metrics(_render(ck, SE3Transform.identity(), 0.0, rc), scene.i0),
           "frame1": metrics(_render(ck, ck.t_cam, 1.0, rc), scene.i1)}
    o = scene.oracle
    if o is not None:
        rot, trans = pose_errors(ck.t_cam, o.t_cam)
        out["t_cam_error"] = {"rot_deg": _float(rot), "trans": _float(trans)}
    if align_path is not None and scene.i_test is not None:
        doc = json.loads(Path(align_path).read_text())
        pose = SE3Transform.from_dict(doc["t_cam_test"])
        ratios = {int(k): float(v) for k, v in doc["ratios"].items()}
        test = {"metrics": metrics(_render(ck, pose, ratios, rc), scene.i_test),
                "ratios": {str(k): v for k, v in sorted(ratios.items())}}
        if o is not None:
            test["ratio_error"] = {str(k): abs(v - o.ratio) for k, v in sorted(ratios.items())}
            if o.t_mid is not None:
                rot, trans = pose_errors(pose, o.t_mid)
                test["pose_error"] = {"rot_deg": _float(rot), "trans": _float(trans)}
        out["test"] = test
    return out


def cmd_pipeline(args) -> dict:
    """synth (when the config has a synth section) -> ba -> train -> align -> render -> eval."""
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timer = StageTimer()
    ns = argparse.Namespace
    common = {"config": args.config, "seed": seed}
    if args.manifest is not None:
        manifest = Path(args.manifest)
    else:
        timer.run("synth", lambda: cmd_synth(ns(out=out / "bundle", **common)))
        manifest = out / "bundle" / "manifest.json"
    ba_out = timer.run("ba", lambda: cmd_ba(ns(manifest=manifest, out=out / "ba.json",
                                                bidirectional=args.bidirectional, iters=None,
                                                **common)))
    timer.run("train", lambda: cmd_train(ns(manifest=manifest, ba=out / "ba.json",
                                            out=out / "model.ckpt", stride=None, iters=None,
                                            no_se3_init=args.no_se3_init, **common)))
    scene = load_manifest(manifest, require=())
    align_path = None
    if scene.i_test is not None:
        timer.run("align", lambda: cmd_align(ns(
            checkpoint=out / "model.ckpt", image=Path(scene.paths["i_test"]), init_pose=None,
            out=out / "align.json", render_out=out / "render_test.png", iters=None,
            no_ratio_align=args.no_ratio_align, **common)))
        align_path = out / "align.json"
    ev = timer.run("eval", lambda: cmd_eval(ns(
        rendered=None, target=None, checkpoint=out / "model.ckpt", manifest=manifest,
        align=align_path, out=None, **common)))
    ck = load_checkpoint(out / "model.ckpt")
    rc = render_config(cfg)
    write_image(out / "render_frame0.png", _render(ck, SE3Transform.identity(), 0.0, rc))
    write_image(out / "render_frame1.png", _render(ck, ck.t_cam, 1.0, rc))
    ba_doc = json.loads((out / "ba.json").read_text())
    report = {
        "seed": seed,
        "flags": {"no_se3_init": args.no_se3_init, "no_ratio_align": args.no_ratio_align,
                  "bidirectional": args.bidirectional},
        "config": cfg,
        "ba": {"initial_losses": ba_doc["initial_losses"], "final_losses": ba_doc["final_losses"],
               "init_stats": ba_doc["init_stats"], "pose_errors": ba_out["errors"]},
        "train": {"history": ck.meta.get("history", []), "gaussians": len(ck.gaussians)},
        "eval": ev,
    }
    _write_json(out / "report.json", report)
    _write_json(out / "timings.json", timer.timings)
    return {"report": str(out / "report.json"), "eval": ev}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rigidsplat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="JSON config with per-stage sections")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.set_defaults(func=fn, stage=name)
        return sp

    sp = add("synth", cmd_synth, "generate an oracle scene bundle")
    sp.add_argument("--out", type=Path, required=True)

    sp = add("ba", cmd_ba, "PnP initialization + object-level dense BA")
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--iters", type=int)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--bidirectional", dest="bidirectional", action="store_true", default=None)
    g.add_argument("--forward-only", dest="bidirectional", action="store_false")

    sp = add("train", cmd_train, "fit Gaussians, motion field and camera")
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--ba", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--no-se3-init", action="store_true",
                    help="start every motion at identity instead of the BA object motion")

    sp = add("render", cmd_render, "render a checkpoint at a pose and ratio")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--ratio", type=float, default=0.5)
    sp.add_argument("--pose", type=Path, help="JSON pose {rotation, translation}")
    sp.add_argument("--manifest", type=Path, help="use the oracle mid-frame pose and image")
    sp.add_argument("--target", type=Path, help="image to report metrics against")

    sp = add("align", cmd_align, "test-time camera and ratio alignment")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--image", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--init-pose", type=Path)
    sp.add_argument("--render-out", type=Path)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--no-ratio-align", action="store_true", help="keep every ratio at 0.5")

    sp = add("eval", cmd_eval, "image metrics for renders or a checkpoint")
    sp.add_argument("--rendered", type=Path)
    sp.add_argument("--target", type=Path)
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--manifest", type=Path)
    sp.add_argument("--align", type=Path, help="alignment JSON for test-view metrics")
    sp.add_argument("--out", type=Path)

    sp = add("pipeline", cmd_pipeline, "run every stage with one seed")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--manifest", type=Path, help="use an existing bundle instead of synth")
    sp.add_argument("--no-se3-init", action="store_true",
                    help="start every motion at identity instead of the BA object motion")
    sp.add_argument("--no-ratio-align", action="store_true", help="keep every ratio at 0.5")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--bidirectional", dest="bidirectional", action="store_true", default=None)
    g.add_argument("--forward-only", dest="bidirectional", action="store_false")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = args.func(args)
    except RigidSplatError as exc:
        if exc.stage is None:
            exc.stage = args.stage
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "stage": args.stage,
                          "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
