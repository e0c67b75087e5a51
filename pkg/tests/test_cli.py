import json
from importlib import resources

import pytest

from rigidsplat.cli import main

TINY = resources.files("rigidsplat") / "configs" / "oracle_tiny.json"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    assert main(["pipeline", "--config", str(TINY), "--out", str(out)]) == 0
    return out


def test_pipeline_writes_every_artifact(pipeline_dir):
    for name in ("bundle/manifest.json", "ba.json", "ba_depth0.pfm", "ba_depth1.pfm",
                 "model.ckpt", "align.json", "render_test.png", "render_frame0.png",
                 "render_frame1.png", "report.json", "timings.json"):
        assert (pipeline_dir / name).exists(), name
    report = json.loads((pipeline_dir / "report.json").read_text())
    assert set(report) >= {"seed", "flags", "config", "ba", "train", "eval"}
    assert "timings" not in json.dumps(report)


def test_pipeline_equals_chained_subcommands(pipeline_dir, tmp_path, capsys):
    t = tmp_path
    assert run(capsys, "synth", "--config", TINY, "--out", t / "bundle")[0] == 0
    m = t / "bundle" / "manifest.json"
    assert run(capsys, "ba", "--config", TINY, "--manifest", m, "--out", t / "ba.json")[0] == 0
    assert run(capsys, "train", "--config", TINY, "--manifest", m, "--ba", t / "ba.json",
               "--out", t / "model.ckpt")[0] == 0
    assert run(capsys, "align", "--config", TINY, "--checkpoint", t / "model.ckpt",
               "--image", t / "bundle" / "i_test.png", "--out", t / "align.json",
               "--render-out", t / "render_test.png")[0] == 0
    for name in ("ba.json", "model.ckpt", "align.json", "render_test.png"):
        assert (t / name).read_bytes() == (pipeline_dir / name).read_bytes(), name


def test_render_and_eval(pipeline_dir, tmp_path, capsys):
    ck = pipeline_dir / "model.ckpt"
    code, out, _ = run(capsys, "render", "--checkpoint", ck, "--ratio", 0.0,
                       "--out", tmp_path / "r0.png", "--target", pipeline_dir / "bundle" / "i0.png")
    assert code == 0 and json.loads(out)["metrics"]["psnr"] > 25
    code, out, _ = run(capsys, "render", "--checkpoint", ck, "--manifest",
                       pipeline_dir / "bundle" / "manifest.json", "--out", tmp_path / "mid.png")
    assert code == 0 and "metrics" in json.loads(out)
    code, out, _ = run(capsys, "eval", "--rendered", tmp_path / "r0.png",
                       "--target", pipeline_dir / "bundle" / "i0.png")
    assert code == 0 and set(json.loads(out)["image"]) == {"psnr", "ssim", "l1"}


def test_missing_backward_flow_is_reported(pipeline_dir, tmp_path, capsys):
    doc = json.loads((pipeline_dir / "bundle" / "manifest.json").read_text())
    bundle = pipeline_dir / "bundle"
    for k, v in doc["frames"].items():
        doc["frames"][k] = str(bundle / v)
    doc["frames"]["flow_bwd"] = str(tmp_path / "gone.flo")
    m = tmp_path / "manifest.json"
    m.write_text(json.dumps(doc))
    code, _, err = run(capsys, "ba", "--config", TINY, "--manifest", m, "--bidirectional",
                       "--out", tmp_path / "ba.json")
    payload = json.loads(err)
    assert code == 1 and payload["error"] == "MissingFile" and payload["stage"] == "ba"
    assert "flow_bwd" in payload["message"]


def test_bad_config_and_checkpoint_errors(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"itres": 3}}))
    code, _, err = run(capsys, "synth", "--config", cfg, "--out", tmp_path / "b")
    assert code == 1 and json.loads(err)["error"] == "MalformedManifest"
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    code, _, err = run(capsys, "render", "--checkpoint", tmp_path / "x.ckpt",
                       "--out", tmp_path / "r.png")
    payload = json.loads(err)
    assert code == 1 and payload["error"] == "CheckpointError" and payload["stage"] == "render"
