import json
import shutil
import subprocess
import sys

import pytest

from taskneurons.cli import EXIT_MISSING, EXIT_OK, EXIT_STALE, EXIT_USAGE, run_command
from taskneurons.engine import ModelConfig, build_model
from taskneurons.weights import save_weights

PIPELINE = ("gen", "plant", "attribute", "intervene", "eval", "report")
FLAGS = ["--source", "planted", "--tasks", "marker_detect", "--n_train", "40", "--n_eval", "40",
         "--n_comprehended", "20", "--n_missed", "5"]


def run_all(out, extra=()):
    return [run_command([cmd, "--out", str(out), *FLAGS, *extra]) for cmd in PIPELINE]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    codes = run_all(root / "a")
    return root, codes


def test_pipeline_succeeds(pipeline):
    root, codes = pipeline
    assert codes == [EXIT_OK] * len(PIPELINE)
    a = root / "a"
    for cmd in PIPELINE:
        m = json.loads((a / "manifests" / f"{cmd}.json").read_text())
        assert m["status"] == "ok" and m["exit_code"] == 0 and m["outputs"]
    summary = json.loads((a / "reports" / "summary.ace.enabled.json").read_text())
    joint = summary["tasks"]["marker_detect"]["best"]["degrade"]["joint"]
    assert joint["rac"] > 0 and joint["acc_status"] == "success"
    sets = json.loads((a / "sets" / "marker_detect.ace.enabled.json").read_text())
    assert sets["model_hash"] and len(sets["good"]) > 0


def test_rerun_is_byte_identical(pipeline):
    root, _ = pipeline
    assert run_all(root / "b") == [EXIT_OK] * len(PIPELINE)
    for sub in ("sets", "plans", "reports", "manifests", "data", "model"):
        for f in sorted((root / "a" / sub).iterdir()):
            assert f.read_bytes() == (root / "b" / sub / f.name).read_bytes(), f"{sub}/{f.name}"


def test_changed_weights_make_downstream_stale(pipeline):
    root, _ = pipeline
    c = root / "c"
    shutil.copytree(root / "a", c)
    # a different planting seed moves the planted neurons, so the weights change
    assert run_command(["plant", "--out", str(c), *FLAGS, "--seed", "1"]) == EXIT_OK
    assert run_command(["eval", "--out", str(c), *FLAGS]) == EXIT_STALE
    m = json.loads((c / "manifests" / "eval.json").read_text())
    assert m["status"] == "error" and "rerun" in m["detail"]
    assert run_command(["intervene", "--out", str(c), *FLAGS]) == EXIT_STALE


def test_edited_sets_make_plans_stale(pipeline, tmp_path):
    root, _ = pipeline
    d = tmp_path / "d"
    shutil.copytree(root / "a", d)
    f = d / "sets" / "marker_detect.ace.enabled.json"
    doc = json.loads(f.read_text())
    doc["good"] = doc["good"][:1]
    f.write_text(json.dumps(doc))
    assert run_command(["eval", "--out", str(d), *FLAGS]) == EXIT_STALE


def test_missing_upstream(tmp_path):
    assert run_command(["attribute", "--out", str(tmp_path / "empty"), *FLAGS]) == EXIT_MISSING
    m = json.loads((tmp_path / "empty" / "manifests" / "attribute.json").read_text())
    assert m["exit_code"] == EXIT_MISSING


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["gen", "--bogus", "1"],
    ["gen", "--K", "many"],
    ["gen", "--source", "planted", "--tasks", "copy_cue"],
    ["train", "--source", "planted"],
])
def test_usage_errors(argv, tmp_path):
    assert run_command([*argv, "--out", str(tmp_path)] if argv else argv) == EXIT_USAGE


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"out = {tmp_path / 'x'}\nsource = planted\ntasks = marker_detect\nn_train = 8\nn_eval = 4\nseed = 5\n")
    assert run_command(["gen", "--config", str(cfg), "--seed", "6"]) == EXIT_OK
    m = json.loads((tmp_path / "x" / "manifests" / "gen.json").read_text())
    assert "seed = 6" in m["config"] and "n_train = 8" in m["config"]


def test_gate_refusal(tmp_path):
    out = tmp_path / "g"
    assert run_command(["gen", "--out", str(out), "--n_train", "8", "--n_eval", "8"]) == EXIT_OK
    vocab = len(json.loads((out / "data" / "tokenizer.json").read_text())["vocab"])
    model = build_model(ModelConfig(2, 16, 2, 16, vocab, 160), seed=0)
    save_weights(model, out / "model" / "weights.tnw", {"gate": {"passed": False, "com": {"marker_detect": 0.1}}})
    assert run_command(["attribute", "--out", str(out)]) == EXIT_USAGE
    detail = json.loads((out / "manifests" / "attribute.json").read_text())["detail"]
    assert "gate" in detail


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "taskneurons.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "attribute" in r.stdout
