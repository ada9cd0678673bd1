import json
import subprocess
import sys

import numpy as np
import pytest

from msstyle.cli import main
from msstyle.corpus.io import read_feature, read_manifest, write_manifest
from msstyle.evaluation import validate_report

SHORT = {"schedule": {"stage1_steps_per_level": 3, "stage2_steps": 3, "stage3_steps": 4,
                      "batch_size": 4, "warmup_steps": 3}}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "short.json"
    p.write_text(json.dumps(SHORT))
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A prepared and fully (briefly) trained work dir shared by read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "short.json"
    cfg.write_text(json.dumps(SHORT))
    work = root / "work"
    assert run("prepare", "--toy", 16, "--seed", 7, "--work-dir", work, "--config", cfg) == 0
    for stage in (1, 2, 3):
        assert run("train", "--stage", stage, "--work-dir", work) == 0
    return work


def test_prepare_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run("prepare", "--toy", 6, "--seed", 7, "--work-dir", tmp_path / d) == 0
    files = sorted(p.name for p in (tmp_path / "a" / "cache").iterdir())
    assert len(files) == 18
    for name in files:
        assert (tmp_path / "a" / "cache" / name).read_bytes() == (tmp_path / "b" / "cache" / name).read_bytes()


def test_prepare_summary_and_snapshot(tmp_path, capsys):
    assert run("prepare", "--toy", 3, "--seed", 1, "--work-dir", tmp_path) == 0
    assert "prepared 3 utterances" in capsys.readouterr().out
    snap = json.loads((tmp_path / "config.json").read_text())
    assert snap["seed"] == 1 and snap["schedule"]["seed"] == 1 and snap["model"]["d_model"] == 32


def _external_corpus(tmp_path, corrupt: bool):
    src = tmp_path / "src"
    assert run("prepare", "--toy", 5, "--seed", 3, "--work-dir", src) == 0
    manifest = src / "corpus" / "manifest.jsonl"
    if corrupt:
        (src / "corpus" / "align" / "toy-0002.json").write_text("{not json")
    return manifest


def test_prepare_from_manifest(tmp_path):
    manifest = _external_corpus(tmp_path, corrupt=False)
    work = tmp_path / "w"
    assert run("prepare", "--manifest", manifest, "--work-dir", work) == 0
    assert len(list((work / "cache").glob("*.mel.bin"))) == 5


def test_prepare_reports_corrupt_alignment(tmp_path, capsys):
    manifest = _external_corpus(tmp_path, corrupt=True)
    work = tmp_path / "w"
    capsys.readouterr()
    assert run("prepare", "--manifest", manifest, "--work-dir", work) == 4
    assert "toy-0002" in capsys.readouterr().err
    assert len(list((work / "cache").glob("*.mel.bin"))) == 4


def test_prepare_missing_manifest(tmp_path, capsys):
    assert run("prepare", "--manifest", tmp_path / "none.jsonl", "--work-dir", tmp_path / "w") == 3
    assert "none.jsonl" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert run("train", "--stage", 4, "--work-dir", tmp_path) == 2
    assert run("frobnicate") == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lerning_rate": 1}))
    assert run("prepare", "--toy", 2, "--config", bad, "--work-dir", tmp_path / "w") == 2
    assert run("prepare", "--work-dir", tmp_path / "w2") == 2


def test_stage2_needs_stage1(tmp_path, capsys):
    assert run("prepare", "--toy", 4, "--work-dir", tmp_path) == 0
    capsys.readouterr()
    assert run("train", "--stage", 2, "--work-dir", tmp_path) == 3
    assert "stage1.ckpt" in capsys.readouterr().err


def test_pipeline_writes_three_checkpoints(trained):
    for k in (1, 2, 3):
        assert (trained / "train" / f"stage{k}.ckpt").exists()
    lines = (trained / "train" / "metrics.jsonl").read_text().splitlines()
    assert max(json.loads(ln)["step"] for ln in lines) == 3 * 3 + 3 + 4


def test_cli_resume_matches_uninterrupted(tmp_path, cfg_file):
    logs = {}
    for name, interrupt in (("a", False), ("b", True)):
        w = tmp_path / name
        assert run("prepare", "--toy", 16, "--seed", 7, "--work-dir", w, "--config", cfg_file) == 0
        assert run("train", "--stage", 1, "--work-dir", w) == 0
        if interrupt:
            assert run("train", "--stage", 2, "--work-dir", w, "--max-steps", 10) == 0
            assert run("train", "--stage", 2, "--work-dir", w, "--resume") == 0
        else:
            assert run("train", "--stage", 2, "--work-dir", w) == 0
        logs[name] = (w / "train" / "metrics.jsonl").read_bytes()
        logs[name + "ckpt"] = (w / "train" / "stage2.ckpt").read_bytes()
    assert logs["a"] == logs["b"]
    assert logs["ackpt"] == logs["bckpt"]


def test_resume_without_checkpoint(tmp_path):
    assert run("prepare", "--toy", 4, "--work-dir", tmp_path) == 0
    assert run("train", "--stage", 1, "--resume", "--work-dir", tmp_path) == 3


def test_synthesize_outputs(trained):
    ids = ["toy-0001", "toy-0009"]
    assert run("synthesize", "--work-dir", trained, "--ids", *ids) == 0
    first = {i: (trained / "synth" / f"{i}.mel.bin").read_bytes() for i in ids}
    assert run("synthesize", "--work-dir", trained, "--ids", *ids) == 0
    for i in ids:
        assert (trained / "synth" / f"{i}.mel.bin").read_bytes() == first[i]
        mel = read_feature(trained / "synth" / f"{i}.mel.bin")
        assert mel.ndim == 2 and mel.shape[1] == 80


def test_synthesize_unknown_id(trained, capsys):
    assert run("synthesize", "--work-dir", trained, "--ids", "toy-9999") == 3
    assert "toy-9999" in capsys.readouterr().err


def test_synthesize_waveform(trained):
    assert run("synthesize", "--work-dir", trained, "--ids", "toy-0000", "--waveform") == 0
    assert (trained / "synth" / "toy-0000.wav").stat().st_size > 44


def test_future_context_edit_changes_output(trained, tmp_path):
    target = "toy-0005"
    assert run("synthesize", "--work-dir", trained, "--ids", target) == 0
    before = (trained / "synth" / f"{target}.mel.bin").read_bytes()
    manifest = trained / "corpus" / "manifest.jsonl"
    records = read_manifest(manifest)
    original = list(records)
    future = records[6]
    words = future.text.split()
    words[0] = "la" if words[0] != "la" else "ma"
    records[6] = type(future)(future.id, " ".join(words), future.audio_path, future.alignment_path, future.order_index)
    write_manifest(manifest, records)
    try:
        assert run("synthesize", "--work-dir", trained, "--ids", target) == 0
        after = (trained / "synth" / f"{target}.mel.bin").read_bytes()
    finally:
        write_manifest(manifest, original)
    assert before != after


def test_evaluate_ground_truth_zero(trained):
    assert run("evaluate", "--work-dir", trained, "--ground-truth") == 0
    rep = json.loads((trained / "eval" / "report.json").read_text())
    validate_report(rep)
    assert rep["f0_rmse"] == 0 and rep["energy_rmse"] == 0 and rep["duration_mse"] == 0


def test_evaluate_predicted_aggregates(trained):
    assert run("evaluate", "--work-dir", trained) == 0
    rep = json.loads((trained / "eval" / "report.json").read_text())
    validate_report(rep)
    assert rep["n_utterances"] == 8
    for key in ("energy_rmse", "duration_mse"):
        assert rep[key] == pytest.approx(np.mean([u[key] for u in rep["utterances"]]), rel=1e-12)
    f0 = [u["f0_rmse"] for u in rep["utterances"] if u["f0_rmse"] is not None]
    assert rep["f0_rmse"] == pytest.approx(np.mean(f0), rel=1e-12)
    assert "mean" in (trained / "eval" / "report.txt").read_text()


def test_evaluate_missing_checkpoint(tmp_path):
    assert run("prepare", "--toy", 16, "--work-dir", tmp_path) == 0
    assert run("evaluate", "--work-dir", tmp_path) == 3


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "msstyle", "prepare", "--toy", "2", "--work-dir", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "prepared 2" in out.stdout
