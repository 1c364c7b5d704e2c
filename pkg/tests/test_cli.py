import json
import subprocess
import sys

import pytest

from mixnet_pad import __version__
from mixnet_pad.cli import build_parser, main
from mixnet_pad.datamodel import load_manifest


def cli(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli("synth", "--seed", 7, "--out", d / "synth") == 0
    assert cli("folds", "--manifest", d / "synth" / "manifest.jsonl", "--k", 3,
               "--out", d / "folded") == 0
    return d


def test_synth(data, capsys):
    m = load_manifest(data / "synth" / "manifest.jsonl")
    assert len(m) == 48
    assert all(r.image_path(m.root).exists() for r in m.records)
    assert (data / "synth" / "run.json").exists()


def test_folds_keep_paths_valid(data):
    m = load_manifest(data / "folded" / "manifest.jsonl")
    assert {r.fold for r in m.records} == {0, 1, 2}
    assert all(r.image_path(m.root).exists() for r in m.records)


def test_missing_manifest_names_file(tmp_path, capsys):
    rc = cli("evaluate", "--protocol", "intra", "--manifest", tmp_path / "m.jsonl",
             "--out", tmp_path / "o")
    err = capsys.readouterr().err.strip().splitlines()
    assert rc == 1
    assert len(err) == 1 and err[0].startswith("error:") and "m.jsonl" in err[0]


def test_train_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        cli("train", "--help")
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--seed", "--threads", "--out", "--manifest", "--backbone", "--weights",
                 "--alphas", "--epochs", "--batch-size", "--combine"):
        assert flag in text


@pytest.mark.parametrize("argv", [["frobnicate"], ["synth", "--out", "x", "--bogus"],
                                  ["evaluate", "--protocol", "leave-one-out", "--manifest", "m",
                                   "--out", "o"],
                                  ["train", "--manifest", "m", "--out", "o", "--alphas", "1,2"]])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli(*argv)
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_run_json_has_resolved_config(data):
    cfg = json.loads((data / "synth" / "run.json").read_text())
    assert cfg["command"] == "synth" and cfg["seed"] == 7 and cfg["threads"] == 1
    assert cfg["version"] == __version__
    assert cfg["videos_per_class"] == 3


def test_train_and_diagnostics(data, tmp_path, capsys):
    manifest = data / "folded" / "manifest.jsonl"
    before = manifest.read_bytes()
    assert cli("train", "--manifest", manifest, "--exclude-fold", 0, "--epochs", 1,
               "--out", tmp_path / "t") == 0
    assert (tmp_path / "t" / "checkpoint").exists()
    assert (tmp_path / "t" / "train_log.jsonl").exists()
    ck = tmp_path / "t" / "checkpoint"
    assert cli("scatter", "--checkpoint", ck, "--manifest", manifest, "--out", tmp_path / "s") == 0
    assert {p.name for p in (tmp_path / "s").iterdir()} >= {"scatter.csv", "scatter.png",
                                                            "scatter.svg"}
    m = load_manifest(manifest)
    sid = m.records[0].sample_id
    assert cli("cam", "--checkpoint", ck, "--manifest", manifest, "--sample-id", sid,
               "--out", tmp_path / "c") == 0
    assert (tmp_path / "c" / f"{sid}_print.png").exists()
    assert cli("cam", "--checkpoint", ck, "--manifest", manifest, "--sample-id", "nope",
               "--out", tmp_path / "c") == 1
    assert manifest.read_bytes() == before


def test_evaluate_svm_and_roc(data, tmp_path, capsys):
    manifest = data / "folded" / "manifest.jsonl"
    assert cli("evaluate", "--protocol", "intra", "--method", "lbp-hog-svm", "--manifest", manifest,
               "--out", tmp_path / "e") == 0
    out = json.loads(capsys.readouterr().out)
    assert 0 <= out["acer"] <= 1
    metrics = tmp_path / "e" / "runs" / "intra" / "metrics.json"
    assert cli("roc", f"svm={metrics}", "--out", tmp_path / "r") == 0
    assert (tmp_path / "r" / "roc.png").exists() and (tmp_path / "r" / "roc.svg").exists()


def test_evaluate_argument_combinations(data, tmp_path, capsys):
    manifest = data / "folded" / "manifest.jsonl"
    assert cli("evaluate", "--protocol", "cross-unseen", "--manifest", manifest,
               "--out", tmp_path) == 1
    assert "--unseen-manifest" in capsys.readouterr().err
    assert cli("evaluate", "--protocol", "predefined", "--manifest", manifest,
               "--test-manifest", manifest, "--metric", "acer", "--out", tmp_path) == 1


def test_features(data, tmp_path, capsys):
    assert cli("features", "--manifest", data / "synth" / "manifest.jsonl",
               "--out", tmp_path) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["shape"] == [48, 383]


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "mixnet_pad", "--version"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and __version__ in r.stdout


def test_parser_has_all_commands():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {"synth", "folds", "features", "train", "evaluate", "ablate",
                                "cam", "scatter", "roc"}
