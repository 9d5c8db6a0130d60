import json

import pytest

from fat_eeg.cli import main
from fat_eeg.data import load_dataset
from fat_eeg.model import load_checkpoint
from fat_eeg.train import adjacency_csv, export_adjacency_topk

SMALL_SPEC = {"trials_per_subject": 8}
FAST = ["--embed-dim", "8", "--heads", "4", "--depth", "1", "--epochs", "1", "--batch-size", "16", "--jobs", "1"]


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SMALL_SPEC))
    assert main(["gen-synth", "--spec", str(root / "spec.json"), "--out", str(root / "data"), "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(synth):
    cfg = synth / "cfg.json"
    cfg.write_text(json.dumps({"model": {"p_ratio": 0.25}, "scheme": "loso"}))
    out = synth / "run"
    assert main(["train", "--data", str(synth / "data"), "--config", str(cfg), "--out", str(out), *FAST]) == 0
    return out


def test_gen_synth_deterministic_and_default_shape(synth, tmp_path):
    assert main(["gen-synth", "--spec", str(synth / "spec.json"), "--out", str(tmp_path), "--seed", "3"]) == 0
    for name in ("manifest.json", "data.bin", "labels.bin", "subjects.bin", "ground_truth.json"):
        assert (tmp_path / name).read_bytes() == (synth / "data" / name).read_bytes()
    ds = load_dataset(tmp_path)
    assert (ds.n_channels, ds.n_bands) == (16, 5)


def test_gen_synth_bad_spec(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"n_channels": 1}))
    assert main(["gen-synth", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == 2


def test_train_emits_fold_summaries_and_echoes_config(trained, capsys):
    summary = json.loads((trained / "summary.json").read_text())
    assert len(summary["fold_accuracies"]) == 5
    text = (trained / "resolved_config.json").read_text()
    assert '"p_ratio": 0.25' in text
    assert sorted(p.name for p in trained.glob("*.ckpt")) == [f"fold0{i}.ckpt" for i in range(5)]


def test_rerun_and_resolved_config_reproduce_summary(synth, trained, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--data", str(synth / "data"), "--config", str(synth / "cfg.json"),
                 "--out", str(again), *FAST]) == 0
    assert (again / "summary.json").read_bytes() == (trained / "summary.json").read_bytes()
    echoed = tmp_path / "echoed"
    assert main(["train", "--data", str(synth / "data"), "--config", str(trained / "resolved_config.json"),
                 "--out", str(echoed), "--jobs", "1"]) == 0
    assert (echoed / "summary.json").read_bytes() == (trained / "summary.json").read_bytes()
    assert (echoed / "resolved_config.json").read_bytes() == (trained / "resolved_config.json").read_bytes()


def test_train_usage_errors(synth, tmp_path):
    data = str(synth / "data")
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o"), *FAST]) == 2
    assert main(["train", "--data", data, "--out", str(tmp_path / "o"), "--scheme", "ratio:9", *FAST]) == 2
    assert main(["train", "--data", data, "--out", str(tmp_path / "o"), *FAST, "--p-ratio", "0.3"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optimizer": {}}))
    assert main(["train", "--data", data, "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_divergence_exit_code(synth, tmp_path):
    code = main(["train", "--data", str(synth / "data"), "--out", str(tmp_path), *FAST, "--lr", "1e37",
                 "--epochs", "3", "--no-augment"])
    assert code == 3


def test_ablate_pratio(synth, tmp_path):
    assert main(["ablate", "--grid", "pratio", "--data", str(synth / "data"), "--out", str(tmp_path),
                 "--scheme", "kfold:2", *FAST, "--embed-dim", "16", "--heads", "8"]) == 0
    lines = (tmp_path / "ablation_pratio.csv").read_text().splitlines()
    assert len(lines) == 1 + 4


def test_ablate_unknown_grid(synth, tmp_path):
    assert main(["ablate", "--grid", "nope", "--data", str(synth / "data"), "--out", str(tmp_path)]) == 2


def test_gradcheck_default_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out.count("PASS") == 7


def test_gradcheck_detects_corrupted_derivative(capsys):
    assert main(["gradcheck", "--corrupt-derivative", "matmul"]) == 1
    out = capsys.readouterr().out
    for name in ("autodiff.primitives", "layers.fal", "layers.fan", "layers.embedding", "attention.faa",
                 "attention.mhsa", "model.fat_loss"):
        assert f"FAIL {name}" in out


def test_export_adjacency_matches_library(synth, trained, tmp_path):
    ckpt = trained / "fold00.ckpt"
    out = tmp_path / "edges.csv"
    assert main(["export-adjacency", "--checkpoint", str(ckpt), "--out", str(out),
                 "--data", str(synth / "data")]) == 0
    expected = adjacency_csv(export_adjacency_topk(load_checkpoint(ckpt)), load_dataset(synth / "data").channel_names)
    assert out.read_bytes() == expected.encode()
    assert len(out.read_text().splitlines()) == 1 + 2 * 15


def test_export_untrained_checkpoint_is_zero(synth, tmp_path):
    assert main(["train", "--data", str(synth / "data"), "--out", str(tmp_path / "r"), *FAST,
                 "--lr", "0", "--weight-decay", "0"]) == 0
    out = tmp_path / "e.csv"
    assert main(["export-adjacency", "--checkpoint", str(tmp_path / "r" / "fold00.ckpt"), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()[1:]
    assert len(rows) == 30 and all(r.endswith(",0.0") for r in rows)


def test_export_bad_checkpoint(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 32)
    assert main(["export-adjacency", "--checkpoint", str(bad), "--out", str(tmp_path / "e.csv")]) == 2
    assert main(["export-adjacency", "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path / "e.csv")]) == 2
