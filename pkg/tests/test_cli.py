import json
from pathlib import Path

import pytest

from lst.cli import EXIT_CONFIG, EXIT_ERROR, EXIT_OK, EXIT_USAGE, dispatch
from lst.corpus import read_corpus

MICRO = str(Path(__file__).resolve().parent.parent / "configs" / "micro.json")


def last_json(out: str) -> dict:
    return json.loads(out[out.index("{") :])


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    assert dispatch(["--quiet", "train", "--config", MICRO, "--out", str(run)]) == EXIT_OK
    return run


def test_help_and_usage_errors(capsys):
    assert dispatch(["--help"]) == EXIT_OK
    assert dispatch(["no-such-command"]) == EXIT_USAGE
    assert dispatch(["train", "--config", MICRO]) == EXIT_USAGE
    assert dispatch(["train", "--config", MICRO, "--ratio", "half", "--out", "x"]) == EXIT_USAGE


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"warmup": -1}}))
    assert dispatch(["train", "--config", str(bad), "--out", str(tmp_path / "run")]) == EXIT_CONFIG
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "ConfigError"
    assert error["field"] == "train.warmup"


def test_missing_corpus_is_runtime_error(tmp_path, capsys):
    args = ["train", "--config", MICRO, "--corpus", str(tmp_path / "none.ndjson"), "--out", str(tmp_path / "run")]
    assert dispatch(args) == EXIT_ERROR


def test_gen_corpus(tmp_path, capsys):
    out = tmp_path / "corpus.ndjson"
    assert dispatch(["--quiet", "gen-corpus", "--config", MICRO, "--n", "5", "--out", str(out)]) == EXIT_OK
    assert last_json(capsys.readouterr().out)["utterances"] == 5
    assert len(read_corpus(out)) == 5
    assert list((tmp_path / "manifests").glob("gen-corpus-*.json"))


def test_gen_evalset(tmp_path, capsys):
    out = tmp_path / "evalset.ndjson"
    assert dispatch(["--quiet", "gen-evalset", "--config", MICRO, "--out", str(out)]) == EXIT_OK
    assert last_json(capsys.readouterr().out)["records"] == 8


def test_train_writes_run(trained_run):
    assert (trained_run / "metrics.csv").exists()
    assert (trained_run / "eval.csv").exists()
    assert (trained_run / "config.json").exists()
    assert (trained_run / "weights" / "manifest.json").exists()
    assert (trained_run / "checkpoints" / "latest" / "manifest.json").exists()
    manifest = json.loads(next((trained_run / "manifests").glob("train-*.json")).read_text())
    assert manifest["seed"] == 0
    assert manifest["version"].startswith("0.1.0+")


def test_eval_writes_reports(trained_run, capsys):
    assert dispatch(["--quiet", "eval", "--run", str(trained_run)]) == EXIT_OK
    report = json.loads((trained_run / "eval_report.json").read_text())
    assert report["n_records"] == 8
    assert 0.0 <= report["accuracy"] <= 1.0
    assert (trained_run / "eval_report.csv").read_text().startswith("metric,mean,std,n_seeds")


def test_cluster_stats(trained_run, capsys):
    assert dispatch(["--quiet", "cluster-stats", "--run", str(trained_run), "--n", "40", "--words", "5"]) == EXIT_OK
    stats = last_json(capsys.readouterr().out)
    assert stats["n_words"] >= 2


def test_plot_csv(trained_run, tmp_path):
    out = tmp_path / "loss.svg"
    assert dispatch(["plot-csv", str(trained_run / "metrics.csv"), "--out", str(out), "--y", "loss", "lr"]) == EXIT_OK
    assert out.read_text().lstrip().startswith("<?xml")


def test_plot_csv_missing_column(trained_run, tmp_path):
    args = ["plot-csv", str(trained_run / "metrics.csv"), "--out", str(tmp_path / "x.svg"), "--y", "nope"]
    assert dispatch(args) == EXIT_CONFIG


def test_patch_inspect(tmp_path, capsys):
    args = ["--quiet", "patch-inspect", "--words", "4", "--interleaved", "--out", str(tmp_path)]
    assert dispatch(args) == EXIT_OK
    payload = last_json(capsys.readouterr().out)
    assert len(payload["words"]) == 4
    assert payload["patches"][-1][1] == payload["frames"] - 1
    assert payload["interleaved"].startswith("<")


def test_patch_inspect_stats(tmp_path, capsys):
    args = ["--quiet", "patch-inspect", "--stats", "--n", "30", "--out", str(tmp_path)]
    assert dispatch(args) == EXIT_OK
    assert "static-4" in last_json(capsys.readouterr().out)["patching"]


def test_gen_corpus_synthesis_flags(tmp_path, capsys):
    base = ["--quiet", "gen-corpus", "--config", MICRO, "--utterances", "40", "--seed", "3"]
    assert dispatch([*base, "--out", str(tmp_path / "a.ndjson")]) == EXIT_OK
    default = last_json(capsys.readouterr().out)
    flags = ["--mean-word-frames", "12", "--mean-sil-frames", "3.7", "--sil-prob", "0"]
    assert dispatch([*base, *flags, "--out", str(tmp_path / "b.ndjson")]) == EXIT_OK
    tuned = last_json(capsys.readouterr().out)
    assert tuned["utterances"] == default["utterances"] == 40
    assert tuned["mean_word_frames"] > default["mean_word_frames"]
    assert tuned["silence_runs"] < default["silence_runs"]


def test_gen_corpus_rejects_bad_probability(tmp_path, capsys):
    args = ["gen-corpus", "--config", MICRO, "--sil-prob", "1.5", "--out", str(tmp_path / "c.ndjson")]
    assert dispatch(args) == EXIT_CONFIG
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["field"] == "corpus.sil_prob"


def test_patch_inspect_mode_and_size(tmp_path, capsys):
    args = ["--quiet", "patch-inspect", "--mode", "static", "--p", "3", "--words", "4", "--out", str(tmp_path)]
    assert dispatch(args) == EXIT_OK
    patches = last_json(capsys.readouterr().out)["patches"]
    assert all(end - start + 1 <= 3 for start, end, _ in patches)
    assert {kind for _, _, kind in patches} == {"static"}


def test_patch_inspect_stats_histograms(tmp_path, capsys):
    args = ["--quiet", "patch-inspect", "--stats", "--mode", "static", "--p", "4", "--n", "20", "--out", str(tmp_path)]
    assert dispatch(args) == EXIT_OK
    patching = last_json(capsys.readouterr().out)["patching"]
    assert list(patching) == ["static-4"]
    entry = patching["static-4"]
    assert sum(entry["segments_per_run"].values()) == 20
    assert sum(entry["sizes"].values()) == entry["patches"]


def test_unexpected_error_is_reported_as_json(tmp_path, capsys):
    args = ["--quiet", "patch-inspect", "--interleaved", "--words", "1", "--out", str(tmp_path)]
    assert dispatch(args) == EXIT_ERROR
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "SkipUtterance"
