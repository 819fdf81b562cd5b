import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from stickertagger.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


def _synth(runner, out: Path, n=12, tags=4, size=32, seed=1):
    result = runner.invoke(
        main,
        ["synth", "--n", str(n), "--tags", str(tags), "--size", str(size),
         "--seed", str(seed), "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    return out


def _describe(runner, corpus: Path, cache_name="cache.jsonl"):
    result = runner.invoke(
        main,
        ["describe", "--manifest", str(corpus / "manifest.jsonl"),
         "--vocab", str(corpus / "vocab.txt"),
         "--cache", str(corpus / cache_name)],
    )
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Tiny corpus plus a one-epoch training run, shared by eval/predict tests."""
    runner = CliRunner()
    root = tmp_path_factory.mktemp("cli_trained")
    corpus = root / "corpus"
    _synth(runner, corpus, n=16, tags=4)
    _describe(runner, corpus)
    run = root / "run"
    result = runner.invoke(
        main,
        ["train", "--manifest", str(corpus / "manifest.jsonl"),
         "--vocab", str(corpus / "vocab.txt"),
         "--cache", str(corpus / "cache.jsonl"),
         "--out", str(run), "--epochs", "1", "--image-size", "32",
         "--d-model", "32", "--num-layers", "1", "--d-text", "16",
         "--fusion-layers", "1", "--ks", "1,3"],
    )
    assert result.exit_code == 0, result.output
    return corpus, run


# --- synth ---


def test_synth_reruns_are_identical(runner, tmp_path):
    a = _synth(runner, tmp_path / "a", n=10, seed=7)
    b = _synth(runner, tmp_path / "b", n=10, seed=7)
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
    assert (a / "vocab.txt").read_bytes() == (b / "vocab.txt").read_bytes()
    name = "images/synth-00003.png"
    assert (a / name).read_bytes() == (b / name).read_bytes()


def test_synth_rejects_single_tag(runner, tmp_path):
    result = runner.invoke(
        main, ["synth", "--n", "5", "--tags", "1", "--out", str(tmp_path / "bad")]
    )
    assert result.exit_code == 2
    assert "at least 2 tags" in result.output


def test_synth_requires_out_dir(runner):
    result = runner.invoke(main, ["synth", "--n", "5"])
    assert result.exit_code == 2
    assert "--out" in result.output


def test_synth_echoes_effective_config(runner, tmp_path):
    result = runner.invoke(
        main, ["synth", "--n", "3", "--tags", "4", "--out", str(tmp_path / "c")]
    )
    assert result.exit_code == 0
    first = result.output.splitlines()[0]
    assert first.startswith("[synth] ")
    assert json.loads(first.split(" ", 1)[1])["n_items"] == 3


# --- config file ---


def test_config_file_supplies_values(runner, tmp_path):
    cfg = tmp_path / "recipe.ini"
    cfg.write_text(f"[synth]\nn = 7\ntags = 4\nout = {tmp_path / 'fromfile'}\n")
    result = runner.invoke(main, ["synth", "--config", str(cfg)])
    assert result.exit_code == 0, result.output
    manifest = (tmp_path / "fromfile" / "manifest.jsonl").read_text()
    assert len(manifest.splitlines()) == 7


def test_command_line_flags_override_config_file(runner, tmp_path):
    cfg = tmp_path / "recipe.ini"
    cfg.write_text(f"[synth]\nn = 7\ntags = 4\nout = {tmp_path / 'x'}\n")
    result = runner.invoke(main, ["synth", "--config", str(cfg), "--n", "4"])
    assert result.exit_code == 0, result.output
    manifest = (tmp_path / "x" / "manifest.jsonl").read_text()
    assert len(manifest.splitlines()) == 4


def test_unknown_config_key_is_a_usage_error(runner, tmp_path):
    cfg = tmp_path / "recipe.ini"
    cfg.write_text("[synth]\nmystery = 1\n")
    result = runner.invoke(main, ["synth", "--config", str(cfg), "--out", str(tmp_path / "y")])
    assert result.exit_code == 2
    assert "mystery" in result.output


def test_missing_config_file_is_a_usage_error(runner, tmp_path):
    result = runner.invoke(
        main, ["synth", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "z")]
    )
    assert result.exit_code == 2


# --- describe ---


def test_describe_fills_cache_and_resumes(runner, tmp_path):
    corpus = _synth(runner, tmp_path / "corpus", n=10)
    first = _describe(runner, corpus)
    assert "0 cached, 10 described" in first.output
    cache = corpus / "cache.jsonl"
    assert len(cache.read_text().splitlines()) == 10
    second = _describe(runner, corpus)
    assert "10 cached, 0 described" in second.output
    assert len(cache.read_text().splitlines()) == 10


def test_interrupted_describe_resumes_to_identical_cache(runner, tmp_path):
    corpus = _synth(runner, tmp_path / "corpus", n=10)
    # a partial pass over the first half of the manifest, then the full pass
    rows = (corpus / "manifest.jsonl").read_text().splitlines()
    partial = corpus / "manifest_head.jsonl"
    partial.write_text("\n".join(rows[:5]) + "\n")
    result = runner.invoke(
        main,
        ["describe", "--manifest", str(partial),
         "--vocab", str(corpus / "vocab.txt"),
         "--cache", str(corpus / "resumed.jsonl")],
    )
    assert result.exit_code == 0, result.output
    _describe(runner, corpus, cache_name="resumed.jsonl")
    _describe(runner, corpus, cache_name="straight.jsonl")
    assert (corpus / "resumed.jsonl").read_bytes() == (corpus / "straight.jsonl").read_bytes()


def test_describe_http_without_credentials(runner, tmp_path, monkeypatch):
    corpus = _synth(runner, tmp_path / "corpus", n=3)
    monkeypatch.delenv("STICKER_CHAT_API_KEY", raising=False)
    result = runner.invoke(
        main,
        ["describe", "--manifest", str(corpus / "manifest.jsonl"),
         "--vocab", str(corpus / "vocab.txt"),
         "--cache", str(corpus / "c.jsonl"),
         "--client", "http", "--endpoint", "http://example.invalid/v1"],
    )
    assert result.exit_code == 2
    assert "STICKER_CHAT_API_KEY" in result.output


def test_describe_http_needs_endpoint(runner, tmp_path):
    corpus = _synth(runner, tmp_path / "corpus", n=3)
    result = runner.invoke(
        main,
        ["describe", "--manifest", str(corpus / "manifest.jsonl"),
         "--vocab", str(corpus / "vocab.txt"),
         "--cache", str(corpus / "c.jsonl"), "--client", "http"],
    )
    assert result.exit_code == 2
    assert "--endpoint" in result.output


# --- tagset ---


def _write_keywords(path: Path, groups=5, per_group=8):
    lines = []
    vocab = [
        ["happy", "joy", "smile"],
        ["angry", "rage", "frown"],
        ["food", "snack", "tasty"],
        ["sleep", "tired", "yawn"],
        ["love", "heart", "hug"],
    ]
    for g in range(groups):
        tokens = vocab[g]
        for i in range(per_group):
            rotated = tokens[i % 3 :] + tokens[: i % 3]
            lines.append(" ".join(rotated))
    path.write_text("\n".join(lines) + "\n")
    return path


def test_tagset_elbow_finds_planted_groups(runner, tmp_path):
    keywords = _write_keywords(tmp_path / "keywords.txt")
    out = tmp_path / "report.json"
    result = runner.invoke(
        main,
        ["tagset", "--keywords", str(keywords), "--out", str(out),
         "--k-min", "2", "--k-max", "10", "--seed", "0"],
    )
    assert result.exit_code == 0, result.output
    report = json.loads(out.read_text())
    assert report["k"] == 5
    assert "k=5" in result.output


def test_tagset_fixed_k_skips_elbow(runner, tmp_path):
    keywords = _write_keywords(tmp_path / "keywords.txt")
    out = tmp_path / "report.json"
    result = runner.invoke(
        main, ["tagset", "--keywords", str(keywords), "--out", str(out), "--k", "3"]
    )
    assert result.exit_code == 0, result.output
    report = json.loads(out.read_text())
    assert report["k"] == 3
    assert report.get("elbow") is None


def test_tagset_empty_corpus(runner, tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    result = runner.invoke(
        main, ["tagset", "--keywords", str(empty), "--out", str(tmp_path / "r.json")]
    )
    assert result.exit_code == 2


# --- train / eval / predict ---


def test_train_writes_artifacts(trained):
    corpus, run = trained
    assert (run / "checkpoint_best.pt").exists()
    assert (run / "checkpoint_last.pt").exists()
    assert (run / "train_log.jsonl").read_text().strip()
    assert (run / "train_config.json").exists()


def test_eval_reports_are_byte_identical(runner, trained, tmp_path):
    corpus, run = trained
    args = ["eval", "--checkpoint", str(run / "checkpoint_best.pt"),
            "--manifest", str(corpus / "manifest.jsonl"),
            "--vocab", str(corpus / "vocab.txt"),
            "--cache", str(corpus / "cache.jsonl"),
            "--split", "val", "--ks", "1"]
    a = runner.invoke(main, args + ["--out", str(tmp_path / "a.json")])
    b = runner.invoke(main, args + ["--out", str(tmp_path / "b.json")])
    assert a.exit_code == 0, a.output
    assert b.exit_code == 0, b.output
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    payload = json.loads((tmp_path / "a.json").read_text())
    assert payload["ablation"] == "full"
    assert "report" in payload and "per_k" in payload["report"]


def test_ablation_label_travels_to_eval_report(runner, tmp_path):
    corpus = _synth(runner, tmp_path / "corpus", n=12)
    _describe(runner, corpus)
    run = tmp_path / "run"
    result = runner.invoke(
        main,
        ["train", "--manifest", str(corpus / "manifest.jsonl"),
         "--vocab", str(corpus / "vocab.txt"),
         "--cache", str(corpus / "cache.jsonl"),
         "--out", str(run), "--epochs", "1", "--image-size", "32",
         "--d-model", "32", "--num-layers", "1", "--d-text", "16",
         "--fusion-layers", "1", "--ks", "1", "--no-lor"],
    )
    assert result.exit_code == 0, result.output
    out = tmp_path / "report.json"
    result = runner.invoke(
        main,
        ["eval", "--checkpoint", str(run / "checkpoint_best.pt"),
         "--manifest", str(corpus / "manifest.jsonl"),
         "--vocab", str(corpus / "vocab.txt"),
         "--cache", str(corpus / "cache.jsonl"),
         "--split", "val", "--ks", "1", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert json.loads(out.read_text())["ablation"] == "no_lor"


def test_eval_unknown_split(runner, trained):
    corpus, run = trained
    result = runner.invoke(
        main,
        ["eval", "--checkpoint", str(run / "checkpoint_best.pt"),
         "--manifest", str(corpus / "manifest.jsonl"),
         "--vocab", str(corpus / "vocab.txt"),
         "--cache", str(corpus / "cache.jsonl"),
         "--split", "validation", "--ks", "1"],
    )
    assert result.exit_code == 2
    assert "unknown split" in result.output


def test_predict_prints_descending_topc(runner, trained):
    corpus, run = trained
    result = runner.invoke(
        main,
        ["predict", "--checkpoint", str(run / "checkpoint_best.pt"),
         "--vocab", str(corpus / "vocab.txt"),
         "--image", str(corpus / "images" / "synth-00002.png"),
         "--topc", "3"],
    )
    assert result.exit_code == 0, result.output
    lines = [l for l in result.output.splitlines() if "\t" in l]
    assert len(lines) == 3
    probs = [float(l.split("\t")[1]) for l in lines]
    assert probs == sorted(probs, reverse=True)
    vocab = set((corpus / "vocab.txt").read_text().split())
    for line in lines:
        assert line.split("\t")[0] in vocab


def test_predict_rejects_mismatched_vocabulary(runner, trained, tmp_path):
    corpus, run = trained
    other = tmp_path / "other_vocab.txt"
    other.write_text("alpha\nbeta\ngamma\ndelta\n")
    result = runner.invoke(
        main,
        ["predict", "--checkpoint", str(run / "checkpoint_best.pt"),
         "--vocab", str(other),
         "--image", str(corpus / "images" / "synth-00002.png")],
    )
    assert result.exit_code == 2
    assert "hash mismatch" in result.output


def test_every_subcommand_documents_seed(runner):
    for name in ("synth", "describe", "tagset", "train", "eval", "predict"):
        result = runner.invoke(main, [name, "--help"])
        assert result.exit_code == 0
        assert "--seed" in result.output, name
