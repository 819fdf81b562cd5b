import json
from pathlib import Path

import numpy as np
import pytest

from stickertagger.data import DataError, TagVocabulary, load_manifest, split_dataset
from stickertagger.descriptions import DescriptionCache, StubChatClient, describe_corpus
from stickertagger.metrics import load_probability_dump, report
from stickertagger.synthetic import GeneratorConfig, generate_synthetic
from stickertagger.training import AblationFlags, TrainConfig, evaluate, train


def _make_corpus(root: Path, n_items: int, tag_count: int, seed: int) -> Path:
    out = root / f"corpus_{n_items}_{tag_count}_{seed}"
    cfg = GeneratorConfig(
        n_items=n_items, tag_count=tag_count, image_size=32, out_dir=out
    )
    ds = generate_synthetic(cfg, seed=seed)
    cache = DescriptionCache(out / "cache.jsonl")
    describe_corpus([img for img, _ in ds.items], StubChatClient(), cache)
    return out


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    return _make_corpus(tmp_path_factory.mktemp("traincorpus"), 60, 6, seed=21)


def _config(**overrides):
    base = dict(
        seed=3,
        epochs=1,
        image_size=32,
        patch_size=16,
        d_model=32,
        num_layers=1,
        num_heads=4,
        d_text=16,
        fusion_layers=1,
        batch_size=8,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _run(corpus: Path, out: Path, **overrides):
    return train(
        _config(**overrides),
        corpus / "manifest.jsonl",
        corpus / "vocab.txt",
        corpus / "cache.jsonl",
        out,
    )


def _step_lines(log_path: Path):
    lines = [json.loads(l) for l in log_path.read_text().splitlines()]
    return [l for l in lines if "step" in l]


def test_zero_epochs_writes_initial_checkpoints(small_corpus, tmp_path):
    result = _run(small_corpus, tmp_path / "run", epochs=0)
    assert result.best_checkpoint.exists()
    assert result.last_checkpoint.exists()
    assert result.log_path.read_text() == ""
    assert result.best_epoch == -1
    assert result.final_val is None
    sidecar = json.loads(
        result.best_checkpoint.with_suffix(".pt.json").read_text()
    )
    assert sidecar["ablation"] == "full"
    rep = evaluate(
        result.best_checkpoint,
        small_corpus / "manifest.jsonl",
        small_corpus / "vocab.txt",
        small_corpus / "cache.jsonl",
        split="val",
    )
    assert rep.n_eval == 6  # 60 * 0.1


def test_repeat_runs_are_bitwise_identical(small_corpus, tmp_path):
    a = _run(small_corpus, tmp_path / "a", epochs=2)
    b = _run(small_corpus, tmp_path / "b", epochs=2)
    assert a.log_path.read_bytes() == b.log_path.read_bytes()
    for name in ("train_config.json", "val_probs_epoch000.bin", "val_probs_epoch001.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_training_trace(small_corpus, tmp_path):
    a = _run(small_corpus, tmp_path / "a", epochs=1, seed=3)
    b = _run(small_corpus, tmp_path / "b", epochs=1, seed=4)
    assert a.log_path.read_bytes() != b.log_path.read_bytes()


def test_manifest_row_order_does_not_matter(small_corpus, tmp_path):
    manifest = small_corpus / "manifest.jsonl"
    rows = manifest.read_text().splitlines()
    # image paths are relative to the manifest, so stay in the corpus dir
    reordered = small_corpus / "manifest_reversed.jsonl"
    reordered.write_text("\n".join(rows[::-1]) + "\n")
    a = _run(small_corpus, tmp_path / "a", epochs=1)
    result = train(
        _config(epochs=1),
        reordered,
        small_corpus / "vocab.txt",
        small_corpus / "cache.jsonl",
        tmp_path / "b",
    )
    assert a.log_path.read_bytes() == result.log_path.read_bytes()


def test_missing_descriptions_fail_loudly(small_corpus, tmp_path):
    with pytest.raises(DataError, match="synth-00000"):
        train(
            _config(epochs=1),
            small_corpus / "manifest.jsonl",
            small_corpus / "vocab.txt",
            tmp_path / "empty_cache.jsonl",
            tmp_path / "run",
        )
    with pytest.raises(DataError, match="more"):
        train(
            _config(epochs=1),
            small_corpus / "manifest.jsonl",
            small_corpus / "vocab.txt",
            tmp_path / "empty_cache.jsonl",
            tmp_path / "run",
        )


def test_untrained_recall_sits_at_chance(tmp_path_factory, tmp_path):
    # top-1 recall of an untrained model stays near 100/m
    corpus = _make_corpus(tmp_path_factory.mktemp("chance"), 300, 10, seed=33)
    values = []
    for seed in range(5):
        result = _run(corpus, tmp_path / f"run{seed}", epochs=0, seed=seed)
        rep = evaluate(
            result.best_checkpoint,
            corpus / "manifest.jsonl",
            corpus / "vocab.txt",
            corpus / "cache.jsonl",
            split="val",
            ks=(1,),
        )
        values.append(rep.per_k[1]["CR"])
    mean = sum(values) / len(values)
    assert abs(mean - 10.0) <= 5.0, values


def test_no_penalty_run_logs_zero_penalty(small_corpus, tmp_path):
    result = _run(
        small_corpus,
        tmp_path / "run",
        epochs=1,
        ablations=AblationFlags(no_penalty=True),
    )
    lines = _step_lines(result.log_path)
    assert lines
    for line in lines:
        assert line["penalty"] == 0.0
        assert line["total"] == line["main"]
    sidecar = json.loads(result.best_checkpoint.with_suffix(".pt.json").read_text())
    assert sidecar["ablation"] == "no_penalty"


def test_masking_off_makes_paths_identical(small_corpus, tmp_path):
    # without masked reconstruction the two paths coincide, so the signed
    # penalty is exactly zero at float precision
    result = _run(
        small_corpus,
        tmp_path / "run",
        epochs=1,
        ablations=AblationFlags(no_lor=True),
    )
    lines = _step_lines(result.log_path)
    assert lines
    for line in lines:
        assert line["penalty"] == 0.0


def test_validation_dump_replays_to_logged_metrics(small_corpus, tmp_path):
    config = _config(epochs=2)
    result = _run(small_corpus, tmp_path / "run", epochs=2)
    probs, header = load_probability_dump(tmp_path / "run" / "val_probs_epoch001.bin")
    ds = load_manifest(
        small_corpus / "manifest.jsonl", small_corpus / "vocab.txt", image_size=32
    )
    assert header["vocab_hash"] == ds.vocabulary.hash()
    _, val_ds, _ = split_dataset(ds, config.split, seed=config.seed)
    truths = [set(tags) for _, tags in sorted(val_ds.items, key=lambda it: it[0].id)]
    replayed = report(probs, truths, ks=config.ks, threshold=config.threshold)
    assert replayed.to_dict() == result.final_val.to_dict()


def test_evaluate_matches_final_validation_report(small_corpus, tmp_path):
    result = _run(small_corpus, tmp_path / "run", epochs=2)
    rep = evaluate(
        result.last_checkpoint,
        small_corpus / "manifest.jsonl",
        small_corpus / "vocab.txt",
        small_corpus / "cache.jsonl",
        split="val",
    )
    assert rep.to_dict() == result.final_val.to_dict()
    again = evaluate(
        result.last_checkpoint,
        small_corpus / "manifest.jsonl",
        small_corpus / "vocab.txt",
        small_corpus / "cache.jsonl",
        split="val",
    )
    assert again.to_dict() == rep.to_dict()


def test_evaluate_writes_probability_dump(small_corpus, tmp_path):
    result = _run(small_corpus, tmp_path / "run", epochs=1)
    dump = tmp_path / "test_probs.bin"
    rep = evaluate(
        result.best_checkpoint,
        small_corpus / "manifest.jsonl",
        small_corpus / "vocab.txt",
        small_corpus / "cache.jsonl",
        split="test",
        probs_out=dump,
    )
    probs, header = load_probability_dump(dump)
    assert probs.shape == (rep.n_eval, 6)
    assert header["n"] == rep.n_eval


def test_evaluate_whole_corpus_and_original_path(small_corpus, tmp_path):
    result = _run(small_corpus, tmp_path / "run", epochs=1)
    rep_all = evaluate(
        result.best_checkpoint,
        small_corpus / "manifest.jsonl",
        small_corpus / "vocab.txt",
        small_corpus / "cache.jsonl",
        split="all",
    )
    assert rep_all.n_eval == 60
    rep_orig = evaluate(
        result.best_checkpoint,
        small_corpus / "manifest.jsonl",
        small_corpus / "vocab.txt",
        small_corpus / "cache.jsonl",
        split="val",
        eval_path="original",
    )
    assert rep_orig.n_eval == 6


def test_evaluate_rejects_other_vocabulary(small_corpus, tmp_path):
    result = _run(small_corpus, tmp_path / "run", epochs=0)
    tags = TagVocabulary.from_file(small_corpus / "vocab.txt").tags
    other = tmp_path / "vocab_bigger.txt"
    TagVocabulary(tags=list(tags) + ["extra"]).to_file(other)
    with pytest.raises(DataError, match="hash mismatch"):
        evaluate(
            result.best_checkpoint,
            small_corpus / "manifest.jsonl",
            other,
            small_corpus / "cache.jsonl",
            split="val",
        )


def test_evaluate_rejects_unknown_split(small_corpus, tmp_path):
    result = _run(small_corpus, tmp_path / "run", epochs=0)
    with pytest.raises(DataError, match="unknown split"):
        evaluate(
            result.best_checkpoint,
            small_corpus / "manifest.jsonl",
            small_corpus / "vocab.txt",
            small_corpus / "cache.jsonl",
            split="validation",
        )
