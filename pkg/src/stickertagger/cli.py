"""Command line entrypoint for the whole pipeline.

One binary with subcommands for corpus synthesis, description generation,
tag-set construction, training, evaluation, and single-image prediction.
Options can come from an INI config file (sections named after subcommands);
explicit flags override file values, and the effective configuration is echoed
before any work starts.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import configparser
import functools
import json
import os
from pathlib import Path

import click
import torch

from .data import DataError, StickerImage, TagVocabulary, load_manifest
from .data import _decode_image
from .descriptions import (
    DescriptionCache,
    DescriptionError,
    HttpChatClient,
    StubChatClient,
    TextEncoder,
    describe,
    describe_corpus,
    encode_descriptions,
)
from .network import load_checkpoint, topc_select
from .synthetic import GeneratorConfig, generate_synthetic
from .tagset import (
    KeywordCorpus,
    cluster_report,
    elbow_search,
    kmeans_cluster,
    save_cluster_report,
    tfidf_features,
)
from .training import AblationFlags, TrainConfig, evaluate
from .training import train as run_training


class _RuntimeFailure(click.ClickException):
    exit_code = 1


def _guarded(fn):
    """Map errors onto the exit-code contract: validation errors are usage
    errors (2), everything else unexpected is a runtime failure (1)."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except DataError as exc:
            raise click.UsageError(str(exc)) from exc
        except DescriptionError as exc:
            raise _RuntimeFailure(str(exc)) from exc
        except Exception as exc:  # noqa: BLE001 - CLI boundary
            raise _RuntimeFailure(f"{type(exc).__name__}: {exc}") from exc

    return wrapper


def _parse_ints(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in str(raw).split(",") if part.strip())
    except ValueError:
        raise click.UsageError(f"expected comma-separated integers, got {raw!r}")


def _parse_floats(raw: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in str(raw).split(",") if part.strip())
    except ValueError:
        raise click.UsageError(f"expected comma-separated numbers, got {raw!r}")


_BOOL_STRINGS = {
    "1": True, "true": True, "yes": True, "on": True,
    "0": False, "false": False, "no": False, "off": False,
}


def _cast(raw: str, like) -> object:
    if isinstance(like, bool):
        key = str(raw).strip().lower()
        if key not in _BOOL_STRINGS:
            raise click.UsageError(f"expected a boolean, got {raw!r}")
        return _BOOL_STRINGS[key]
    if isinstance(like, int):
        try:
            return int(raw)
        except ValueError:
            raise click.UsageError(f"expected an integer, got {raw!r}")
    if isinstance(like, float):
        try:
            return float(raw)
        except ValueError:
            raise click.UsageError(f"expected a number, got {raw!r}")
    return raw


def _merge_config(
    ctx: click.Context, section: str, config_path: str | None, values: dict
) -> dict:
    """File values fill in wherever the flag was not given on the command
    line; unknown keys in the section are rejected."""
    effective = dict(values)
    if not config_path:
        return effective
    parser = configparser.ConfigParser()
    try:
        with open(config_path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise click.UsageError(f"cannot read config file {config_path}: {exc}")
    except configparser.Error as exc:
        raise click.UsageError(f"malformed config file {config_path}: {exc}")
    if not parser.has_section(section):
        return effective
    from click.core import ParameterSource

    # accept both flag spellings (n, out, k-max) and parameter names
    aliases: dict[str, str] = {}
    for param in ctx.command.params:
        aliases[param.name] = param.name
        for opt in param.opts:
            if opt.startswith("--"):
                aliases[opt[2:].replace("-", "_")] = param.name
    for key, raw in parser.items(section):
        name = aliases.get(key.replace("-", "_"), key.replace("-", "_"))
        if name not in effective:
            raise click.UsageError(f"unknown key {key!r} in [{section}]")
        if ctx.get_parameter_source(name) == ParameterSource.COMMANDLINE:
            continue
        current = effective[name]
        if isinstance(current, tuple):
            parts = _parse_floats(raw) if isinstance(current[0], float) else _parse_ints(raw)
            effective[name] = parts
        else:
            effective[name] = _cast(raw, current if current is not None else "")
    return effective


def _echo_config(section: str, effective: dict) -> None:
    payload = {k: (list(v) if isinstance(v, tuple) else v) for k, v in effective.items()}
    click.echo(f"[{section}] " + json.dumps(payload, sort_keys=True, default=str))


def _require(effective: dict, *names: str) -> None:
    missing = [n for n in names if not effective[n]]
    if missing:
        raise click.UsageError(
            "missing required settings: " + ", ".join(f"--{n.replace('_', '-')}" for n in missing)
        )


def _config_option(fn):
    return click.option(
        "--config",
        "config_path",
        type=str,
        default=None,
        help="INI config file; flags given on the command line win.",
    )(fn)


@click.group()
def main() -> None:
    """Multi-tag sticker recognition pipeline."""


# --- synth ---


@main.command()
@_config_option
@click.option("--n", "n_items", type=int, default=100, show_default=True, help="Items to render.")
@click.option("--tags", "tag_count", type=int, default=12, show_default=True, help="Vocabulary size.")
@click.option("--size", "image_size", type=int, default=64, show_default=True, help="Image side in pixels.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=str, default=None, help="Output corpus directory.")
@click.pass_context
@_guarded
def synth(ctx, config_path, **values):
    """Render a synthetic sticker corpus with a known tag vocabulary."""
    effective = _merge_config(ctx, "synth", config_path, values)
    _echo_config("synth", effective)
    _require(effective, "out_dir")
    cfg = GeneratorConfig(
        n_items=effective["n_items"],
        tag_count=effective["tag_count"],
        image_size=effective["image_size"],
        out_dir=effective["out_dir"],
    )
    ds = generate_synthetic(cfg, seed=effective["seed"])
    click.echo(f"wrote {len(ds.items)} items to {effective['out_dir']}")


# --- describe ---


def _build_client(effective: dict):
    kind = effective["client"]
    if kind == "stub":
        return StubChatClient()
    if kind == "http":
        if not effective["endpoint"]:
            raise click.UsageError("http client needs --endpoint")
        key_env = effective["api_key_env"]
        if not os.environ.get(key_env):
            raise click.UsageError(f"http client needs the {key_env} environment variable")
        return HttpChatClient(
            base_url=effective["endpoint"],
            model=effective["model"],
            api_key_env=key_env,
            retries=effective["retries"],
        )
    raise click.UsageError(f"unknown client {kind!r} (expected stub or http)")


@main.command(name="describe")
@_config_option
@click.option("--manifest", type=str, default=None, help="Corpus manifest path.")
@click.option("--vocab", type=str, default=None, help="Tag vocabulary path.")
@click.option("--cache", type=str, default=None, help="Description cache file (JSONL, appended).")
@click.option("--client", type=str, default="stub", show_default=True, help="stub or http.")
@click.option("--endpoint", type=str, default=None, help="Chat endpoint URL for the http client.")
@click.option("--model", type=str, default="default", show_default=True, help="Remote model name.")
@click.option("--api-key-env", type=str, default="STICKER_CHAT_API_KEY", show_default=True)
@click.option("--retries", type=int, default=3, show_default=True)
@click.option("--image-size", type=int, default=224, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
@_guarded
def describe_cmd(ctx, config_path, **values):
    """Generate attribute descriptions for every sticker in a manifest.

    Resumable: ids already present in the cache are not sent again.
    """
    effective = _merge_config(ctx, "describe", config_path, values)
    _echo_config("describe", effective)
    _require(effective, "manifest", "vocab", "cache")
    ds = load_manifest(
        effective["manifest"], effective["vocab"], image_size=effective["image_size"]
    )
    cache = DescriptionCache(effective["cache"])
    cached = sum(1 for sticker, _ in ds.items if sticker.id in cache)
    client = _build_client(effective)
    describe_corpus([sticker for sticker, _ in ds.items], client, cache)
    click.echo(f"{cached} cached, {len(ds.items) - cached} described")
    click.echo(f"cache: {effective['cache']}")


# --- tagset ---


@main.command()
@_config_option
@click.option("--keywords", type=str, default=None, help="Keyword file, one entry per line.")
@click.option("--out", "out_path", type=str, default=None, help="Cluster report JSON path.")
@click.option("--k", type=int, default=None, help="Fixed cluster count (skips the elbow sweep).")
@click.option("--k-min", type=int, default=2, show_default=True)
@click.option("--k-max", type=int, default=10, show_default=True)
@click.option("--step", "coarse_step", type=int, default=1, show_default=True)
@click.option("--restarts", type=int, default=4, show_default=True)
@click.option("--top-terms", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
@_guarded
def tagset(ctx, config_path, **values):
    """Cluster keyword entries into a tag-naming worksheet."""
    effective = _merge_config(ctx, "tagset", config_path, values)
    _echo_config("tagset", effective)
    _require(effective, "keywords", "out_path")
    corpus = KeywordCorpus.from_file(effective["keywords"])
    features = tfidf_features(corpus)
    elbow = None
    if effective["k"] is None:
        elbow = elbow_search(
            features,
            k_min=effective["k_min"],
            k_max=effective["k_max"],
            coarse_step=effective["coarse_step"],
            seed=effective["seed"],
            restarts=effective["restarts"],
        )
        k = elbow.k
        if elbow.no_knee:
            click.echo(f"no knee found; falling back to k={k}")
    else:
        k = effective["k"]
    result = kmeans_cluster(features, k, seed=effective["seed"], restarts=effective["restarts"])
    rep = cluster_report(corpus, result, elbow=elbow, top_terms=effective["top_terms"])
    save_cluster_report(rep, effective["out_path"])
    click.echo(f"clustered {len(corpus.keywords)} entries into k={k}")
    click.echo(f"report: {effective['out_path']}")


# --- train ---


_ABLATION_FLAGS = (
    click.option("--no-lor", is_flag=True, default=False, help="Disable masked re-attention."),
    click.option("--no-prompt", is_flag=True, default=False, help="Drop the description prompt slots."),
    click.option("--no-penalty", is_flag=True, default=False, help="Drop the confidence penalty term."),
)


def _with_ablations(fn):
    for deco in reversed(_ABLATION_FLAGS):
        fn = deco(fn)
    return fn


@main.command()
@_config_option
@click.option("--manifest", type=str, default=None)
@click.option("--vocab", type=str, default=None)
@click.option("--cache", type=str, default=None)
@click.option("--out", "out_dir", type=str, default=None, help="Run directory for logs and checkpoints.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--epochs", type=int, default=20, show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--lr", type=float, default=3e-4, show_default=True)
@click.option("--weight-decay", type=float, default=1e-2, show_default=True)
@click.option("--image-size", type=int, default=64, show_default=True)
@click.option("--patch-size", type=int, default=16, show_default=True)
@click.option("--d-model", type=int, default=128, show_default=True)
@click.option("--num-layers", type=int, default=4, show_default=True)
@click.option("--num-heads", type=int, default=4, show_default=True)
@click.option("--d-text", type=int, default=64, show_default=True)
@click.option("--fusion-layers", type=int, default=2, show_default=True)
@click.option("--mask-ratio", type=float, default=0.4, show_default=True)
@click.option("--penalty-mode", type=str, default="signed", show_default=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--ks", type=str, default="1,3,5", show_default=True, help="Comma-separated top-k list.")
@click.option("--eval-seed", type=int, default=12345, show_default=True)
@click.option("--threads", type=int, default=1, show_default=True)
@_with_ablations
@click.pass_context
@_guarded
def train(ctx, config_path, no_lor, no_prompt, no_penalty, **values):
    """Train the dual-path tagger and keep the best validation checkpoint."""
    values.update(no_lor=no_lor, no_prompt=no_prompt, no_penalty=no_penalty)
    effective = _merge_config(ctx, "train", config_path, values)
    _echo_config("train", effective)
    _require(effective, "manifest", "vocab", "cache", "out_dir")
    ks = effective["ks"]
    config = TrainConfig(
        seed=effective["seed"],
        lr=effective["lr"],
        weight_decay=effective["weight_decay"],
        batch_size=effective["batch_size"],
        epochs=effective["epochs"],
        image_size=effective["image_size"],
        patch_size=effective["patch_size"],
        d_model=effective["d_model"],
        num_layers=effective["num_layers"],
        num_heads=effective["num_heads"],
        d_text=effective["d_text"],
        fusion_layers=effective["fusion_layers"],
        mask_ratio=effective["mask_ratio"],
        penalty_mode=effective["penalty_mode"],
        ks=_parse_ints(ks) if isinstance(ks, str) else ks,
        threshold=effective["threshold"],
        eval_seed=effective["eval_seed"],
        threads=effective["threads"],
        ablations=AblationFlags(
            no_lor=effective["no_lor"],
            no_prompt=effective["no_prompt"],
            no_penalty=effective["no_penalty"],
        ),
    )
    result = run_training(
        config,
        effective["manifest"],
        effective["vocab"],
        effective["cache"],
        effective["out_dir"],
    )
    click.echo(f"best checkpoint: {result.best_checkpoint} (epoch {result.best_epoch})")
    click.echo(f"last checkpoint: {result.last_checkpoint}")
    click.echo(f"best val CF1@1: {result.best_val_cf1}")
    if result.final_val is not None:
        click.echo("final val: " + json.dumps(result.final_val.to_dict(), sort_keys=True))


# --- eval ---


@main.command(name="eval")
@_config_option
@click.option("--checkpoint", type=str, default=None)
@click.option("--manifest", type=str, default=None)
@click.option("--vocab", type=str, default=None)
@click.option("--cache", type=str, default=None)
@click.option("--split", type=str, default="test", show_default=True)
@click.option("--ks", type=str, default="1,3,5", show_default=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--eval-path", type=str, default="reconstructed", show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--seed", "eval_seed", type=int, default=12345, show_default=True, help="Masking seed for evaluation.")
@click.option("--probs-out", type=str, default=None, help="Optional probability dump path.")
@click.option("--out", "report_out", type=str, default=None, help="Optional report JSON path.")
@click.pass_context
@_guarded
def eval_cmd(ctx, config_path, **values):
    """Report multi-label metrics for a stored checkpoint."""
    effective = _merge_config(ctx, "eval", config_path, values)
    _echo_config("eval", effective)
    _require(effective, "checkpoint", "manifest", "vocab", "cache")
    ks = effective["ks"]
    rep = evaluate(
        effective["checkpoint"],
        effective["manifest"],
        effective["vocab"],
        effective["cache"],
        split=effective["split"],
        ks=_parse_ints(ks) if isinstance(ks, str) else ks,
        threshold=effective["threshold"],
        eval_seed=effective["eval_seed"],
        eval_path=effective["eval_path"],
        batch_size=effective["batch_size"],
        probs_out=effective["probs_out"],
    )
    sidecar_path = Path(effective["checkpoint"] + ".json")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    payload = {
        "ablation": sidecar.get("ablation", "full"),
        "checkpoint": effective["checkpoint"],
        "split": effective["split"],
        "report": rep.to_dict(),
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if effective["report_out"]:
        Path(effective["report_out"]).write_text(text, encoding="utf-8")
    click.echo(text, nl=False)


# --- predict ---


@main.command()
@_config_option
@click.option("--checkpoint", type=str, default=None)
@click.option("--vocab", type=str, default=None)
@click.option("--image", "image_path", type=str, default=None)
@click.option("--topc", type=int, default=3, show_default=True)
@click.option("--cache", type=str, default=None, help="Optional description cache to reuse.")
@click.option("--client", type=str, default="stub", show_default=True)
@click.option("--endpoint", type=str, default=None)
@click.option("--model", type=str, default="default", show_default=True)
@click.option("--api-key-env", type=str, default="STICKER_CHAT_API_KEY", show_default=True)
@click.option("--retries", type=int, default=3, show_default=True)
@click.option("--eval-path", type=str, default="reconstructed", show_default=True)
@click.option("--seed", type=int, default=12345, show_default=True, help="Masking seed.")
@click.pass_context
@_guarded
def predict(ctx, config_path, **values):
    """Print the top-C tags with probabilities for one image."""
    effective = _merge_config(ctx, "predict", config_path, values)
    _echo_config("predict", effective)
    _require(effective, "checkpoint", "vocab", "image_path")
    model, sidecar = load_checkpoint(effective["checkpoint"])
    train_config = TrainConfig.from_dict(sidecar.get("train_config", {}))
    vocab = TagVocabulary.from_file(effective["vocab"])
    if vocab.hash() != sidecar["vocab_hash"]:
        raise click.UsageError(
            "vocabulary hash mismatch: checkpoint was trained on a different tag set"
        )
    image_path = Path(effective["image_path"])
    pixels = _decode_image(image_path, model.config.image_size)
    sticker = StickerImage(id=image_path.stem, pixels=pixels, meta={})
    cache = DescriptionCache(effective["cache"]) if effective["cache"] else None
    client = _build_client(effective)
    desc = describe(sticker, client, cache)
    # replay the training-time text encoder: same seed, first RNG consumer
    torch.manual_seed(train_config.seed)
    encoder = TextEncoder(
        d_text=train_config.d_text,
        vocab_size=train_config.text_vocab_size,
        max_len=train_config.text_max_len,
    )
    encoder.eval()
    with torch.no_grad():
        emb = encode_descriptions(desc, encoder)
        dist_r, dist_o, _ = model.forward_dual(
            sticker, emb, lor_seed=effective["seed"],
            no_lor=train_config.ablations.no_lor,
        )
    dist = dist_r if effective["eval_path"] == "reconstructed" else dist_o
    pred = topc_select(dist, effective["topc"])
    for j in pred.topc:
        click.echo(f"{vocab.tags[j]}\t{float(dist.probs[j]):.4f}")



if __name__ == "__main__":
    main()
