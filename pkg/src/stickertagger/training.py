"""Training and evaluation orchestration.

All randomness is derived from the config seed: model init from the torch
seed, the per-epoch shuffle from (seed, epoch), the per-step mask plan from
(seed, epoch, step), and evaluation masking from a fixed eval seed. Items are
id-sorted before any shuffle, so runs are invariant to manifest line order,
and with a single torch thread the step logs are bitwise reproducible.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DataError, Dataset, load_manifest, split_dataset
from .descriptions import DescriptionCache, TextEncoder
from .losses import total_loss_tensor
from .metrics import MetricsReport, report, save_probability_dump
from .network import ModelConfig, StickerTagger, load_checkpoint, save_checkpoint
from .reattention import sample_mask_rounds


@dataclass
class AblationFlags:
    no_lor: bool = False
    no_prompt: bool = False
    no_penalty: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def label(self) -> str:
        on = [name for name, v in self.to_dict().items() if v]
        return "+".join(on) if on else "full"


@dataclass
class TrainConfig:
    """Desk-scale defaults; ``full_scale`` switches to the full recipe
    (224x224, patch 32, fine-tuning learning rate)."""

    seed: int = 0
    lr: float = 3e-4
    weight_decay: float = 1e-2
    batch_size: int = 8
    epochs: int = 20
    image_size: int = 64
    patch_size: int = 16
    d_model: int = 128
    num_layers: int = 4
    num_heads: int = 4
    d_text: int = 64
    text_vocab_size: int = 512
    text_max_len: int = 32
    fusion_layers: int = 2
    mask_ratio: float = 0.4
    penalty_mode: str = "signed"
    aux_recon_weight: float = 0.0
    stop_grad_original: bool = False
    use_positions: bool = True
    prompt_mode: str = "per_sample"
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    ks: tuple[int, ...] = (1, 3, 5)
    threshold: float = 0.5
    eval_seed: int = 12345
    eval_path: str = "reconstructed"
    threads: int = 1
    ablations: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise DataError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise DataError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise DataError(f"epochs must be >= 0, got {self.epochs}")
        if self.penalty_mode not in ("signed", "hinge"):
            raise DataError(f"unknown penalty_mode {self.penalty_mode!r}")
        if self.eval_path not in ("reconstructed", "original"):
            raise DataError(f"unknown eval_path {self.eval_path!r}")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(image_size=224, patch_size=32, lr=1e-5)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split"] = list(self.split)
        d["ks"] = list(self.ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "ablations" in d and isinstance(d["ablations"], dict):
            d["ablations"] = AblationFlags(**d["ablations"])
        if "split" in d:
            d["split"] = tuple(d["split"])
        if "ks" in d:
            d["ks"] = tuple(d["ks"])
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def apply_ablation(flags: AblationFlags, model_config: ModelConfig) -> ModelConfig:
    """no_prompt shrinks the fusion sequence to [CLS] h [SEP]; no_lor and
    no_penalty act inside the training step, not on the architecture."""
    return dataclasses.replace(model_config, use_prompts=not flags.no_prompt)


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_val_cf1: float
    best_epoch: int
    final_val: MetricsReport | None


def _model_config(config: TrainConfig, num_tags: int) -> ModelConfig:
    base = ModelConfig(
        num_tags=num_tags,
        image_size=config.image_size,
        patch_size=config.patch_size,
        d_model=config.d_model,
        num_layers=config.num_layers,
        num_heads=config.num_heads,
        d_text=config.d_text,
        fusion_layers=config.fusion_layers,
        mask_ratio=config.mask_ratio,
        use_positions=config.use_positions,
        prompt_mode=config.prompt_mode,
    )
    return apply_ablation(config.ablations, base)


def _sorted_items(ds: Dataset) -> list:
    return sorted(ds.items, key=lambda it: it[0].id)


def _embed_descriptions(
    ds: Dataset, cache: DescriptionCache, config: TrainConfig
) -> dict[str, torch.Tensor]:
    """Precomputed (4, d_text) vectors per sticker id.

    The text encoder is built from the run seed and frozen; learnability of
    the prompt slots lives in the model's four projections.
    """
    missing = sorted(s.id for s, _ in ds.items if s.id not in cache)
    if missing:
        shown = ", ".join(missing[:20])
        more = f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""
        raise DataError(f"missing descriptions for {len(missing)} stickers: {shown}{more}")
    encoder = TextEncoder(
        d_text=config.d_text,
        vocab_size=config.text_vocab_size,
        max_len=config.text_max_len,
    )
    encoder.eval()
    out: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for sticker, _ in _sorted_items(ds):
            desc = cache.get(sticker.id)
            assert desc is not None
            out[sticker.id] = encoder(list(desc.fields()))
    return out


def _batch_tensors(
    items: list, desc_map: dict[str, torch.Tensor]
) -> tuple[torch.Tensor, torch.Tensor, list[set[int]]]:
    pixels = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(s.pixels)).float() for s, _ in items]
    )
    desc = torch.stack([desc_map[s.id] for s, _ in items])
    labels = [set(tags) for _, tags in items]
    return pixels, desc, labels


def predict_probs(
    model: StickerTagger,
    items: list,
    desc_map: dict[str, torch.Tensor],
    batch_size: int,
    eval_seed: int,
    no_lor: bool,
    eval_path: str = "reconstructed",
) -> np.ndarray:
    """Probability matrix over id-sorted items, masking seeded per batch."""
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            batch = items[start : start + batch_size]
            pixels, desc, _ = _batch_tensors(batch, desc_map)
            plan = None
            if not no_lor:
                plan = sample_mask_rounds(
                    model.config.n_patches, model.config.mask_ratio,
                    (eval_seed, start),
                )
            out = model.forward_batch(pixels, desc, plan, no_lor=no_lor)
            key = "probs_r" if eval_path == "reconstructed" else "probs_o"
            rows.append(out[key].numpy())
    return np.concatenate(rows, axis=0)


def train(
    config: TrainConfig,
    manifest_path: str | Path,
    vocab_path: str | Path,
    cache_path: str | Path,
    out_dir: str | Path,
) -> TrainResult:
    """AdamW optimization of the dual-path objective.

    Writes step and per-epoch validation lines to train_log.jsonl, the
    effective config to train_config.json, per-epoch validation probability
    dumps, and best (by validation top-1 CF1) plus last checkpoints.
    """
    torch.set_num_threads(config.threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ds = load_manifest(manifest_path, vocab_path, image_size=config.image_size)
    cache = DescriptionCache(cache_path)
    torch.manual_seed(config.seed)
    desc_map = _embed_descriptions(ds, cache, config)
    train_ds, val_ds, _ = split_dataset(ds, config.split, seed=config.seed)

    model_config = _model_config(config, num_tags=len(ds.vocabulary))
    model = StickerTagger(model_config)
    if model_config.prompt_mode == "global" and model_config.use_prompts:
        mean_desc = torch.stack(list(desc_map.values())).mean(dim=0)
        model.init_global_prompts(mean_desc)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    vocab_hash = ds.vocabulary.hash()
    flags = config.ablations

    (out / "train_config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    log_path = out / "train_log.jsonl"
    best_path = out / "checkpoint_best.pt"
    last_path = out / "checkpoint_last.pt"

    train_items = _sorted_items(train_ds)
    val_items = _sorted_items(val_ds)
    val_truths = [set(tags) for _, tags in val_items]

    best_cf1 = -1.0
    best_epoch = -1
    final_val: MetricsReport | None = None
    extra = {"ablation": flags.label(), "train_config": config.to_dict()}
    save_checkpoint(model, last_path, vocab_hash, extra=extra)
    if config.epochs == 0:
        save_checkpoint(model, best_path, vocab_hash, extra=extra)
        log_path.write_text("", encoding="utf-8")
        return TrainResult(
            best_checkpoint=best_path, last_checkpoint=last_path, log_path=log_path,
            best_val_cf1=0.0, best_epoch=-1, final_val=None,
        )

    with log_path.open("w", encoding="utf-8") as log:
        for epoch in range(config.epochs):
            model.train()
            perm = np.random.default_rng((config.seed, epoch)).permutation(len(train_items))
            for step, start in enumerate(range(0, len(perm), config.batch_size)):
                batch_idx = perm[start : start + config.batch_size]
                batch = [train_items[i] for i in batch_idx]
                pixels, desc, labels = _batch_tensors(batch, desc_map)
                plan = None
                if not flags.no_lor:
                    plan = sample_mask_rounds(
                        model_config.n_patches, config.mask_ratio,
                        (config.seed, epoch, step),
                    )
                fwd = model.forward_batch(
                    pixels, desc, plan,
                    no_lor=flags.no_lor,
                    stop_grad_original=config.stop_grad_original,
                )
                total, main, penalty = total_loss_tensor(
                    fwd["logits_r"], fwd["probs_r"], fwd["probs_o"], labels,
                    penalty_mode=config.penalty_mode,
                    no_penalty=flags.no_penalty,
                )
                if config.aux_recon_weight > 0 and not flags.no_lor:
                    total = total + config.aux_recon_weight * fwd["recon_l1"]
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                log.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "step": step,
                            "main": float(main.detach()),
                            "penalty": float(penalty.detach()),
                            "total": float(total.detach()),
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

            val_probs = predict_probs(
                model, val_items, desc_map, config.batch_size,
                config.eval_seed, flags.no_lor, config.eval_path,
            )
            dump_path = out / f"val_probs_epoch{epoch:03d}.bin"
            save_probability_dump(dump_path, val_probs, vocab_hash)
            val_report = report(
                val_probs, val_truths, ks=config.ks, threshold=config.threshold
            )
            final_val = val_report
            log.write(
                json.dumps(
                    {"epoch": epoch, "val": val_report.to_dict()}, sort_keys=True
                )
                + "\n"
            )
            top1_cf1 = val_report.per_k[1]["CF1"]
            save_checkpoint(model, last_path, vocab_hash, extra=extra)
            if top1_cf1 > best_cf1:
                best_cf1 = top1_cf1
                best_epoch = epoch
                save_checkpoint(model, best_path, vocab_hash, extra=extra)

    return TrainResult(
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        log_path=log_path,
        best_val_cf1=best_cf1,
        best_epoch=best_epoch,
        final_val=final_val,
    )


def evaluate(
    checkpoint_path: str | Path,
    manifest_path: str | Path,
    vocab_path: str | Path,
    cache_path: str | Path,
    split: str = "test",
    ks: tuple[int, ...] = (1, 3, 5),
    threshold: float = 0.5,
    eval_seed: int = 12345,
    eval_path: str = "reconstructed",
    batch_size: int = 8,
    split_seed: int | None = None,
    probs_out: str | Path | None = None,
) -> MetricsReport:
    """Batched inference on a stored checkpoint.

    ``split`` picks train/val/test (re-derived from the split seed recorded in
    the checkpoint sidecar unless overridden) or "all". The checkpoint's
    vocabulary hash must match the dataset's.
    """
    model, sidecar = load_checkpoint(checkpoint_path)
    config = TrainConfig.from_dict(sidecar.get("train_config", {}))
    ds = load_manifest(manifest_path, vocab_path, image_size=model.config.image_size)
    if ds.vocabulary.hash() != sidecar["vocab_hash"]:
        raise DataError(
            "vocabulary hash mismatch: checkpoint was trained on a different tag set"
        )
    if split == "all":
        part = ds
    else:
        seed = config.seed if split_seed is None else split_seed
        train_ds, val_ds, test_ds = split_dataset(ds, config.split, seed=seed)
        try:
            part = {"train": train_ds, "val": val_ds, "test": test_ds}[split]
        except KeyError:
            raise DataError(f"unknown split {split!r}") from None
    cache = DescriptionCache(cache_path)
    # replay the training-time text encoder: same seed, same first consumer
    # of the torch RNG stream, hence identical frozen weights
    torch.manual_seed(config.seed)
    desc_map = _embed_descriptions(ds, cache, config)
    items = _sorted_items(part)
    no_lor = config.ablations.no_lor
    probs = predict_probs(
        model, items, desc_map, batch_size, eval_seed, no_lor, eval_path
    )
    if probs_out is not None:
        save_probability_dump(probs_out, probs, ds.vocabulary.hash())
    truths = [set(tags) for _, tags in items]
    return report(probs, truths, ks=ks, threshold=threshold)
