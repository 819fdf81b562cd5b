"""Sticker dataset representation: manifest loading, splitting, corpus statistics.

A corpus lives on disk as a JSON-Lines manifest (one record per sticker:
``{"id", "image", "tags", "meta"}``, image path relative to the manifest) plus
a plain-text tag vocabulary, one tag per line, line number = tag id.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class DataError(Exception):
    """Raised for malformed manifests, vocabularies, or dataset contracts."""


@dataclass
class StickerImage:
    """One sticker: pixel tensor of shape (C, H, W) with values in [0, 1]."""

    id: str
    pixels: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class TagVocabulary:
    """Ordered tag list; tag ids are 0..m-1 by position."""

    tags: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        if len(self.tags) < 2:
            raise DataError(f"vocabulary needs at least 2 tags, got {len(self.tags)}")
        if len(set(self.tags)) != len(self.tags):
            dupes = [t for t, c in Counter(self.tags).items() if c > 1]
            raise DataError(f"duplicate tags in vocabulary: {dupes}")
        self.index = {tag: i for i, tag in enumerate(self.tags)}

    def __len__(self) -> int:
        return len(self.tags)

    @classmethod
    def from_file(cls, path: str | Path) -> "TagVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        tags = [ln for ln in lines if ln.strip()]
        if len(tags) != len(lines):
            raise DataError(f"blank lines in vocabulary file {path}")
        return cls(tags)

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tags) + "\n", encoding="utf-8")

    def hash(self) -> str:
        """Stable digest used to pair checkpoints with the vocabulary they saw."""
        h = hashlib.sha256()
        for tag in self.tags:
            h.update(tag.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


@dataclass
class Dataset:
    """Items are (sticker, tag-id set) pairs over a shared vocabulary."""

    items: list[tuple[StickerImage, set[int]]]
    vocabulary: TagVocabulary

    def __post_init__(self) -> None:
        m = len(self.vocabulary)
        seen_ids = set()
        for sticker, tag_ids in self.items:
            if not tag_ids:
                raise DataError(f"item {sticker.id!r} has no tags")
            bad = [t for t in tag_ids if not 0 <= t < m]
            if bad:
                raise DataError(f"item {sticker.id!r} has tag ids {bad} outside 0..{m - 1}")
            if sticker.id in seen_ids:
                raise DataError(f"duplicate item id {sticker.id!r}")
            seen_ids.add(sticker.id)

    def __len__(self) -> int:
        return len(self.items)


def _decode_image(path: Path, image_size: int | tuple[int, int] | None) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if image_size is not None:
            if isinstance(image_size, int):
                image_size = (image_size, image_size)
            h, w = image_size
            if (img.height, img.width) != (h, w):
                img = img.resize((w, h), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))  # (C, H, W)


def load_manifest(
    manifest_path: str | Path,
    vocab_path: str | Path,
    *,
    image_size: int | tuple[int, int] | None = 224,
) -> Dataset:
    """Load a JSON-Lines manifest into a Dataset.

    Images are decoded, bilinearly resized to ``image_size`` (``None`` keeps the
    native resolution), and scaled to [0, 1]. Unknown tags and empty tag lists
    are hard errors; a missing image file raises an error naming the item id.
    """
    manifest_path = Path(manifest_path)
    vocab = TagVocabulary.from_file(vocab_path)
    base = manifest_path.parent
    items: list[tuple[StickerImage, set[int]]] = []
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest_path}:{lineno}: invalid JSON: {exc}") from exc
        item_id = rec["id"]
        tags = rec.get("tags", [])
        if not tags:
            raise DataError(f"item {item_id!r} has an empty tag list")
        tag_ids = set()
        for tag in tags:
            if tag not in vocab.index:
                raise DataError(f"item {item_id!r} uses tag {tag!r} not present in the vocabulary")
            tag_ids.add(vocab.index[tag])
        image_path = base / rec["image"]
        if not image_path.exists():
            raise DataError(f"item {item_id!r}: image file not found: {image_path}")
        pixels = _decode_image(image_path, image_size)
        meta = {str(k): str(v) for k, v in rec.get("meta", {}).items()}
        items.append((StickerImage(id=item_id, pixels=pixels, meta=meta), tag_ids))
    return Dataset(items=items, vocabulary=vocab)


def write_manifest(ds: Dataset, manifest_path: str | Path, images_dir: str | Path) -> None:
    """Write a dataset back to disk: PNG per item plus a JSON-Lines manifest.

    Records are emitted in id-sorted order so repeated writes are byte-identical.
    """
    manifest_path = Path(manifest_path)
    images_dir = Path(images_dir)
    images_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for sticker, tag_ids in sorted(ds.items, key=lambda it: it[0].id):
        arr = np.clip(np.round(sticker.pixels * 255.0), 0, 255).astype(np.uint8)
        img = Image.fromarray(arr.transpose(1, 2, 0))
        rel = Path(images_dir.name) / f"{sticker.id}.png"
        img.save(images_dir / f"{sticker.id}.png", format="PNG")
        rec = {
            "id": sticker.id,
            "image": str(rel),
            "tags": [ds.vocabulary.tags[t] for t in sorted(tag_ids)],
            "meta": sticker.meta,
        }
        lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def split_dataset(
    ds: Dataset, ratios: tuple[float, float, float], seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint train/val/test partition.

    Val and test get floor(n * ratio) items; the remainder goes to train. Items
    are id-sorted before the seeded shuffle, so the split is a pure function of
    (item ids, seed) and invariant to manifest line order.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError(f"ratios must be three positive reals, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got sum {sum(ratios)!r}")
    n = len(ds)
    if n < 3:
        raise DataError(f"need at least 3 items to split, got {n}")
    sizes = [math.floor(n * r) for r in ratios]
    sizes[0] += n - sum(sizes)  # remainder to train
    order = sorted(range(n), key=lambda i: ds.items[i][0].id)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ds.items[order[p]] for p in perm]
    splits = []
    start = 0
    for size in sizes:
        splits.append(Dataset(items=shuffled[start : start + size], vocabulary=ds.vocabulary))
        start += size
    return splits[0], splits[1], splits[2]


@dataclass
class CorpusStats:
    per_tag_counts: dict[str, int]
    tags_per_sticker_pct: dict[int, float]
    mean_tag_length_words: float
    n_items: int


def tag_stats(ds: Dataset) -> CorpusStats:
    """Per-tag sample counts, tags-per-sticker distribution (percent), and the
    mean vocabulary tag length in whitespace-delimited words."""
    if not ds.items:
        raise DataError("tag_stats needs a non-empty dataset")
    per_tag = Counter()
    per_count = Counter()
    for _, tag_ids in ds.items:
        per_count[len(tag_ids)] += 1
        for t in tag_ids:
            per_tag[ds.vocabulary.tags[t]] += 1
    n = len(ds.items)
    pct = {k: 100.0 * c / n for k, c in sorted(per_count.items())}
    mean_len = float(np.mean([len(tag.split()) for tag in ds.vocabulary.tags]))
    return CorpusStats(
        per_tag_counts=dict(per_tag),
        tags_per_sticker_pct=pct,
        mean_tag_length_words=mean_len,
        n_items=n,
    )
