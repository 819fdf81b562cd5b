"""Procedural sticker corpus generator.

Images compose up to three attribute groups (a base shape, a paint color, an
overlay glyph) and the ground-truth tags are exactly the attribute names
present, so the multi-tag structure is compositional rather than noise. The
whole corpus is a pure function of (config, seed): rerunning writes
byte-identical images and manifest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import DataError, Dataset, StickerImage, TagVocabulary

SHAPE_POOL = ["circle", "square", "triangle", "star", "hexagon", "diamond"]
COLOR_POOL = ["red", "green", "blue", "yellow", "purple", "orange"]
GLYPH_POOL = ["dots", "stripes", "cross", "ring", "zigzag", "grid"]

_RGB = {
    "red": (210, 45, 45),
    "green": (45, 165, 60),
    "blue": (50, 85, 210),
    "yellow": (225, 195, 35),
    "purple": (140, 60, 185),
    "orange": (230, 130, 30),
}
_NEUTRAL = (128, 128, 128)


@dataclass
class GeneratorConfig:
    """Knobs for the synthetic corpus.

    ``tag_count`` is the vocabulary size m. With the default attribute pools the
    first m names are allocated round-robin across (shape, color, glyph); when
    explicit pools are given, m must cover them all. Ids beyond the attribute
    inventory become filler tags that never occur, mimicking long-tail classes.
    """

    n_items: int = 100
    tag_count: int = 12
    image_size: int = 64
    mixture: tuple[float, ...] = (0.5, 0.3, 0.2)  # P(k tags), k = 1..3
    shapes: list[str] | None = None
    colors: list[str] | None = None
    glyphs: list[str] | None = None
    out_dir: str | None = None

    def resolve_inventory(self) -> tuple[list[str], list[str], list[str], list[str]]:
        """Returns (shapes, colors, glyphs, full vocab of tag_count names)."""
        explicit = self.shapes is not None or self.colors is not None or self.glyphs is not None
        if explicit:
            shapes = list(self.shapes or [])
            colors = list(self.colors or [])
            glyphs = list(self.glyphs or [])
            inventory = len(shapes) + len(colors) + len(glyphs)
            if self.tag_count < inventory:
                raise DataError(
                    f"tag_count {self.tag_count} is smaller than the attribute "
                    f"inventory ({inventory} attributes)"
                )
        else:
            pools = [list(SHAPE_POOL), list(COLOR_POOL), list(GLYPH_POOL)]
            if self.tag_count > sum(len(p) for p in pools):
                raise DataError(
                    f"tag_count {self.tag_count} exceeds the "
                    f"{sum(len(p) for p in pools)} nameable default attributes"
                )
            shapes, colors, glyphs = [], [], []
            groups = [shapes, colors, glyphs]
            gi = 0
            for _ in range(self.tag_count):
                # round-robin allocation, skipping exhausted pools
                while not pools[gi % 3]:
                    gi += 1
                groups[gi % 3].append(pools[gi % 3].pop(0))
                gi += 1
        vocab = shapes + colors + glyphs
        vocab += [f"unused{i:02d}" for i in range(self.tag_count - len(vocab))]
        return shapes, colors, glyphs, vocab


def _star(cx: float, cy: float, r: float, rot: float) -> list[tuple[float, float]]:
    pts = []
    for i in range(10):
        rad = r if i % 2 == 0 else r * 0.45
        a = rot + i * math.pi / 5.0
        pts.append((cx + rad * math.sin(a), cy - rad * math.cos(a)))
    return pts


def _ngon(cx: float, cy: float, r: float, n: int, rot: float) -> list[tuple[float, float]]:
    return [
        (cx + r * math.sin(rot + 2 * math.pi * i / n), cy - r * math.cos(rot + 2 * math.pi * i / n))
        for i in range(n)
    ]


def _draw_shape(draw: ImageDraw.ImageDraw, name: str, cx, cy, r, rot, fill) -> None:
    if name == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif name == "square":
        draw.polygon(_ngon(cx, cy, r, 4, rot + math.pi / 4), fill=fill)
    elif name == "triangle":
        draw.polygon(_ngon(cx, cy, r, 3, rot), fill=fill)
    elif name == "star":
        draw.polygon(_star(cx, cy, r, rot), fill=fill)
    elif name == "hexagon":
        draw.polygon(_ngon(cx, cy, r, 6, rot), fill=fill)
    elif name == "diamond":
        pts = [(cx, cy - r), (cx + 0.62 * r, cy), (cx, cy + r), (cx - 0.62 * r, cy)]
        draw.polygon(pts, fill=fill)
    else:
        raise DataError(f"no renderer for shape {name!r}")


def _draw_blob(draw: ImageDraw.ImageDraw, rng: np.random.Generator, size: int, fill) -> None:
    # colored wash used when a paint color is present without a base shape
    cx = size * (0.38 + 0.24 * rng.random())
    cy = size * (0.38 + 0.24 * rng.random())
    for _ in range(4):
        rx = size * (0.16 + 0.14 * rng.random())
        ry = size * (0.16 + 0.14 * rng.random())
        ox = cx + size * 0.14 * (rng.random() - 0.5)
        oy = cy + size * 0.14 * (rng.random() - 0.5)
        draw.ellipse([ox - rx, oy - ry, ox + rx, oy + ry], fill=fill)


def _draw_glyph(draw: ImageDraw.ImageDraw, name: str, rng: np.random.Generator, size: int) -> None:
    ink = (25, 25, 30)
    s = size
    jx = s * 0.06 * (rng.random() - 0.5)
    jy = s * 0.06 * (rng.random() - 0.5)
    centers = [
        (s * fx + jx, s * fy + jy)
        for fx in (0.25, 0.5, 0.75)
        for fy in (0.25, 0.5, 0.75)
    ]
    r = s * 0.045
    if name == "dots":
        for cx, cy in centers:
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=ink)
    elif name == "stripes":
        step = s / 5.0
        off = step * rng.random()
        for i in range(-5, 11):
            x0 = i * step + off
            draw.line([x0, 0, x0 - s * 0.5, s], fill=ink, width=max(1, int(s * 0.03)))
    elif name == "cross":
        arm = r * 1.6
        w = max(1, int(s * 0.025))
        for cx, cy in centers:
            draw.line([cx - arm, cy, cx + arm, cy], fill=ink, width=w)
            draw.line([cx, cy - arm, cx, cy + arm], fill=ink, width=w)
    elif name == "ring":
        for cx, cy in centers:
            rr = r * 1.7
            draw.ellipse([cx - rr, cy - rr, cx + rr, cy + rr], outline=ink,
                         width=max(1, int(s * 0.025)))
    elif name == "zigzag":
        step = s / 6.0
        off = step * rng.random()
        for row in range(1, 6, 2):
            y = row * s / 6.0 + off * 0.5
            pts = []
            for i in range(7):
                pts.append((i * step, y + (step * 0.6 if i % 2 else -step * 0.6)))
            draw.line(pts, fill=ink, width=max(1, int(s * 0.03)))
    elif name == "grid":
        step = s / 4.0
        off = step * 0.5 * rng.random()
        w = max(1, int(s * 0.02))
        for i in range(5):
            draw.line([i * step + off, 0, i * step + off, s], fill=ink, width=w)
            draw.line([0, i * step + off, s, i * step + off], fill=ink, width=w)
    else:
        raise DataError(f"no renderer for glyph {name!r}")


def _render(
    rng: np.random.Generator,
    size: int,
    shape: str | None,
    color: str | None,
    glyph: str | None,
) -> np.ndarray:
    bg = 236 + int(rng.integers(0, 16))
    img = Image.new("RGB", (size, size), (bg, bg, bg))
    draw = ImageDraw.Draw(img)
    paint = _RGB.get(color, _NEUTRAL) if color else _NEUTRAL
    if shape is not None:
        cx = size * (0.40 + 0.20 * rng.random())
        cy = size * (0.40 + 0.20 * rng.random())
        r = size * (0.22 + 0.12 * rng.random())
        rot = float(rng.random()) * 0.5
        _draw_shape(draw, shape, cx, cy, r, rot, paint)
    elif color is not None:
        _draw_blob(draw, rng, size, paint)
    if glyph is not None:
        _draw_glyph(draw, glyph, rng, size)
    return np.asarray(img, dtype=np.uint8)


def generate_synthetic(config: GeneratorConfig, seed: int) -> Dataset:
    """Render the corpus and write manifest.jsonl, vocab.txt, and images/.

    Identical (config, seed) pairs produce byte-identical files. Tags per item
    follow ``config.mixture`` over how many attribute groups appear; the groups
    themselves are drawn uniformly without replacement.
    """
    if config.out_dir is None:
        raise DataError("generator config needs out_dir")
    if config.n_items < 1:
        raise DataError(f"n_items must be >= 1, got {config.n_items}")
    shapes, colors, glyphs, vocab_names = config.resolve_inventory()
    vocab = TagVocabulary(vocab_names)
    groups = [("shape", shapes), ("color", colors), ("glyph", glyphs)]
    groups = [(name, pool) for name, pool in groups if pool]
    if not groups:
        raise DataError("attribute inventory is empty")

    mixture = np.asarray(config.mixture, dtype=np.float64)
    if mixture.ndim != 1 or (mixture < 0).any() or mixture.sum() <= 0:
        raise DataError(f"invalid mixture {config.mixture}")
    kmax = min(len(mixture), len(groups))
    mixture = mixture[:kmax] / mixture[:kmax].sum()

    out = Path(config.out_dir)
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width = max(5, len(str(config.n_items - 1)))

    items: list[tuple[StickerImage, set[int]]] = []
    lines: list[str] = []
    for i in range(config.n_items):
        k = int(rng.choice(kmax, p=mixture)) + 1
        chosen = sorted(rng.choice(len(groups), size=k, replace=False).tolist())
        attrs: dict[str, str] = {}
        for gi in chosen:
            gname, pool = groups[gi]
            attrs[gname] = pool[int(rng.integers(0, len(pool)))]
        pixels_u8 = _render(
            rng,
            config.image_size,
            attrs.get("shape"),
            attrs.get("color"),
            attrs.get("glyph"),
        )
        item_id = f"synth-{i:0{width}d}"
        rel = Path("images") / f"{item_id}.png"
        Image.fromarray(pixels_u8).save(out / rel, format="PNG")
        tag_names = sorted(attrs.values(), key=vocab.index.__getitem__)
        rec = {
            "id": item_id,
            "image": str(rel),
            "tags": tag_names,
            "meta": dict(sorted(attrs.items())),
        }
        lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
        pixels = np.ascontiguousarray(pixels_u8.astype(np.float32).transpose(2, 0, 1) / 255.0)
        sticker = StickerImage(id=item_id, pixels=pixels, meta=rec["meta"])
        items.append((sticker, {vocab.index[t] for t in tag_names}))

    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    vocab.to_file(out / "vocab.txt")
    return Dataset(items=items, vocabulary=vocab)
