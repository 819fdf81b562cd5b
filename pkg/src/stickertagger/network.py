"""Dual-path tagging network.

The reconstructed path runs patchify -> tokenize -> renewed attention ->
encode -> prompt sequence -> fusion -> softmax classifier; the original path
is the same pipeline with every attention weight forced to 1 (masking skipped
entirely). Both paths share all parameters, so the confidence gap between them
is attributable to the re-attention alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import DataError, StickerImage
from .descriptions import DescriptionEmbeddings
from .reattention import (
    MaskPlan,
    PatchEmbeddings,
    RenewedAttention,
    batch_renewed_attention,
    patchify,
    patchify_pixels,
    sample_mask_rounds,
)


@dataclass
class ModelConfig:
    num_tags: int
    image_size: int = 224
    patch_size: int = 32
    channels: int = 3
    d_model: int = 128
    num_layers: int = 4
    num_heads: int = 4
    d_text: int = 64
    fusion_layers: int = 2
    mask_ratio: float = 0.4
    use_positions: bool = True
    use_prompts: bool = True
    prompt_mode: str = "per_sample"  # or "global"

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise DataError(
                f"image size {self.image_size} not divisible by patch {self.patch_size}"
            )
        if self.prompt_mode not in ("per_sample", "global"):
            raise DataError(f"unknown prompt_mode {self.prompt_mode!r}")
        if self.num_tags < 2:
            raise DataError(f"need at least 2 tags, got {self.num_tags}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class TinyTransformerEncoder(nn.Module):
    """Sequence encoder with learned positional embeddings (sliced to the
    input length) and a pre-norm transformer stack. Dropout is zero so
    forward passes are deterministic."""

    def __init__(
        self,
        d_model: int,
        num_layers: int,
        num_heads: int,
        max_len: int,
        use_positions: bool = True,
    ) -> None:
        super().__init__()
        self.use_positions = use_positions
        self.positions = nn.Parameter(torch.randn(max_len, d_model) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=d_model,
            nhead=num_heads,
            dim_feedforward=4 * d_model,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=num_layers, enable_nested_tensor=False
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] > self.positions.shape[0]:
            raise DataError(
                f"sequence length {x.shape[1]} exceeds position table "
                f"{self.positions.shape[0]}"
            )
        if self.use_positions:
            x = x + self.positions[: x.shape[1]]
        return self.encoder(x)


@dataclass
class PromptSequence:
    """Token layout [CLS] S1..S4 h [SEP]; h sits at index 5."""

    cls: torch.Tensor  # (d_model,)
    prompts: torch.Tensor  # (4, d_model)
    image_token: torch.Tensor  # (d_model,)
    sep: torch.Tensor  # (d_model,)

    def __post_init__(self) -> None:
        if self.prompts.shape[0] != 4:
            raise DataError(f"expected 4 prompt slots, got {self.prompts.shape[0]}")

    def to_tensor(self) -> torch.Tensor:
        return torch.cat(
            [
                self.cls.unsqueeze(0),
                self.prompts,
                self.image_token.unsqueeze(0),
                self.sep.unsqueeze(0),
            ],
            dim=0,
        )


@dataclass
class TagDistribution:
    probs: torch.Tensor  # (m,)
    path: str  # "reconstructed" or "original"
    logits: torch.Tensor | None = None  # kept for log-space losses

    def __post_init__(self) -> None:
        if self.path not in ("reconstructed", "original"):
            raise DataError(f"unknown path {self.path!r}")
        with torch.no_grad():
            p = self.probs.detach()
            if float(p.min()) < 0:
                raise DataError("probabilities must be non-negative")
            if abs(float(p.sum()) - 1.0) > 1e-6:
                raise DataError(f"probabilities sum to {float(p.sum())}, not 1")


@dataclass
class Prediction:
    topc: list[int]
    probs: TagDistribution


def encode_image(tokens: PatchEmbeddings, encoder: nn.Module) -> torch.Tensor:
    """h = mean pool over the encoder's N output tokens."""
    out = encoder(tokens.tokens.unsqueeze(0)).squeeze(0)
    return out.mean(dim=0)


def build_prompt_sequence(
    desc_emb: DescriptionEmbeddings,
    h: torch.Tensor,
    projections: Sequence[nn.Linear],
    cls_token: torch.Tensor,
    sep_token: torch.Tensor,
) -> PromptSequence:
    """S_j = projection_j(description_j); slots stay in attribute order."""
    if len(projections) != 4:
        raise DataError(f"expected 4 prompt projections, got {len(projections)}")
    prompts = torch.stack(
        [projections[j](desc_emb.vectors[j]) for j in range(4)], dim=0
    )
    return PromptSequence(cls=cls_token, prompts=prompts, image_token=h, sep=sep_token)


def fuse(seq: PromptSequence, fusion: nn.Module) -> torch.Tensor:
    """Fusion transformer output at the [CLS] position."""
    out = fusion(seq.to_tensor().unsqueeze(0))
    return out[0, 0]


def classify(h_fused: torch.Tensor, head: nn.Linear, path: str = "reconstructed") -> TagDistribution:
    logits = head(h_fused)
    return TagDistribution(probs=torch.softmax(logits, dim=-1), path=path, logits=logits)


def topc_select(dist: TagDistribution, c: int) -> Prediction:
    """Ids of the C largest probabilities; ties resolve to the lower id."""
    m = dist.probs.shape[0]
    if not 1 <= c <= m:
        raise DataError(f"C must be in [1, {m}], got {c}")
    order = torch.argsort(dist.probs, descending=True, stable=True)
    return Prediction(topc=[int(i) for i in order[:c]], probs=dist)


class StickerTagger(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        d = config.d_model
        self.tokenizer = nn.Linear(config.patch_dim, d)
        self.mask_token = nn.Parameter(torch.full((config.patch_dim,), 0.5))
        self.encoder = TinyTransformerEncoder(
            d, config.num_layers, config.num_heads,
            max_len=config.n_patches, use_positions=config.use_positions,
        )
        self.recon_head = nn.Linear(d, config.patch_dim)
        # keep early reconstruction predictions inside (0,1) so the output
        # clamp starts inactive and gradients flow from step one
        with torch.no_grad():
            self.recon_head.bias.fill_(0.5)
            self.recon_head.weight.mul_(0.01)
        self.projections = nn.ModuleList([nn.Linear(config.d_text, d) for _ in range(4)])
        self.cls_token = nn.Parameter(torch.randn(d) * 0.02)
        self.sep_token = nn.Parameter(torch.randn(d) * 0.02)
        if config.prompt_mode == "global":
            self.global_prompts = nn.Parameter(torch.randn(4, d) * 0.02)
        else:
            self.global_prompts = None
        seq_len = 7 if config.use_prompts else 3
        self.fusion = TinyTransformerEncoder(
            d, config.fusion_layers, config.num_heads, max_len=seq_len, use_positions=True
        )
        self.head = nn.Linear(d, config.num_tags)

    def init_global_prompts(self, mean_desc_vectors: torch.Tensor) -> None:
        """Seeds the global prompt slots from corpus-mean description
        embeddings pushed through the projections."""
        if self.global_prompts is None:
            raise DataError("model was not built with prompt_mode='global'")
        if mean_desc_vectors.shape != (4, self.config.d_text):
            raise DataError(
                f"expected (4, {self.config.d_text}) mean description vectors, "
                f"got {tuple(mean_desc_vectors.shape)}"
            )
        with torch.no_grad():
            init = torch.stack(
                [self.projections[j](mean_desc_vectors[j]) for j in range(4)], dim=0
            )
            self.global_prompts.copy_(init)

    def _prompt_tokens(self, desc_vectors: torch.Tensor) -> torch.Tensor:
        """(B, 4, d_text) -> (B, 4, d_model) prompt slots."""
        if self.config.prompt_mode == "global":
            assert self.global_prompts is not None
            return self.global_prompts.unsqueeze(0).expand(desc_vectors.shape[0], -1, -1)
        return torch.stack(
            [self.projections[j](desc_vectors[:, j]) for j in range(4)], dim=1
        )

    def _fused(self, h: torch.Tensor, desc_vectors: torch.Tensor) -> torch.Tensor:
        """(B, d) image vectors + (B, 4, d_text) descriptions -> (B, d)."""
        b, d = h.shape
        cls = self.cls_token.unsqueeze(0).unsqueeze(0).expand(b, 1, d)
        sep = self.sep_token.unsqueeze(0).unsqueeze(0).expand(b, 1, d)
        if self.config.use_prompts:
            prompts = self._prompt_tokens(desc_vectors)
            seq = torch.cat([cls, prompts, h.unsqueeze(1), sep], dim=1)
        else:
            seq = torch.cat([cls, h.unsqueeze(1), sep], dim=1)
        return self.fusion(seq)[:, 0]

    def forward_batch(
        self,
        pixels: torch.Tensor,
        desc_vectors: torch.Tensor,
        plan: MaskPlan | None,
        no_lor: bool = False,
        stop_grad_original: bool = False,
    ) -> dict[str, torch.Tensor]:
        """Both paths over a batch.

        pixels: (B, C, H, W); desc_vectors: (B, 4, d_text). ``plan`` is the
        step's shared mask plan (ignored when no_lor). Returns logits and
        probabilities per path plus the attention weights and reconstruction
        L1. With no_lor the reconstructed path multiplies tokens by exactly
        1.0, so the two paths are bitwise identical.
        """
        patches = patchify_pixels(pixels, self.config.patch_size)
        tokens = self.tokenizer(patches)
        b, n, _ = tokens.shape
        if no_lor:
            weights = tokens.new_ones((b, n))
            sims = tokens.new_zeros((b, n))
            recon_l1 = tokens.new_zeros(())
        else:
            if plan is None:
                raise DataError("forward_batch needs a mask plan unless no_lor is set")
            weights, sims, recon_l1 = batch_renewed_attention(
                patches, plan, self.mask_token, self.tokenizer, self.encoder,
                self.recon_head,
            )
        reattended = tokens * weights.unsqueeze(-1)
        h_recon = self.encoder(reattended).mean(dim=1)
        h_orig = self.encoder(tokens).mean(dim=1)
        fused_recon = self._fused(h_recon, desc_vectors)
        fused_orig = self._fused(h_orig, desc_vectors)
        logits_r = self.head(fused_recon)
        logits_o = self.head(fused_orig)
        if stop_grad_original:
            logits_o = logits_o.detach()
        return {
            "logits_r": logits_r,
            "logits_o": logits_o,
            "probs_r": torch.softmax(logits_r, dim=-1),
            "probs_o": torch.softmax(logits_o, dim=-1),
            "weights": weights,
            "similarities": sims,
            "recon_l1": recon_l1,
        }

    def forward_dual(
        self,
        sticker: StickerImage,
        desc_emb: DescriptionEmbeddings,
        lor_seed: int = 0,
        no_lor: bool = False,
    ) -> tuple[TagDistribution, TagDistribution, RenewedAttention]:
        """Single-sample convenience wrapper around forward_batch."""
        grid = patchify(sticker, self.config.patch_size)
        plan = None
        if not no_lor:
            plan = sample_mask_rounds(grid.n_patches, self.config.mask_ratio, lor_seed)
        pixels = torch.from_numpy(np.ascontiguousarray(sticker.pixels)).float()
        out = self.forward_batch(
            pixels.unsqueeze(0), desc_emb.vectors.unsqueeze(0), plan, no_lor=no_lor
        )
        dist_r = TagDistribution(
            probs=out["probs_r"][0], path="reconstructed", logits=out["logits_r"][0]
        )
        dist_o = TagDistribution(
            probs=out["probs_o"][0], path="original", logits=out["logits_o"][0]
        )
        attention = RenewedAttention(
            weights=out["weights"][0], raw_similarities=out["similarities"][0]
        )
        return dist_r, dist_o, attention


def save_checkpoint(
    model: StickerTagger, path: str | Path, vocab_hash: str, extra: dict | None = None
) -> None:
    """Parameter archive plus a JSON sidecar holding config and vocab hash."""
    path = Path(path)
    torch.save(model.state_dict(), path)
    sidecar = {"config": model.config.to_dict(), "vocab_hash": vocab_hash}
    if extra:
        sidecar.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_checkpoint(path: str | Path) -> tuple[StickerTagger, dict]:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise DataError(f"checkpoint sidecar missing: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    model = StickerTagger(ModelConfig.from_dict(sidecar["config"]))
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, sidecar
