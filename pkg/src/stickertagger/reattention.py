"""Local re-attention over image patches.

Patches are masked in rounds, a prediction head regresses the raw pixels of
each masked patch from the corrupted sequence, and the per-patch reconstruction
similarity r_i (remapped cosine in pixel space, averaged over rounds) is turned
into a renewed attention weight 1 - r_i that rescales the patch tokens: patches
the model reconstructs poorly are exactly the locally distinctive ones, so they
get amplified. Round count is ceil(N/L) with guaranteed full coverage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .data import DataError, StickerImage


@dataclass
class PatchGrid:
    """N flattened pixel patches of dimension D = P*P*C, row-major order."""

    patches: torch.Tensor  # (N, D)
    patch_size: int
    channels: int

    def __post_init__(self) -> None:
        if self.patches.ndim != 2:
            raise DataError(f"patch grid must be 2-d, got shape {tuple(self.patches.shape)}")
        expected = self.patch_size * self.patch_size * self.channels
        if self.patches.shape[1] != expected:
            raise DataError(
                f"patch dimension {self.patches.shape[1]} != P*P*C = {expected}"
            )

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def dim(self) -> int:
        return self.patches.shape[1]


@dataclass
class MaskPlan:
    """Masking rounds: |M_k| = L positions each, union covering 0..N-1."""

    rounds: list[list[int]]
    masked_per_round: int
    n_patches: int
    mask_token: torch.Tensor | None = None  # learnable, pixel space (D,)

    def __post_init__(self) -> None:
        if self.masked_per_round < 1:
            raise DataError("mask plan needs L >= 1")
        covered: set[int] = set()
        for k, positions in enumerate(self.rounds):
            if len(set(positions)) != self.masked_per_round:
                raise DataError(
                    f"round {k} has {len(set(positions))} distinct positions, "
                    f"expected {self.masked_per_round}"
                )
            if any(p < 0 or p >= self.n_patches for p in positions):
                raise DataError(f"round {k} has out-of-range positions")
            covered.update(positions)
        if covered != set(range(self.n_patches)):
            missing = sorted(set(range(self.n_patches)) - covered)
            raise DataError(f"mask rounds leave positions uncovered: {missing}")


@dataclass
class RenewedAttention:
    """Per-patch weights r_hat = 1 - r, where r is the mean reconstruction
    similarity of the patch across rounds."""

    weights: torch.Tensor  # (N,)
    raw_similarities: torch.Tensor  # (N,)

    def __post_init__(self) -> None:
        with torch.no_grad():
            w = self.weights.detach()
            r = self.raw_similarities.detach()
            if w.shape != r.shape:
                raise DataError("weights and similarities differ in length")
            if not torch.allclose(w, 1.0 - r, atol=1e-6):
                raise DataError("renewed attention must satisfy weight = 1 - similarity")
            if float(r.min()) < -1e-6 or float(r.max()) > 1 + 1e-6:
                raise DataError("similarities must lie in [0, 1]")


@dataclass
class PatchEmbeddings:
    tokens: torch.Tensor  # (N, d_model)

    @property
    def n_patches(self) -> int:
        return self.tokens.shape[0]


def patchify_pixels(pixels: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(..., C, H, W) -> (..., N, P*P*C), patches in row-major order."""
    *lead, c, h, w = pixels.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise DataError(f"image {h}x{w} not divisible by patch size {p}")
    x = pixels.reshape(*lead, c, h // p, p, w // p, p)
    # (..., C, gh, P, gw, P) -> (..., gh, gw, C, P, P)
    nd = x.ndim
    x = x.permute(*range(nd - 5), nd - 4, nd - 2, nd - 5, nd - 3, nd - 1)
    return x.reshape(*lead, (h // p) * (w // p), c * p * p)


def patchify(image: StickerImage, patch_size: int) -> PatchGrid:
    pixels = torch.from_numpy(np.ascontiguousarray(image.pixels)).float()
    return PatchGrid(
        patches=patchify_pixels(pixels, patch_size),
        patch_size=patch_size,
        channels=image.channels,
    )


def tokenize(grid: PatchGrid, projection: nn.Linear) -> PatchEmbeddings:
    """Per-patch linear map D -> d_model."""
    if projection.in_features != grid.dim:
        raise DataError(
            f"projection expects {projection.in_features} inputs, patches have {grid.dim}"
        )
    return PatchEmbeddings(tokens=projection(grid.patches))


def sample_mask_rounds(
    n_patches: int, mask_ratio: float, seed: int | Sequence[int]
) -> MaskPlan:
    """ceil(N/L) rounds of L = ceil(ratio*N) positions, drawn from the
    not-yet-covered set first so the union always covers every patch."""
    if not 0.0 < mask_ratio < 1.0:
        raise DataError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
    n = n_patches
    masked = math.ceil(mask_ratio * n)
    n_rounds = math.ceil(n / masked)
    rng = np.random.default_rng(seed)
    uncovered = set(range(n))
    rounds: list[list[int]] = []
    for _ in range(n_rounds):
        pool = sorted(uncovered)
        if len(pool) >= masked:
            picks = rng.choice(pool, size=masked, replace=False).tolist()
        else:
            rest = sorted(set(range(n)) - uncovered)
            extra = rng.choice(rest, size=masked - len(pool), replace=False).tolist()
            picks = pool + extra
        picks = sorted(int(p) for p in picks)
        uncovered -= set(picks)
        rounds.append(picks)
    return MaskPlan(rounds=rounds, masked_per_round=masked, n_patches=n)


def corrupt(grid: PatchGrid, positions: Sequence[int], mask_token: torch.Tensor) -> PatchGrid:
    """Replaces the given patch rows with the mask token; the rest are
    bit-identical to the input."""
    if mask_token.shape != (grid.dim,):
        raise DataError(
            f"mask token has shape {tuple(mask_token.shape)}, expected ({grid.dim},)"
        )
    out = grid.patches.clone()
    idx = sorted(set(int(p) for p in positions))
    if any(p < 0 or p >= grid.n_patches for p in idx):
        raise DataError("mask positions out of range")
    if idx:
        out[idx] = mask_token
    return PatchGrid(patches=out, patch_size=grid.patch_size, channels=grid.channels)


def reconstruct(
    corrupted: PatchGrid,
    positions: Sequence[int],
    projection: nn.Linear,
    encoder: Callable[[torch.Tensor], torch.Tensor],
    head: nn.Linear,
) -> torch.Tensor:
    """Predicted raw pixels, clamped to [0,1], for the masked positions.

    The corrupted grid runs through the shared tokenizer and patch-sequence
    encoder; the head regresses d_model -> D at each masked slot.
    """
    tokens = tokenize(corrupted, projection).tokens
    encoded = encoder(tokens.unsqueeze(0)).squeeze(0)
    idx = sorted(set(int(p) for p in positions))
    predictions = head(encoded[idx])
    return predictions.clamp(0.0, 1.0)


def patch_similarity(predicted: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """r = (1 + cosine)/2 in pixel space; a zero vector on either side gives
    r = 0 (maximal renewed attention for patches we cannot compare)."""
    if predicted.shape != original.shape:
        raise DataError("similarity inputs differ in shape")
    return _similarity_rows(predicted.unsqueeze(0), original.unsqueeze(0)).squeeze(0)


def _similarity_rows(predicted: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """Row-wise remapped cosine for (..., D) stacks; differentiable."""
    dot = (predicted * original).sum(dim=-1)
    norm_p = predicted.norm(dim=-1)
    norm_o = original.norm(dim=-1)
    denom = norm_p * norm_o
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    cos = torch.where(denom > 0, dot / safe, torch.full_like(dot, -1.0))
    return ((1.0 + cos) / 2.0).clamp(0.0, 1.0)


def renewed_attention(
    plan: MaskPlan, per_round_similarities: list[torch.Tensor]
) -> RenewedAttention:
    """Aggregates per-round similarities (each aligned with the round's sorted
    positions) into mean r_i and weights 1 - r_i."""
    if len(per_round_similarities) != len(plan.rounds):
        raise DataError(
            f"{len(per_round_similarities)} similarity vectors for "
            f"{len(plan.rounds)} rounds"
        )
    n = plan.n_patches
    ref = per_round_similarities[0]
    total = torch.zeros(n, dtype=ref.dtype, device=ref.device)
    count = torch.zeros(n, dtype=ref.dtype, device=ref.device)
    for positions, sims in zip(plan.rounds, per_round_similarities):
        idx = sorted(set(int(p) for p in positions))
        if sims.shape != (len(idx),):
            raise DataError(
                f"similarity vector shape {tuple(sims.shape)} does not match "
                f"{len(idx)} masked positions"
            )
        index = torch.tensor(idx, dtype=torch.long, device=ref.device)
        total = total.index_add(0, index, sims)
        count = count.index_add(0, index, torch.ones_like(sims))
    if (count == 0).any():
        missing = torch.nonzero(count == 0).flatten().tolist()
        raise DataError(f"positions never masked, no similarity observation: {missing}")
    raw = total / count
    return RenewedAttention(weights=1.0 - raw, raw_similarities=raw)


def apply_attention(embeddings: PatchEmbeddings, attention: RenewedAttention) -> PatchEmbeddings:
    if attention.weights.shape[0] != embeddings.n_patches:
        raise DataError(
            f"{attention.weights.shape[0]} weights for {embeddings.n_patches} tokens"
        )
    return PatchEmbeddings(tokens=embeddings.tokens * attention.weights.unsqueeze(-1))


def batch_renewed_attention(
    patches: torch.Tensor,
    plan: MaskPlan,
    mask_token: torch.Tensor,
    projection: nn.Linear,
    encoder: Callable[[torch.Tensor], torch.Tensor],
    head: nn.Linear,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Vectorized rounds over a batch sharing one mask plan.

    patches: (B, N, D). Returns (weights (B, N), similarities (B, N),
    reconstruction L1 over all rounds and masked slots). Gradients flow into
    the mask token, tokenizer, encoder, and head through both the similarity
    and the optional reconstruction loss.
    """
    b, n, d = patches.shape
    total = patches.new_zeros((b, n))
    count = patches.new_zeros((b, n))
    l1_sum = patches.new_zeros(())
    l1_count = 0
    for positions in plan.rounds:
        idx = torch.tensor(sorted(positions), dtype=torch.long, device=patches.device)
        corrupted = patches.clone()
        corrupted[:, idx] = mask_token
        tokens = projection(corrupted)
        encoded = encoder(tokens)
        predicted = head(encoded[:, idx]).clamp(0.0, 1.0)
        original = patches[:, idx]
        sims = _similarity_rows(predicted, original)  # (B, |M|)
        total = total.index_add(1, idx, sims)
        count = count.index_add(1, idx, torch.ones_like(sims))
        l1_sum = l1_sum + (predicted - original).abs().sum()
        l1_count += predicted.numel()
    raw = total / count
    weights = 1.0 - raw
    recon_l1 = l1_sum / max(l1_count, 1)
    return weights, raw, recon_l1
