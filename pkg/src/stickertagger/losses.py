"""Training objective: multi-positive softmax loss plus confidence penalty.

The main term sums -ln p over every correct tag of every item. The penalty
rewards the reconstructed path for beating the original path on correct tags;
the signed difference is the default, with a hinge variant (penalizing only
confidence drops) behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .data import DataError
from .network import TagDistribution


@dataclass
class LossBreakdown:
    main: float
    penalty: float
    total: float

    def __post_init__(self) -> None:
        if self.main < 0:
            raise DataError(f"main loss must be non-negative, got {self.main}")
        if abs(self.total - (self.main + self.penalty)) > 1e-9:
            raise DataError("total must equal main + penalty")


def _check_labels(labels: Sequence[set[int]], batch: int, num_tags: int) -> None:
    if len(labels) != batch:
        raise DataError(f"{len(labels)} label sets for a batch of {batch}")
    for i, y in enumerate(labels):
        if not y:
            raise DataError(f"item {i} has an empty label set")
        if any(j < 0 or j >= num_tags for j in y):
            raise DataError(f"item {i} has tag ids outside [0, {num_tags})")


def main_loss_tensor(logits_r: torch.Tensor, labels: Sequence[set[int]]) -> torch.Tensor:
    """-(1/n) sum_i sum_{j in y_i} ln p_ij, from logits via log-softmax."""
    _check_labels(labels, logits_r.shape[0], logits_r.shape[1])
    log_probs = torch.log_softmax(logits_r, dim=-1)
    total = logits_r.new_zeros(())
    for i, y in enumerate(labels):
        idx = torch.tensor(sorted(y), dtype=torch.long, device=logits_r.device)
        total = total - log_probs[i, idx].sum()
    return total / logits_r.shape[0]


def penalty_loss_tensor(
    probs_r: torch.Tensor,
    probs_o: torch.Tensor,
    labels: Sequence[set[int]],
    mode: str = "signed",
) -> torch.Tensor:
    """Signed: -(1/n) sum (p^r - p^o) over correct tags. Hinge: mean of
    max(0, p^o - p^r) over the same terms."""
    if probs_r.shape != probs_o.shape:
        raise DataError(
            f"path shapes differ: {tuple(probs_r.shape)} vs {tuple(probs_o.shape)}"
        )
    if mode not in ("signed", "hinge"):
        raise DataError(f"unknown penalty mode {mode!r}")
    _check_labels(labels, probs_r.shape[0], probs_r.shape[1])
    total = probs_r.new_zeros(())
    for i, y in enumerate(labels):
        idx = torch.tensor(sorted(y), dtype=torch.long, device=probs_r.device)
        gap = probs_r[i, idx] - probs_o[i, idx]
        if mode == "signed":
            total = total - gap.sum()
        else:
            total = total + torch.clamp(-gap, min=0.0).sum()
    return total / probs_r.shape[0]


def total_loss_tensor(
    logits_r: torch.Tensor,
    probs_r: torch.Tensor,
    probs_o: torch.Tensor,
    labels: Sequence[set[int]],
    penalty_mode: str = "signed",
    no_penalty: bool = False,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (total, main, penalty) tensors; no_penalty zeroes the penalty
    term entirely (it is not computed)."""
    main = main_loss_tensor(logits_r, labels)
    if no_penalty:
        penalty = logits_r.new_zeros(())
    else:
        penalty = penalty_loss_tensor(probs_r, probs_o, labels, mode=penalty_mode)
    return main + penalty, main, penalty


def _stack_logits(dists: Sequence[TagDistribution]) -> torch.Tensor:
    rows = []
    for dist in dists:
        if dist.logits is not None:
            rows.append(dist.logits)
        else:
            rows.append(torch.log(dist.probs))
    return torch.stack(rows, dim=0)


def main_loss(dists_r: Sequence[TagDistribution], labels: Sequence[set[int]]) -> float:
    return float(main_loss_tensor(_stack_logits(dists_r), labels).detach())


def penalty_loss(
    dists_r: Sequence[TagDistribution],
    dists_o: Sequence[TagDistribution],
    labels: Sequence[set[int]],
    mode: str = "signed",
) -> float:
    if len(dists_r) != len(dists_o):
        raise DataError(f"{len(dists_r)} reconstructed vs {len(dists_o)} original items")
    probs_r = torch.stack([d.probs for d in dists_r], dim=0)
    probs_o = torch.stack([d.probs for d in dists_o], dim=0)
    return float(penalty_loss_tensor(probs_r, probs_o, labels, mode=mode).detach())


def total_loss(
    dists_r: Sequence[TagDistribution],
    dists_o: Sequence[TagDistribution],
    labels: Sequence[set[int]],
    penalty_mode: str = "signed",
    no_penalty: bool = False,
) -> LossBreakdown:
    main = main_loss(dists_r, labels)
    penalty = 0.0 if no_penalty else penalty_loss(dists_r, dists_o, labels, penalty_mode)
    return LossBreakdown(main=main, penalty=penalty, total=main + penalty)
