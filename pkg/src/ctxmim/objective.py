"""Reconstruction, prediction and context-consistency losses.

All three are masked mean-absolute errors: the sum of absolute differences
over the elements of masked patches divided by the number of such elements.
For a batch, every image masks the same number of patches, so pooling the
sums is the same as averaging per-image losses.

The consistency term compares the reconstructive prediction against a
*detached* copy of the context prediction, so its gradient reaches the
shared weights only through the masked branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .backbone import (
    DTYPE,
    Backbone,
    BranchOutput,
    as_mask_tensor,
    forward_context,
    forward_reconstructive,
)
from .config import BackboneConfig, LossWeights
from .errors import DimensionError, EmptySupportError
from .patchgrid import PatchSequence, patchify

__all__ = [
    "LossBreakdown",
    "l1_masked",
    "loss_re",
    "loss_pr",
    "loss_cc",
    "total_loss",
    "compute_losses",
    "grad_total",
    "loss_and_grads",
]


@dataclass(frozen=True)
class LossBreakdown:
    l_re: float
    l_pr: float
    l_cc: float
    total: float

    @classmethod
    def from_components(cls, l_re: float, l_pr: float, l_cc: float, weights: LossWeights):
        total = weights.re * l_re + weights.pr * l_pr + weights.cc * l_cc
        return cls(float(l_re), float(l_pr), float(l_cc), float(total))

    def as_dict(self) -> dict[str, float]:
        return {"l_re": self.l_re, "l_pr": self.l_pr, "l_cc": self.l_cc, "total": self.total}


def _values(x) -> torch.Tensor:
    if isinstance(x, BranchOutput):
        x = x.predicted
    if isinstance(x, PatchSequence):
        x = x.values
    return torch.as_tensor(x, dtype=DTYPE)


def l1_masked(pred, target, mask) -> torch.Tensor:
    """Mean absolute error over the elements of masked patches.

    ``pred`` and ``target`` are patch sequences (or raw ``(..., N, P*P*C)``
    arrays); ``mask`` is a MaskSpec, a list of them, or a boolean ``(..., N)``
    array. Returns a 0-d tensor that carries gradients.
    """
    p, t = _values(pred), _values(target)
    if p.shape != t.shape:
        raise DimensionError(f"prediction {tuple(p.shape)} vs target {tuple(t.shape)}")
    m = as_mask_tensor(mask, p.shape[-2])
    m = m.expand(p.shape[:-1])
    n_elements = int(m.sum()) * p.shape[-1]
    if n_elements == 0:
        raise EmptySupportError("masked loss over an empty mask")
    diff = (p - t).abs().sum(dim=-1)
    return diff.masked_select(m).sum() / n_elements


def loss_re(y_re: BranchOutput, x: PatchSequence, mask) -> torch.Tensor:
    return l1_masked(y_re, x, mask)


def loss_pr(y_pr: BranchOutput, x: PatchSequence, mask, support: str = "masked") -> torch.Tensor:
    """Context-branch pixel loss; ``support="all"`` averages over every patch instead."""
    if support == "all":
        p = _values(y_pr)
        return l1_masked(p, x, torch.ones(p.shape[:-1], dtype=torch.bool))
    return l1_masked(y_pr, x, mask)


def loss_cc(y_re: BranchOutput, y_pr: BranchOutput, mask) -> torch.Tensor:
    """Consistency between the branches; the context prediction is a constant here."""
    return l1_masked(_values(y_re), _values(y_pr).detach(), mask)


def total_loss(y_re, y_pr, x, mask, weights: LossWeights = LossWeights(),
               pr_support: str = "masked") -> LossBreakdown:
    """Evaluate all three components and their weighted sum.

    ``y_pr=None`` stands for a skipped context branch; both of its terms are then 0.
    """
    l_re = float(loss_re(y_re, x, mask))
    if y_pr is None:
        return LossBreakdown.from_components(l_re, 0.0, 0.0, weights)
    l_pr = float(loss_pr(y_pr, x, mask, pr_support))
    l_cc = float(loss_cc(y_re, y_pr, mask))
    return LossBreakdown.from_components(l_re, l_pr, l_cc, weights)


def compute_losses(params: Backbone, image, mask, config: BackboneConfig,
                   weights: LossWeights = LossWeights(), run_context: bool = True,
                   pr_support: str = "masked"):
    """Forward both branches and return ``(weighted_total_tensor, LossBreakdown)``.

    With ``run_context=False`` the context forward is never executed and the
    context terms are reported as 0.
    """
    image = torch.as_tensor(image, dtype=DTYPE)
    x = patchify(image, config.patch_size)
    y_re = forward_reconstructive(image, mask, config, params)
    l_re = loss_re(y_re, x, mask)
    if not run_context:
        objective = weights.re * l_re
        return objective, LossBreakdown.from_components(l_re.item(), 0.0, 0.0, weights)
    y_pr = forward_context(image, mask, config, params)
    l_pr = loss_pr(y_pr, x, mask, pr_support)
    l_cc = loss_cc(y_re, y_pr, mask)
    objective = weights.re * l_re + weights.pr * l_pr + weights.cc * l_cc
    breakdown = LossBreakdown.from_components(l_re.item(), l_pr.item(), l_cc.item(), weights)
    return objective, breakdown


def loss_and_grads(params: Backbone, image, mask, config: BackboneConfig,
                   weights: LossWeights = LossWeights(), run_context: bool = True,
                   pr_support: str = "masked"):
    """Return ``(LossBreakdown, {param name: gradient})`` for one batch."""
    params.zero_grad(set_to_none=True)
    objective, breakdown = compute_losses(params, image, mask, config, weights,
                                          run_context, pr_support)
    names = [n for n, _ in params.named_parameters()]
    tensors = [p for _, p in params.named_parameters()]
    if objective.requires_grad:
        grads = torch.autograd.grad(objective, tensors, allow_unused=True)
    else:
        grads = [None] * len(tensors)
    out = {}
    for name, p, g in zip(names, tensors, grads):
        out[name] = torch.zeros_like(p) if g is None else g.detach()
    return breakdown, out


def grad_total(params: Backbone, image, mask, config: BackboneConfig,
               weights: LossWeights = LossWeights(), run_context: bool = True,
               pr_support: str = "masked") -> dict[str, torch.Tensor]:
    """Gradient of the weighted objective with respect to every parameter array."""
    return loss_and_grads(params, image, mask, config, weights, run_context, pr_support)[1]
