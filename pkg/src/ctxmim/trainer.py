"""AdamW and the pretraining loop for both the full method and its ablation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .backbone import Backbone, init_params
from .config import BackboneConfig, OptimizerConfig, TrainConfig
from .datasets import LabeledImage
from .errors import DataError, DimensionError
from .objective import loss_and_grads
from .patchgrid import PatchGrid, generate_grid_mask

__all__ = [
    "AdamState",
    "PretrainResult",
    "adamw_step",
    "pretrain",
    "stack_images",
    "write_metrics_jsonl",
]

log = logging.getLogger(__name__)

METRIC_KEYS = ("step", "epoch", "l_re", "l_pr", "l_cc", "total")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(0, {k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
               opt_state: AdamState | None, config: OptimizerConfig, step: int):
    """One AdamW update with bias correction and decoupled weight decay.

    Returns new ``(params, opt_state)``; the inputs are not modified.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if set(params) != set(grads):
        raise DimensionError("params and grads name different arrays")
    if opt_state is None:
        opt_state = AdamState.zeros_like(params)
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {tuple(g.shape)}, "
                                 f"param has {tuple(p.shape)}")
        m = b1 * opt_state.m[name] + (1.0 - b1) * g
        v = b2 * opt_state.v[name] + (1.0 - b2) * g * g
        decayed = p * (1.0 - config.lr * config.weight_decay)
        update = (m / c1) / ((v / c2).sqrt() + config.eps)
        new_p[name] = decayed - config.lr * update
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamState(step, new_m, new_v)


@dataclass
class PretrainResult:
    params: Backbone
    log: list[dict]
    opt_state: AdamState

    def epoch_means(self, key: str = "l_re") -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for rec in self.log:
            by_epoch.setdefault(rec["epoch"], []).append(rec[key])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def stack_images(dataset: Iterable) -> np.ndarray:
    """Collect LabeledImages (or raw arrays) into a float64 ``(M, C, H, W)`` array."""
    if isinstance(dataset, np.ndarray):
        return np.asarray(dataset, dtype=np.float64)
    rows = [d.pixels if isinstance(d, LabeledImage) else np.asarray(d) for d in dataset]
    if not rows:
        return np.zeros((0, 0, 0, 0))
    return np.stack(rows).astype(np.float64)


def _params_dict(model: Backbone) -> dict[str, torch.Tensor]:
    return {n: p.detach() for n, p in model.named_parameters()}


def pretrain(train_cfg: TrainConfig, opt_cfg: OptimizerConfig, backbone_cfg: BackboneConfig,
             dataset: Sequence | np.ndarray, params: Backbone | None = None) -> PretrainResult:
    """Run masked pretraining; fully deterministic given ``train_cfg.seed``.

    Each step draws a shuffled batch, masks every image independently, runs
    the masked branch and (unless ablated) the context branch, and applies one
    AdamW update. One metrics record per step is appended to the log.
    """
    images = stack_images(dataset)
    if train_cfg.epochs > 0 and len(images) == 0:
        raise DataError("pretraining needs a nonempty dataset")
    if len(images) and images.shape[1:] != (backbone_cfg.channels, backbone_cfg.height,
                                             backbone_cfg.width):
        raise DimensionError(f"dataset images of shape {images.shape[1:]} do not match backbone")

    model = params if params is not None else init_params(backbone_cfg, train_cfg.seed)
    grid = PatchGrid(backbone_cfg.height, backbone_cfg.width, backbone_cfg.channels,
                     backbone_cfg.patch_size)
    weights = train_cfg.effective_weights
    run_context = not train_cfg.ablate_context
    rng = np.random.default_rng(train_cfg.seed)
    opt_state = AdamState.zeros_like(_params_dict(model))
    records: list[dict] = []
    step = 0

    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(images))
        for start in range(0, len(images), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            seeds = rng.integers(0, 2**63 - 1, size=len(idx))
            masks = [generate_grid_mask(grid, train_cfg.mask_ratio, int(s), train_cfg.mask_unit)
                     for s in seeds]
            batch = torch.from_numpy(images[idx])
            breakdown, grads = loss_and_grads(model, batch, masks, backbone_cfg, weights,
                                              run_context, train_cfg.pr_support)
            step += 1
            new_params, opt_state = adamw_step(_params_dict(model), grads, opt_state,
                                               opt_cfg, step)
            with torch.no_grad():
                for name, p in model.named_parameters():
                    p.copy_(new_params[name])
            records.append({"step": step, "epoch": epoch, **breakdown.as_dict()})
        epoch_re = np.mean([r["l_re"] for r in records if r["epoch"] == epoch])
        log.info("epoch %d/%d mean l_re %.5f", epoch, train_cfg.epochs, epoch_re)

    opt_state.step = step
    return PretrainResult(model, records, opt_state)


def write_metrics_jsonl(records: Iterable[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({k: rec[k] for k in METRIC_KEYS}) + "\n")

