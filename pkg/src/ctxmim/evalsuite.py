"""Evaluation: linear probing, masked reconstruction metrics, occlusion analysis."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import DTYPE, Backbone, as_mask_tensor, embed_patches, encode
from .config import BackboneConfig, ProbeConfig
from .datasets import LabeledImage
from .errors import DataError, RangeError
from .objective import _values, l1_masked
from .patchgrid import generate_mask, patchify

__all__ = [
    "CoverageQuery",
    "PSNR_CAP_DB",
    "linear_probe",
    "pooled_features",
    "recon_metrics",
    "coverage_closed_form",
    "coverage_exact",
    "coverage_monte_carlo",
    "dump_json",
]

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class CoverageQuery:
    """An object covering ``k`` of ``n`` patches while ``m`` patches are masked."""

    n: int
    k: int
    m: int

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise RangeError(f"need 1 <= k <= N, got k={self.k}, N={self.n}")
        if not 0 <= self.m <= self.n:
            raise RangeError(f"need 0 <= m <= N, got m={self.m}, N={self.n}")


def coverage_exact(q: CoverageQuery) -> Fraction:
    """P(all k object patches masked) as an exact fraction: C(N-k, m-k) / C(N, m)."""
    if q.m < q.k:
        return Fraction(0)
    return Fraction(math.comb(q.n - q.k, q.m - q.k), math.comb(q.n, q.m))


def coverage_closed_form(q: CoverageQuery) -> float:
    return float(coverage_exact(q))


def coverage_monte_carlo(q: CoverageQuery, trials: int, seed: int) -> float:
    """Fraction of random masks (drawn with :func:`generate_mask`) hiding the whole object.

    The object occupies patches ``0..k-1``; by exchangeability any placement
    has the same occlusion probability.
    """
    if trials < 1:
        raise RangeError("trials must be >= 1")
    ratio = q.m / q.n
    seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=trials)
    hits = 0
    for s in seeds:
        if generate_mask(q.n, ratio, int(s)).indicator[:q.k].all():
            hits += 1
    return hits / trials


def recon_metrics(pred, target, mask) -> dict[str, float]:
    """Masked L1 and PSNR (peak 1.0, capped at 99 dB) over the masked patches."""
    l1 = float(l1_masked(pred, target, mask))
    p, t = _values(pred), _values(target)
    m = as_mask_tensor(mask, p.shape[-2]).expand(p.shape[:-1])
    sq = ((p - t) ** 2).sum(dim=-1).masked_select(m).sum().item()
    mse = sq / (int(m.sum()) * p.shape[-1])
    psnr = PSNR_CAP_DB if mse == 0 else min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))
    return {"masked_l1": l1, "masked_psnr_db": psnr}


def _as_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    items = list(dataset)
    if not items:
        raise DataError("probe dataset is empty")
    if isinstance(items[0], LabeledImage):
        x = np.stack([d.pixels for d in items]).astype(np.float64)
        y = np.array([d.label for d in items], dtype=np.int64)
    else:
        x = np.stack([np.asarray(d[0]) for d in items]).astype(np.float64)
        y = np.array([int(d[1]) for d in items], dtype=np.int64)
    return x, y


def pooled_features(params: Backbone, config: BackboneConfig, images, batch_size: int = 256):
    """Mean over token rows of the encoder output for unmasked images, shape (M, D)."""
    out = []
    images = torch.as_tensor(images, dtype=DTYPE)
    for start in range(0, len(images), batch_size):
        seq = patchify(images[start:start + batch_size], config.patch_size)
        tokens = encode(embed_patches(seq, params), config, params)
        out.append(tokens.mean(dim=-2))
    return torch.cat(out) if out else torch.zeros(0, config.embed_dim, dtype=DTYPE)


def _split(n: int, probe_cfg: ProbeConfig, rng: np.random.Generator):
    order = rng.permutation(n)
    n_test = min(n - 1, max(1, round(probe_cfg.test_fraction * n)))
    return order[n_test:], order[:n_test]


def linear_probe(params: Backbone, config: BackboneConfig, dataset: Sequence,
                 probe_cfg: ProbeConfig = ProbeConfig()) -> float:
    """Top-1 accuracy on a held-out split of an affine classifier over pooled tokens.

    In ``linear`` mode the encoder is frozen and its features are computed
    once; the classifier is fit full-batch with L-BFGS (a convex problem, so
    the result does not hinge on a step-size schedule) or with minibatch Adam.
    ``finetune`` mode trains a private copy of the encoder jointly with the
    classifier using Adam. Features are standardized with training-split
    statistics in both modes.
    """
    x, y = _as_arrays(dataset)
    classes = np.unique(y)
    if len(classes) < 2:
        raise DataError("linear probe needs at least two classes")
    n_classes = int(y.max()) + 1
    rng = np.random.default_rng(probe_cfg.seed)
    train_idx, test_idx = _split(len(y), probe_cfg, rng)
    gen = torch.Generator().manual_seed(probe_cfg.seed)

    finetune = probe_cfg.mode == "finetune"
    encoder = copy.deepcopy(params) if finetune else params
    images = torch.from_numpy(x)
    labels = torch.from_numpy(y)

    with torch.no_grad():
        feats = pooled_features(encoder, config, images)
    mu = feats[train_idx].mean(dim=0)
    sd = feats[train_idx].std(dim=0)
    sd = torch.where(sd > 1e-12, sd, torch.ones_like(sd))

    clf = nn.Linear(config.embed_dim, n_classes, dtype=DTYPE)
    with torch.no_grad():
        clf.weight.normal_(0.0, 0.01, generator=gen)
        clf.bias.zero_()

    def logits(idx):
        f = pooled_features(encoder, config, images[idx]) if finetune else feats[idx]
        return clf((f - mu) / sd)

    def objective(idx):
        penalty = 0.5 * probe_cfg.l2 * clf.weight.square().sum()
        return F.cross_entropy(logits(idx), labels[idx]) + penalty

    if not finetune and probe_cfg.solver == "lbfgs":
        opt = torch.optim.LBFGS(clf.parameters(), lr=1.0, max_iter=probe_cfg.max_iter,
                                tolerance_grad=1e-9, tolerance_change=1e-12,
                                history_size=20, line_search_fn="strong_wolfe")

        def closure():
            opt.zero_grad()
            loss = objective(train_idx)
            loss.backward()
            return loss

        opt.step(closure)
    else:
        trainable = list(clf.parameters()) + (list(encoder.parameters()) if finetune else [])
        opt = torch.optim.Adam(trainable, lr=probe_cfg.lr)
        for _ in range(probe_cfg.epochs):
            order = train_idx[rng.permutation(len(train_idx))]
            for start in range(0, len(order), probe_cfg.batch_size):
                idx = order[start:start + probe_cfg.batch_size]
                loss = objective(idx)
                opt.zero_grad()
                loss.backward()
                opt.step()

    with torch.no_grad():
        pred = logits(test_idx).argmax(dim=-1)
    return float((pred == labels[test_idx]).double().mean())


def dump_json(obj: dict, path: str | Path | None = None) -> str:
    """Serialize a metrics mapping with stable (insertion) key order."""
    text = json.dumps(obj, indent=2) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
