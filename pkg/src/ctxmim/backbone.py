"""Shared encoder and one-layer pixel head used by both pretraining branches.

The desk-scale encoder is a single-stage pre-norm transformer over the patch
grid. Attention is either global or restricted to non-overlapping
``window x window`` blocks of tokens. Both branches run through the *same*
:class:`Backbone` instance; the only difference between them is whether the
embeddings of masked patches are swapped for the learnable mask token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BackboneConfig
from .errors import ConfigError, DimensionError
from .patchgrid import MaskSpec, PatchGrid, PatchSequence, patchify, stack_masks

__all__ = [
    "Backbone",
    "BranchOutput",
    "init_params",
    "embed_patches",
    "substitute_mask_tokens",
    "encode",
    "predict_pixels",
    "forward_reconstructive",
    "forward_context",
    "as_mask_tensor",
    "INIT_STD",
]

DTYPE = torch.float64
INIT_STD = 0.02


def window_partition(x: torch.Tensor, n_rows: int, n_cols: int, window: int) -> torch.Tensor:
    """(B, N, D) tokens in row-major grid order -> (B * n_windows, window**2, D)."""
    b, _, d = x.shape
    x = x.reshape(b, n_rows // window, window, n_cols // window, window, d)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, window * window, d)


def window_merge(x: torch.Tensor, b: int, n_rows: int, n_cols: int, window: int) -> torch.Tensor:
    d = x.shape[-1]
    x = x.reshape(b, n_rows // window, n_cols // window, window, window, d)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, n_rows * n_cols, d)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, dtype=DTYPE)
        self.proj = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block, optionally with windowed attention."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        d = config.embed_dim
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        self.attn = Attention(d, config.heads)
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)
        self.fc1 = nn.Linear(d, config.mlp_hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(config.mlp_hidden, d, dtype=DTYPE)
        self.n_rows = config.n_rows
        self.n_cols = config.n_cols
        self.window = config.window

    def attend(self, x: torch.Tensor, window: int | None) -> torch.Tensor:
        if window is None:
            return self.attn(x)
        b = x.shape[0]
        parts = window_partition(x, self.n_rows, self.n_cols, window)
        return window_merge(self.attn(parts), b, self.n_rows, self.n_cols, window)

    def forward(self, x: torch.Tensor, window: int | None = None) -> torch.Tensor:
        x = x + self.attend(self.norm1(x), window)
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


class Backbone(nn.Module):
    """All learnable state: patch embedding, positions, mask token, blocks, head."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.grid = PatchGrid(config.height, config.width, config.channels, config.patch_size)
        self.patch_embed = nn.Linear(config.patch_dim, d, dtype=DTYPE)
        self.pos_embed = nn.Parameter(torch.zeros(config.n_patches, d, dtype=DTYPE))
        self.mask_token = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.depth))
        self.head = nn.Linear(d, config.patch_dim, dtype=DTYPE)

    def reset_parameters(self, generator: torch.Generator) -> None:
        lim = 2 * INIT_STD
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".norm" in name:
                    p.fill_(1.0)
                else:
                    nn.init.trunc_normal_(p, std=INIT_STD, a=-lim, b=lim, generator=generator)

    def forward(self, image, mask=None) -> torch.Tensor:
        """Pixel predictions for every patch; masked patches use the mask token."""
        seq = patchify(torch.as_tensor(image, dtype=DTYPE), self.config.patch_size)
        tokens = embed_patches(seq, self)
        if mask is not None:
            tokens = substitute_mask_tokens(tokens, mask, self)
        return predict_pixels(encode(tokens, self.config, self), self).values


@dataclass
class BranchOutput:
    predicted: PatchSequence
    branch: str


def init_params(config: BackboneConfig, seed: int) -> Backbone:
    """Build a freshly initialized backbone; bitwise reproducible for a given seed.

    Weight matrices, positional embeddings and the mask token are drawn from
    a zero-mean normal with std 0.02 truncated at two standard deviations.
    Biases start at zero and layer-norm gains at one.
    """
    if not isinstance(config, BackboneConfig):
        raise ConfigError(f"expected BackboneConfig, got {type(config).__name__}")
    gen = torch.Generator().manual_seed(int(seed))
    model = Backbone(config)
    model.reset_parameters(gen)
    return model


def as_mask_tensor(mask, n_patches: int) -> torch.Tensor:
    """Coerce a MaskSpec, list of MaskSpecs, or boolean array to a bool tensor (.., N)."""
    if isinstance(mask, MaskSpec):
        out = torch.from_numpy(mask.indicator)
    elif isinstance(mask, (list, tuple)) and mask and isinstance(mask[0], MaskSpec):
        out = stack_masks(mask)
    else:
        out = torch.as_tensor(np.asarray(mask, dtype=bool) if not torch.is_tensor(mask) else mask)
        out = out.bool()
    if out.shape[-1] != n_patches:
        raise DimensionError(f"mask covers {out.shape[-1]} patches, grid has {n_patches}")
    return out


def _check_grid(seq: PatchSequence, params: Backbone) -> None:
    if seq.grid != params.grid:
        raise DimensionError(f"patch grid {seq.grid} does not match backbone grid {params.grid}")


def embed_patches(seq: PatchSequence, params: Backbone) -> torch.Tensor:
    """Affine projection of each patch plus its positional embedding -> (..., N, D)."""
    _check_grid(seq, params)
    x = torch.as_tensor(seq.values, dtype=DTYPE)
    return params.patch_embed(x) + params.pos_embed


def substitute_mask_tokens(tokens: torch.Tensor, mask, params: Backbone) -> torch.Tensor:
    """Replace masked rows with ``mask_token + pos_embed[row]``; other rows pass through."""
    n = params.config.n_patches
    if tokens.shape[-2] != n:
        raise DimensionError(f"token sequence has {tokens.shape[-2]} rows, expected {n}")
    m = as_mask_tensor(mask, n).unsqueeze(-1)
    masked_rows = params.mask_token + params.pos_embed
    return torch.where(m, masked_rows, tokens)


def encode(tokens: torch.Tensor, config: BackboneConfig, params: Backbone,
           window: int | None | str = "config") -> torch.Tensor:
    """Run the transformer blocks. ``window`` overrides the configured attention window."""
    if tokens.shape[-2:] != (config.n_patches, config.embed_dim):
        raise DimensionError(
            f"tokens of shape {tuple(tokens.shape)} do not match "
            f"({config.n_patches}, {config.embed_dim})"
        )
    if window == "config":
        window = config.window
    squeeze = tokens.ndim == 2
    x = tokens.unsqueeze(0) if squeeze else tokens
    for blk in params.blocks:
        x = blk(x, window)
    return x.squeeze(0) if squeeze else x


def predict_pixels(tokens: torch.Tensor, params: Backbone) -> PatchSequence:
    """Apply the one-layer head to every row: (..., N, D) -> (..., N, P*P*C)."""
    cfg = params.config
    if tokens.shape[-1] != cfg.embed_dim or tokens.shape[-2] != cfg.n_patches:
        raise DimensionError(f"tokens of shape {tuple(tokens.shape)} do not fit the head")
    return PatchSequence(params.grid, params.head(tokens))


def _patch_input(image, config: BackboneConfig) -> PatchSequence:
    image = torch.as_tensor(image, dtype=DTYPE)
    if tuple(image.shape[-3:]) != (config.channels, config.height, config.width):
        raise DimensionError(
            f"image of shape {tuple(image.shape)} does not match "
            f"({config.channels}, {config.height}, {config.width})"
        )
    return patchify(image, config.patch_size)


def forward_reconstructive(image, mask, config: BackboneConfig, params: Backbone) -> BranchOutput:
    """Masked branch: embed, swap masked rows for the mask token, encode, predict."""
    seq = _patch_input(image, config)
    tokens = substitute_mask_tokens(embed_patches(seq, params), mask, params)
    return BranchOutput(predict_pixels(encode(tokens, config, params), params), "reconstructive")


def forward_context(image, mask, config: BackboneConfig, params: Backbone) -> BranchOutput:
    """Context branch: the full unmasked sequence through the same weights.

    ``mask`` does not enter the computation; it only fixes the loss support.
    """
    seq = _patch_input(image, config)
    as_mask_tensor(mask, config.n_patches)
    tokens = embed_patches(seq, params)
    return BranchOutput(predict_pixels(encode(tokens, config, params), params), "context")
