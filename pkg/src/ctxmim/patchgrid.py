"""Patchification of images and random patch masks.

Images are channel-first arrays of shape ``(..., C, H, W)``. A patch sequence
has shape ``(..., N, P*P*C)``: patches are scanned row-major over the grid and
the entries of one patch are ordered (patch-row, patch-col, channel) with the
channel varying fastest. Both numpy arrays and torch tensors are accepted and
the container type is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import torch

from .errors import DimensionError, RangeError

__all__ = [
    "PatchGrid",
    "PatchSequence",
    "MaskSpec",
    "masked_count_for",
    "patchify",
    "unpatchify",
    "generate_mask",
    "generate_grid_mask",
    "masked_element_count",
    "stack_masks",
]


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    channels: int
    patch_size: int

    def __post_init__(self):
        if min(self.height, self.width, self.channels, self.patch_size) < 1:
            raise DimensionError(f"grid dimensions must be positive, got {self}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise DimensionError(
                f"image {self.height}x{self.width} is not divisible by patch size {self.patch_size}"
            )

    @property
    def n_rows(self) -> int:
        return self.height // self.patch_size

    @property
    def n_cols(self) -> int:
        return self.width // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def patch_dim(self) -> int:
        """Number of scalar values in one flattened patch (P*P*C)."""
        return self.patch_size * self.patch_size * self.channels


@dataclass
class PatchSequence:
    grid: PatchGrid
    values: np.ndarray | torch.Tensor

    def __post_init__(self):
        shape = tuple(self.values.shape)
        if len(shape) < 2 or shape[-2:] != (self.grid.n_patches, self.grid.patch_dim):
            raise DimensionError(
                f"patch values of shape {shape} do not match grid "
                f"({self.grid.n_patches}, {self.grid.patch_dim})"
            )


@dataclass
class MaskSpec:
    """A set of masked patches. ``indicator[i]`` is True when patch ``i`` is hidden."""

    indicator: np.ndarray
    masked_count: int = field(default=-1)
    seed: int | None = None

    def __post_init__(self):
        self.indicator = np.asarray(self.indicator, dtype=bool)
        if self.indicator.ndim != 1:
            raise DimensionError("mask indicator must be one-dimensional")
        count = int(self.indicator.sum())
        if self.masked_count == -1:
            self.masked_count = count
        elif self.masked_count != count:
            raise DimensionError(
                f"masked_count={self.masked_count} disagrees with indicator ({count} set)"
            )

    @property
    def n_patches(self) -> int:
        return self.indicator.shape[0]


def _permute(x, axes):
    if isinstance(x, torch.Tensor):
        return x.permute(*axes)
    return np.transpose(x, axes)


def patchify(image, patch_size: int) -> PatchSequence:
    """Rearrange a ``(..., C, H, W)`` image into a ``(..., N, P*P*C)`` sequence."""
    if image.ndim < 3:
        raise DimensionError(f"expected (..., C, H, W) image, got shape {tuple(image.shape)}")
    *lead, c, h, w = image.shape
    grid = PatchGrid(h, w, c, patch_size)
    p = patch_size
    x = image.reshape(*lead, c, grid.n_rows, p, grid.n_cols, p)
    k = len(lead)
    # (..., C, nr, P, nc, P) -> (..., nr, nc, P, P, C)
    x = _permute(x, (*range(k), k + 1, k + 3, k + 2, k + 4, k))
    x = x.reshape(*lead, grid.n_patches, grid.patch_dim)
    return PatchSequence(grid, x)


def unpatchify(seq: PatchSequence):
    """Exact inverse of :func:`patchify`."""
    g = seq.grid
    x = seq.values
    if tuple(x.shape[-2:]) != (g.n_patches, g.patch_dim):
        raise DimensionError(f"malformed patch sequence of shape {tuple(x.shape)}")
    lead = tuple(x.shape[:-2])
    k = len(lead)
    p = g.patch_size
    x = x.reshape(*lead, g.n_rows, g.n_cols, p, p, g.channels)
    # (..., nr, nc, P, P, C) -> (..., C, nr, P, nc, P)
    x = _permute(x, (*range(k), k + 4, k, k + 2, k + 1, k + 3))
    return x.reshape(*lead, g.channels, g.height, g.width)


def masked_count_for(n: int, ratio: float) -> int:
    """Number of masked patches for ``ratio``, rounding half up.

    The ratio is taken at its shortest decimal representation so that
    e.g. ``0.7 * 5`` rounds to 4 rather than falling to 3 on float error.
    """
    if not 0.0 <= ratio <= 1.0:
        raise RangeError(f"mask ratio must be in [0, 1], got {ratio}")
    exact = Decimal(repr(float(ratio))) * n
    return int(exact.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def generate_mask(n: int, ratio: float, seed: int) -> MaskSpec:
    """Mask ``round_half_up(ratio * n)`` of ``n`` patches chosen uniformly without replacement."""
    if n < 1:
        raise DimensionError(f"need at least one patch, got {n}")
    m = masked_count_for(n, ratio)
    rng = np.random.default_rng(seed)
    indicator = np.zeros(n, dtype=bool)
    indicator[rng.permutation(n)[:m]] = True
    return MaskSpec(indicator, m, seed)


def generate_grid_mask(grid: PatchGrid, ratio: float, seed: int, mask_unit: int = 1) -> MaskSpec:
    """Mask on a coarser grid of ``mask_unit x mask_unit`` token blocks.

    With ``mask_unit=1`` this is exactly :func:`generate_mask` over the grid.
    Larger units hide square blocks of patches, as SimMIM does with its
    32-pixel masking unit.
    """
    if mask_unit < 1 or grid.n_rows % mask_unit or grid.n_cols % mask_unit:
        raise DimensionError(
            f"mask unit {mask_unit} does not tile the {grid.n_rows}x{grid.n_cols} patch grid"
        )
    if mask_unit == 1:
        return generate_mask(grid.n_patches, ratio, seed)
    rows, cols = grid.n_rows // mask_unit, grid.n_cols // mask_unit
    coarse = generate_mask(rows * cols, ratio, seed).indicator.reshape(rows, cols)
    fine = coarse.repeat(mask_unit, axis=0).repeat(mask_unit, axis=1)
    return MaskSpec(fine.reshape(-1), seed=seed)


def masked_element_count(mask: MaskSpec, patch_size: int, channels: int) -> int:
    """Scalar elements covered by the mask: masked patches x P^2 x C."""
    return mask.masked_count * patch_size * patch_size * channels


def stack_masks(masks) -> torch.Tensor:
    """Stack MaskSpecs (or boolean arrays) into a ``(B, N)`` boolean tensor."""
    rows = [m.indicator if isinstance(m, MaskSpec) else np.asarray(m, dtype=bool) for m in masks]
    return torch.from_numpy(np.stack(rows))
