"""Patch masking and the masked-pixel L1 objective.

Tensors are channel-first: a single chip is (C, H, W), a batch (N, C, H, W).
Functions accept numpy arrays or torch tensors and return the same kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch

from .errors import DegenerateLossError, ParameterError

ZERO = "zero"
LEARNED = "learned"


def mask_count(ratio: float, cells: int) -> int:
    """Number of masked cells: ratio * cells rounded half-up, at least one.

    The ratio is taken at its shortest decimal form and rounded exactly, so
    0.3 * 5 rounds to 2 rather than falling just short of the half.
    """
    return max(1, math.floor(Fraction(repr(float(ratio))) * cells + Fraction(1, 2)))


@dataclass(frozen=True, eq=False)
class MaskSpec:
    patch_grid: np.ndarray  # (H/p, W/p) bool, True = masked
    patch_size: int
    mask_ratio: float

    def pixel_mask(self) -> np.ndarray:
        p = self.patch_size
        return np.repeat(np.repeat(self.patch_grid, p, axis=0), p, axis=1)

    @property
    def n_masked(self) -> int:
        return int(self.patch_grid.sum())


def gen_mask(grid_h: int, grid_w: int, ratio: float, seed: int | np.random.Generator,
             patch_size: int = 4) -> MaskSpec:
    if not 0.0 < ratio <= 1.0:
        raise ParameterError(f"mask ratio must lie in (0, 1], got {ratio}")
    if grid_h < 1 or grid_w < 1:
        raise ParameterError("mask grid must be non-empty")
    cells = grid_h * grid_w
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = rng.choice(cells, size=mask_count(ratio, cells), replace=False)
    grid = np.zeros(cells, dtype=bool)
    grid[chosen] = True
    return MaskSpec(grid.reshape(grid_h, grid_w), patch_size, ratio)


def empty_mask(grid_h: int, grid_w: int, patch_size: int = 4) -> MaskSpec:
    return MaskSpec(np.zeros((grid_h, grid_w), dtype=bool), patch_size, 0.0)


def _pixel_mask_like(mask, x):
    """Boolean pixel mask broadcastable against ``x`` (…, C, H, W)."""
    if isinstance(mask, MaskSpec):
        m = mask.pixel_mask()
    else:
        m = mask
    if isinstance(x, torch.Tensor):
        m = torch.as_tensor(np.asarray(m) if not isinstance(m, torch.Tensor) else m,
                            dtype=torch.bool, device=x.device)
    else:
        m = np.asarray(m, dtype=bool)
    if m.shape[-2:] != tuple(x.shape[-2:]):
        raise ParameterError(f"mask {tuple(m.shape[-2:])} does not tile input {tuple(x.shape[-2:])}")
    # (H, W) -> (1, H, W); (N, H, W) -> (N, 1, H, W)
    return m[..., None, :, :] if m.ndim == x.ndim - 1 else m[None] if m.ndim == 2 else m


def apply_mask(x, mask, mode: str = ZERO, token=None):
    """Replace masked patches by zeros or a per-band token; unmasked pixels are untouched."""
    if mode not in (ZERO, LEARNED):
        raise ParameterError(f"unknown mask token mode {mode!r}")
    m = _pixel_mask_like(mask, x)
    if isinstance(x, torch.Tensor):
        if mode == LEARNED:
            if token is None:
                raise ParameterError("learned mode needs a token")
            fill = torch.as_tensor(token, dtype=x.dtype).reshape(-1, 1, 1)
        else:
            fill = torch.zeros((), dtype=x.dtype)
        return torch.where(m, fill, x)
    if mode == LEARNED:
        if token is None:
            raise ParameterError("learned mode needs a token")
        fill = np.asarray(token, dtype=x.dtype).reshape(-1, 1, 1)
    else:
        fill = np.zeros((), dtype=x.dtype)
    return np.where(m, fill, x)


def masked_l1_loss(pred, target, mask):
    """Mean |pred - target| over masked pixels and every band.

    The normaliser is (masked pixel count) x (bands), so unmasked pixels
    contribute exactly nothing, to the value or the gradient.
    """
    if tuple(pred.shape) != tuple(target.shape):
        raise ParameterError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    is_torch = isinstance(pred, torch.Tensor)
    m = _pixel_mask_like(mask, pred)
    if is_torch:
        mf = m.to(pred.dtype)
        count = mf.expand(pred.shape).sum()
        if float(count) == 0:
            raise DegenerateLossError("mask selects no pixels")
        return ((pred - target).abs() * mf).sum() / count
    mf = m.astype(np.float64)
    count = float(np.broadcast_to(mf, pred.shape).sum())
    if count == 0:
        raise DegenerateLossError("mask selects no pixels")
    return float((np.abs(np.asarray(pred, np.float64) - target) * mf).sum() / count)
