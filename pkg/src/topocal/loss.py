"""Pixel losses and the patch-based topological loss.

All functions take one-hot maps (``OneHotMap`` or ``(C, H, W)`` arrays).
The topological loss splits both maps into a sqrt(N) x sqrt(N) grid of
patches; every patch keeps its own base loss and is charged ``alpha`` times
the excess over ``beta`` of each patch in its 3x3 neighborhood.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidParameterError

DICE_EPS = 1e-6


class BaseLoss(str, enum.Enum):
    MSE = "mse"
    DICE = "dice"


@dataclass(frozen=True)
class TopoLossConfig:
    alpha: float = 0.3
    beta: float = 0.3
    patch_count: int = 16
    base: BaseLoss = BaseLoss.MSE
    include_center: bool = True

    def __post_init__(self):
        object.__setattr__(self, "base", BaseLoss(self.base))
        if self.alpha < 0 or self.beta < 0:
            raise InvalidParameterError("alpha and beta must be non-negative")
        n = math.isqrt(self.patch_count) if self.patch_count >= 1 else 0
        if self.patch_count < 1 or n * n != self.patch_count:
            raise InvalidParameterError(f"patch_count must be a perfect square >= 1, got {self.patch_count}")

    @property
    def side(self) -> int:
        return math.isqrt(self.patch_count)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "patch_count": self.patch_count,
            "base": self.base.value,
            "include_center": self.include_center,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TopoLossConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


LOSS_NAMES = ("topmse", "mse", "topdice", "dice")


def loss_config(name: str) -> TopoLossConfig:
    """Named loss presets. Plain losses are the one-patch, alpha=0 case."""
    name = name.lower().replace("-", "").replace("_", "")
    if name == "mse":
        return TopoLossConfig(alpha=0.0, beta=0.3, patch_count=1, base=BaseLoss.MSE)
    if name == "dice":
        return TopoLossConfig(alpha=0.0, beta=0.3, patch_count=1, base=BaseLoss.DICE)
    if name == "topmse":
        return TopoLossConfig(base=BaseLoss.MSE)
    if name == "topdice":
        return TopoLossConfig(base=BaseLoss.DICE)
    raise InvalidParameterError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")


def _w(m) -> np.ndarray:
    w = getattr(m, "weights", m)
    return np.asarray(w, dtype=float)


def _pair(a, b):
    a, b = _w(a), _w(b)
    if a.shape != b.shape or a.ndim != 3:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _mse(a, b) -> float:
    d = a - b
    return float(np.mean(d * d))


def _dice(a, b) -> float:
    ab = np.sum(a * b, axis=(1, 2))
    den = np.sum(a * a, axis=(1, 2)) + np.sum(b * b, axis=(1, 2)) + DICE_EPS
    return float(np.mean(1.0 - (2.0 * ab + DICE_EPS) / den))


def mse(a, b) -> float:
    return _mse(*_pair(a, b))


def dice(a, b) -> float:
    """Soft Dice loss averaged over channels."""
    return _dice(*_pair(a, b))


def _mse_grad(a, b):
    d = a - b
    return float(np.mean(d * d)), (2.0 / d.size) * d


def _dice_grad(a, b):
    c = a.shape[0]
    ab = np.sum(a * b, axis=(1, 2))
    den = np.sum(a * a, axis=(1, 2)) + np.sum(b * b, axis=(1, 2)) + DICE_EPS
    num = 2.0 * ab + DICE_EPS
    val = float(np.mean(1.0 - num / den))
    g = -(2.0 * b * den[:, None, None] - 2.0 * a * num[:, None, None]) / (den * den)[:, None, None]
    return val, g / c


_BASE = {BaseLoss.MSE: _mse, BaseLoss.DICE: _dice}
_BASE_GRAD = {BaseLoss.MSE: _mse_grad, BaseLoss.DICE: _dice_grad}


def _edges(length: int, n: int) -> np.ndarray:
    size = length // n
    return np.array([i * size for i in range(n)] + [length])


@dataclass(frozen=True, eq=False)
class PatchGrid:
    """sqrt(N) x sqrt(N) partition of a one-hot map; remainders go to the last row/column."""

    weights: np.ndarray
    row_edges: np.ndarray
    col_edges: np.ndarray

    @property
    def side(self) -> int:
        return len(self.row_edges) - 1

    def bounds(self, i: int, j: int):
        return (slice(self.row_edges[i], self.row_edges[i + 1]),
                slice(self.col_edges[j], self.col_edges[j + 1]))

    def patch(self, i: int, j: int) -> np.ndarray:
        rs, cs = self.bounds(i, j)
        return self.weights[:, rs, cs]

    def patch_sizes(self):
        return np.diff(self.row_edges), np.diff(self.col_edges)


def split_patches(m, n_patches: int) -> PatchGrid:
    w = _w(m)
    n = math.isqrt(n_patches) if n_patches >= 1 else 0
    if n_patches < 1 or n * n != n_patches:
        raise InvalidInputError(f"N must be a perfect square, got {n_patches}")
    _, height, width = w.shape
    if n > min(height, width):
        raise InvalidInputError(f"map {width}x{height} too small for a {n}x{n} patch grid")
    return PatchGrid(w, _edges(height, n), _edges(width, n))


def _neighbors(i, j, n, include_center):
    for k in (-1, 0, 1):
        for l in (-1, 0, 1):
            if k == 0 and l == 0 and not include_center:
                continue
            if 0 <= i + k < n and 0 <= j + l < n:
                yield i + k, j + l


def patch_base_losses(pred: PatchGrid, gt: PatchGrid, base: BaseLoss) -> np.ndarray:
    fn = _BASE[BaseLoss(base)]
    n = pred.side
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = fn(pred.patch(i, j), gt.patch(i, j))
    return out


def patch_loss(pred: PatchGrid, gt: PatchGrid, i: int, j: int, cfg: TopoLossConfig) -> float:
    n = pred.side
    if gt.side != n:
        raise InvalidInputError("patch grids differ in size")
    if not (0 <= i < n and 0 <= j < n):
        raise InvalidInputError(f"patch index ({i}, {j}) outside {n}x{n} grid")
    fn = _BASE[cfg.base]
    center = fn(pred.patch(i, j), gt.patch(i, j))
    excess = 0.0
    for k, l in _neighbors(i, j, n, cfg.include_center):
        excess += max(0.0, fn(pred.patch(k, l), gt.patch(k, l)) - cfg.beta)
    return center + cfg.alpha * excess


def _neighbor_counts(n: int, include_center: bool) -> np.ndarray:
    """How many patch neighborhoods each patch belongs to."""
    counts = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            for k, l in _neighbors(i, j, n, include_center):
                counts[k, l] += 1
    return counts


def _block_sum(x, rows, cols):
    """Sum of ``x[..., H, W]`` over every patch; shape ``(..., n, n)``."""
    return np.add.reduceat(np.add.reduceat(x, rows[:-1], axis=-2), cols[:-1], axis=-1)


def _expand(x, rows, cols):
    """Broadcast per-patch values ``(..., n, n)`` back to pixels."""
    return np.repeat(np.repeat(x, np.diff(rows), axis=-2), np.diff(cols), axis=-1)


def _patch_terms(a, b, cfg):
    """Per-patch base losses plus whatever the gradient needs, vectorized."""
    _, height, width = a.shape
    n = cfg.side
    if n > min(height, width):
        raise InvalidInputError(f"map {width}x{height} too small for a {n}x{n} patch grid")
    rows, cols = _edges(height, n), _edges(width, n)
    if cfg.base is BaseLoss.MSE:
        d = a - b
        sizes = a.shape[0] * np.outer(np.diff(rows), np.diff(cols))
        return _block_sum(np.sum(d * d, axis=0), rows, cols) / sizes, (rows, cols, d, sizes)
    ab = _block_sum(a * b, rows, cols)
    den = _block_sum(a * a, rows, cols) + _block_sum(b * b, rows, cols) + DICE_EPS
    num = 2.0 * ab + DICE_EPS
    return np.mean(1.0 - num / den, axis=0), (rows, cols, num, den)


def _combine(base, cfg):
    if cfg.alpha == 0.0:
        return float(np.sum(base)) / cfg.patch_count
    counts = _neighbor_counts(cfg.side, cfg.include_center)
    excess = np.maximum(0.0, base - cfg.beta)
    return float(np.sum(base) + cfg.alpha * np.sum(counts * excess)) / cfg.patch_count


def topo_loss(pred, gt, cfg: TopoLossConfig = TopoLossConfig()) -> float:
    a, b = _pair(pred, gt)
    base, _ = _patch_terms(a, b, cfg)
    return _combine(base, cfg)


def topo_loss_grad(pred, gt, cfg: TopoLossConfig = TopoLossConfig()):
    """Loss value and its derivative with respect to every entry of ``pred``.

    The max(0, .) kink uses subgradient 0.
    """
    a, b = _pair(pred, gt)
    base, extra = _patch_terms(a, b, cfg)
    value = _combine(base, cfg)
    counts = _neighbor_counts(cfg.side, cfg.include_center)
    weight = (1.0 + cfg.alpha * counts * (base > cfg.beta)) / cfg.patch_count
    if cfg.base is BaseLoss.MSE:
        rows, cols, d, sizes = extra
        return value, _expand(2.0 * weight / sizes, rows, cols) * d
    rows, cols, num, den = extra
    c = a.shape[0]
    k1 = _expand(weight * 2.0 / (c * den), rows, cols)
    k2 = _expand(weight * 2.0 * num / (c * den * den), rows, cols)
    return value, k2 * a - k1 * b
