"""Orthonormal 2D DCT-II plans, transforms, basis images and frequency masks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import Tensor, _make, as_tensor

__all__ = [
    "DctPlan",
    "FrequencyMask",
    "dct_matrix",
    "dct_plan",
    "dct2_forward",
    "dct2_inverse",
    "basis_image",
    "mask_indices",
    "apply_mask",
]


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``D`` with ``D[k, u] = s_k cos(pi k (u + 1/2) / n)``.

    ``s_0 = sqrt(1/n)`` and ``s_k = sqrt(2/n)`` otherwise, so ``D @ D.T == I``.
    """
    if n < 1:
        raise ShapeError(f"DCT extent must be positive, got {n}")
    k = np.arange(n)[:, None]
    u = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * k * (u + 0.5) / n)
    d[0] /= np.sqrt(2.0)
    return d


@dataclass(frozen=True, eq=False)
class DctPlan:
    """Precomputed row and column DCT matrices for an ``h x w`` grid."""

    h: int
    w: int
    d_h: np.ndarray
    d_w: np.ndarray

    @classmethod
    def create(cls, h: int, w: int) -> "DctPlan":
        d_h, d_w = dct_matrix(h), dct_matrix(w)
        d_h.flags.writeable = False
        d_w.flags.writeable = False
        return cls(h, w, d_h, d_w)

    def check(self, x: Tensor) -> None:
        if x.ndim < 2 or x.shape[0] != self.h or x.shape[1] != self.w:
            raise ShapeError(f"plan is {self.h}x{self.w}, input has shape {x.shape}")


@lru_cache(maxsize=64)
def dct_plan(h: int, w: int) -> DctPlan:
    """Shared, cached plan for the given extents."""
    return DctPlan.create(h, w)


def _separable(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # out[p, q, ...] = sum_{u,v} a[p, u] b[q, v] x[u, v, ...]
    a = a.astype(x.dtype, copy=False)
    b = b.astype(x.dtype, copy=False)
    y = np.tensordot(a, x, axes=(1, 0))
    y = np.tensordot(b, y, axes=(1, 1))
    return np.swapaxes(y, 0, 1)


def dct2_forward(x, plan: DctPlan | None = None) -> Tensor:
    """Per-channel separable transform ``Z = D_h X D_w^T`` over the two leading axes."""
    x = as_tensor(x)
    if plan is None:
        plan = dct_plan(x.shape[0], x.shape[1])
    plan.check(x)
    return _make(_separable(x.data, plan.d_h, plan.d_w), (x,),
                 lambda g: (_separable(g, plan.d_h.T, plan.d_w.T),))


def dct2_inverse(z, plan: DctPlan | None = None) -> Tensor:
    """Exact inverse of :func:`dct2_forward` (``X = D_h^T Z D_w``)."""
    z = as_tensor(z)
    if plan is None:
        plan = dct_plan(z.shape[0], z.shape[1])
    plan.check(z)
    return _make(_separable(z.data, plan.d_h.T, plan.d_w.T), (z,),
                 lambda g: (_separable(g, plan.d_h, plan.d_w),))


def basis_image(plan: DctPlan, h_idx: int, w_idx: int) -> np.ndarray:
    """The ``(h, w, 1)`` basis pattern whose coefficient sits at ``(h_idx, w_idx)``."""
    if not (0 <= h_idx < plan.h and 0 <= w_idx < plan.w):
        raise IndexError(f"basis index ({h_idx}, {w_idx}) outside {plan.h}x{plan.w}")
    return np.outer(plan.d_h[h_idx], plan.d_w[w_idx])[:, :, None]


@dataclass(frozen=True)
class FrequencyMask:
    """Rectangular low- or high-frequency selection along the grid diagonal.

    For ``ratio`` r the diagonal point is ``(ceil(r*h), ceil(r*w))``. Low-pass
    keeps ``i < ceil(r*h) and j < ceil(r*w)``; high-pass keeps the mirrored
    corner ``i >= h - ceil(r*h) and j >= w - ceil(r*w)``.
    """

    h: int
    w: int
    kind: str = "low"
    ratio: float = 1.0

    def __post_init__(self):
        if self.kind not in ("low", "high"):
            raise ParameterError(f"mask kind must be 'low' or 'high', got {self.kind!r}")
        if not 0.0 < self.ratio <= 1.0:
            raise ParameterError(f"mask ratio must lie in (0, 1], got {self.ratio}")

    def array(self) -> np.ndarray:
        rows, cols = mask_indices(self.h, self.w, self.ratio)
        keep = np.zeros((self.h, self.w), dtype=bool)
        if self.kind == "low":
            keep[:rows, :cols] = True
        else:
            keep[self.h - rows:, self.w - cols:] = True
        return keep


def mask_indices(h: int, w: int, ratio: float) -> tuple[int, int]:
    """Side lengths of the kept corner for ``ratio``; always at least one."""
    # round before ceil so 0.3 * 10 does not become 4
    rows = max(1, math.ceil(round(ratio * h, 9)))
    cols = max(1, math.ceil(round(ratio * w, 9)))
    return min(rows, h), min(cols, w)


def apply_mask(z, mask: FrequencyMask) -> Tensor:
    """Zero every coefficient outside the mask's kept region."""
    z = as_tensor(z)
    if z.ndim < 2 or z.shape[:2] != (mask.h, mask.w):
        raise ShapeError(f"mask is {mask.h}x{mask.w}, input has shape {z.shape}")
    keep = mask.array().reshape((mask.h, mask.w) + (1,) * (z.ndim - 2)).astype(z.dtype)
    return _make(z.data * keep, (z,), lambda g: (g * keep,))
