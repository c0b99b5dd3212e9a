"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor, backward


@dataclass
class GradCheckResult:
    checked: int
    max_rel_error: float
    worst: tuple[str, tuple[int, ...], float, float] | None

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], *,
              step: float = 1e-4, samples: int | None = None,
              rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``params`` must be float64 leaves with ``requires_grad=True``. When
    ``samples`` is given, that many (parameter, index) pairs are drawn
    uniformly over all scalar entries; otherwise every entry is checked.
    """
    with GradTape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss)

    sizes = np.array([p.data.size for p in params])
    if samples is None:
        picks = [(i, j) for i, n in enumerate(sizes) for j in range(n)]
    else:
        rng = rng or np.random.default_rng(0)
        flat = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        picks = []
        for f in np.sort(flat):
            i = int(np.searchsorted(bounds, f, side="right"))
            picks.append((i, int(f - (bounds[i - 1] if i else 0))))

    worst, max_err = None, 0.0
    for i, j in picks:
        p = params[i]
        g = grads.get(p)
        analytic = 0.0 if g is None else float(g.reshape(-1)[j])
        flat = p.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        up = float(loss_fn().data)
        flat[j] = orig - step
        down = float(loss_fn().data)
        flat[j] = orig
        numeric = (up - down) / (2 * step)
        err = relative_error(analytic, numeric)
        if err >= max_err:
            max_err = err
            worst = (p.name or f"param{i}", np.unravel_index(j, p.shape), analytic, numeric)
    return GradCheckResult(len(picks), max_err, worst)
