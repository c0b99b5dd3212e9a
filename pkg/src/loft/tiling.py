"""Sliding-window inference with overlap blending."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class TileSpec:
    tile: int = 384
    step: int = 352

    def __post_init__(self):
        if not 0 < self.step <= self.tile:
            raise ParameterError(f"need 0 < step <= tile, got tile={self.tile}, step={self.step}")

    @property
    def overlap(self) -> int:
        return self.tile - self.step


def tile_starts(extent: int, tile: int, step: int) -> list[int]:
    """Start offsets along one axis; the last tile is flush with the edge."""
    if extent <= tile:
        return [0]
    starts = list(range(0, extent - tile, step))
    starts.append(extent - tile)
    return starts


def _ramp(length: int, before: int, after: int) -> np.ndarray:
    """1D weights rising linearly over ``before`` samples and falling over ``after``."""
    w = np.ones(length)
    if before:
        w[:before] = np.minimum(w[:before], (np.arange(before) + 1) / (before + 1))
    if after:
        w[length - after:] = np.minimum(w[length - after:], (np.arange(after, 0, -1)) / (after + 1))
    return w


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("LOFT_THREADS", "1")))
    except ValueError:
        return 1


def tiled_inference(restore: Callable[[np.ndarray], np.ndarray], image: np.ndarray,
                    spec: TileSpec = TileSpec(), blend: str = "feather",
                    threads: int | None = None) -> np.ndarray:
    """Run ``restore`` over overlapping tiles and blend the results.

    ``blend="feather"`` weights each tile with linear ramps across the sides
    it shares with a neighbour; ``"hard"`` keeps, for each pixel, the tile
    whose start is closest to it (a cut at the middle of each overlap).
    Tiles are evaluated concurrently (``LOFT_THREADS``) but accumulated into the
    canvas in position order, so the result does not depend on scheduling.
    An image no larger than one tile is passed through ``restore`` whole.
    """
    if blend not in ("feather", "hard"):
        raise ParameterError(f"blend must be 'feather' or 'hard', got {blend!r}")
    h, w = image.shape[:2]
    if h <= spec.tile and w <= spec.tile:
        return np.asarray(restore(image))
    th, tw = min(spec.tile, h), min(spec.tile, w)
    ys, xs = tile_starts(h, th, spec.step), tile_starts(w, tw, spec.step)
    boxes = [(y, x) for y in ys for x in xs]

    def run(box):
        y, x = box
        return np.asarray(restore(image[y:y + th, x:x + tw]), dtype=np.float64)

    workers = threads or thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(run, boxes))
    else:
        outputs = [run(b) for b in boxes]

    canvas = np.zeros(image.shape[:2] + (outputs[0].shape[2],))
    weight = np.zeros(image.shape[:2] + (1,))
    for (y, x), out in zip(boxes, outputs):
        wy = _axis_weights(ys, y, th, blend)
        wx = _axis_weights(xs, x, tw, blend)
        wgt = (wy[:, None] * wx[None, :])[:, :, None]
        canvas[y:y + th, x:x + tw] += out * wgt
        weight[y:y + th, x:x + tw] += wgt
    return (canvas / weight).astype(np.asarray(image).dtype)


def _axis_weights(starts: list[int], start: int, size: int, blend: str) -> np.ndarray:
    i = starts.index(start)
    prev_end = starts[i - 1] + size if i > 0 else start
    next_start = starts[i + 1] if i + 1 < len(starts) else start + size
    before = max(0, prev_end - start)
    after = max(0, start + size - next_start)
    if blend == "feather":
        return _ramp(size, before, after)
    w = np.ones(size)
    if before:
        w[:before // 2] = 0.0
    if after:
        w[size - after + after // 2:] = 0.0
    return w
