"""Full-batch toy training on a single image pair."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import LossConfig, total_loss
from .errors import DivergenceError, ParameterError
from .model import Model, ModelConfig, build_model, forward
from .tensor import GradTape, Tensor, backward


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        if lr < 0:
            raise ParameterError("learning rate must be non-negative")
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: dict[Tensor, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if lr == 0:
                continue
            p.data *= 1 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(step: int, total: int, base: float, floor: float = 1e-6) -> float:
    """Cosine annealing from ``base`` down to ``floor`` (clamped below ``base``)."""
    floor = min(floor, base)
    if total <= 1:
        return base
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * step / (total - 1)))


@dataclass
class TrainResult:
    model: Model
    losses: list[float] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.losses[-1] / self.losses[0]

    def trace_csv(self) -> str:
        return "step,loss\n" + "".join(f"{i},{v:.10g}\n" for i, v in enumerate(self.losses))


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if size > min(h, w):
        raise ParameterError(f"crop {size} larger than image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return image[top:top + size, left:left + size]


def train_toy(blurred: np.ndarray, sharp: np.ndarray, config: ModelConfig | None = None, *,
              steps: int = 200, lr: float = 1e-2, seed: int = 0,
              loss_config: LossConfig = LossConfig(), schedule: str = "cosine",
              weight_decay: float = 1e-4) -> TrainResult:
    """Fit ``config`` (tiny preset by default) to map ``blurred`` onto ``sharp``.

    Training runs in float64 with AdamW. ``losses[i]`` is the loss evaluated
    before update ``i``, plus a final entry after the last update, so the
    trace has ``steps + 1`` values.
    """
    config = config or ModelConfig.preset("tiny")
    model = build_model(config, seed=seed).astype(np.float64).requires_grad_(True)
    x = np.asarray(blurred, dtype=np.float64)
    y = np.asarray(sharp, dtype=np.float64)
    params = model.parameters()
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    result = TrainResult(model)
    for step in range(steps + 1):
        with GradTape() as tape:
            loss = total_loss(forward(model, x), y, loss_config)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {step}")
        result.losses.append(value)
        if step == steps:
            break
        grads = backward(tape, loss)
        rate = cosine_lr(step, steps, lr) if schedule == "cosine" else lr
        opt.step(grads, lr=rate)
    model.requires_grad_(False).astype(np.float32)
    return result
