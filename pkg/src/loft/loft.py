"""Window partitioning, the attention variants, MGate and the LoFT block.

Layout conventions
------------------
* feature maps are ``(h, w, c)``;
* ``window_partition`` yields ``[m, c, n]`` with windows in raster order over
  the ``(h/b, w/b)`` grid and tokens in raster order inside each window;
* heads are contiguous channel groups, so ``[m, c, n]`` reshapes to
  ``[m, r, c_hat, n]``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .dct import DctPlan, dct2_forward, dct2_inverse, dct_plan
from .errors import ParameterError, ShapeError
from .tensor import Tensor, as_tensor

__all__ = [
    "VARIANTS",
    "WindowGrid",
    "AttentionConfig",
    "LoftBlockParams",
    "canonical_variant",
    "window_partition",
    "window_reverse",
    "freq_lc_attention",
    "spa_gc_attention",
    "variant_attention",
    "mgate",
    "lofn_forward",
    "gdfn_forward",
    "loft_block_forward",
]

VARIANTS = ("freq_lc", "spa_gc", "freq_gc", "freq_dc", "freq_ls")
_SPATIAL = ("spa_gc",)
_LN_PLACEMENTS = ("dct_ln", "ln_dct", "none")
_GATES = ("mgate", "cgate", "none")


def canonical_variant(name: str) -> str:
    """Map ``"Freq-LC"``-style names to the internal ``"freq_lc"`` form."""
    key = name.strip().lower().replace("-", "_")
    if key not in VARIANTS:
        raise ParameterError(f"unknown attention variant {name!r}; expected one of {VARIANTS}")
    return key


@dataclass(frozen=True)
class WindowGrid:
    """Non-overlapping ``b x b`` windows over an ``h x w`` map."""

    h: int
    w: int
    b: int

    def __post_init__(self):
        if self.b < 1:
            raise ShapeError(f"window side must be positive, got {self.b}")
        if self.h % self.b or self.w % self.b:
            raise ShapeError(f"{self.h}x{self.w} is not divisible by window {self.b}")

    @property
    def rows(self) -> int:
        return self.h // self.b

    @property
    def cols(self) -> int:
        return self.w // self.b

    @property
    def m(self) -> int:
        return self.rows * self.cols

    @property
    def n(self) -> int:
        return self.b * self.b

    def position(self, window: int, token: int) -> tuple[int, int]:
        """Map (window, token) back to its (row, col) in the feature map."""
        wr, wc = divmod(window, self.cols)
        tr, tc = divmod(token, self.b)
        return wr * self.b + tr, wc * self.b + tc


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    heads: int = 1
    window: int = 8
    variant: str = "freq_lc"
    ln_placement: str = "dct_ln"
    gate: str = "mgate"
    use_dwconv: bool = True
    ffn_expansion: float = 2.66
    padding: str = "zero"
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        ln = self.ln_placement.lower().replace("-", "_")
        object.__setattr__(self, "ln_placement", ln)
        if ln not in _LN_PLACEMENTS:
            raise ParameterError(f"ln_placement must be one of {_LN_PLACEMENTS}")
        if self.gate not in _GATES:
            raise ParameterError(f"gate must be one of {_GATES}")
        if self.heads < 1 or self.channels % self.heads:
            raise ParameterError(f"{self.channels} channels cannot split into {self.heads} heads")
        if self.padding not in ("zero", "reflect"):
            raise ParameterError(f"padding must be 'zero' or 'reflect', got {self.padding!r}")

    @property
    def c_hat(self) -> int:
        return self.channels // self.heads

    @property
    def hidden(self) -> int:
        return int(self.channels * self.ffn_expansion)

    @property
    def frequency_domain(self) -> bool:
        return self.variant not in _SPATIAL

    @property
    def gate_width(self) -> int:
        return self.c_hat if self.gate == "cgate" else self.window * self.window


@dataclass
class LoftBlockParams:
    """Learnable tensors of one LoFT block."""

    qkv_point: Tensor
    qkv_depth: Tensor
    alpha: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    mgate_weight: Tensor
    mgate_bias: Tensor
    out_proj: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ffn_in: Tensor
    ffn_depth: Tensor
    ffn_out: Tensor

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    @classmethod
    def shapes(cls, config: AttentionConfig) -> dict[str, tuple[int, ...]]:
        c, hid, g = config.channels, config.hidden, config.gate_width
        return {
            "qkv_point": (c, 3 * c),
            "qkv_depth": (3, 3, 3 * c),
            "alpha": (config.heads,),
            "ln1_gamma": (c,),
            "ln1_beta": (c,),
            "mgate_weight": (g, g),
            "mgate_bias": (g,),
            "out_proj": (c, c),
            "ln2_gamma": (c,),
            "ln2_beta": (c,),
            "ffn_in": (c, 2 * hid),
            "ffn_depth": (3, 3, 2 * hid),
            "ffn_out": (hid, c),
        }

    @classmethod
    def initialize(cls, config: AttentionConfig, rng: np.random.Generator,
                   dtype=np.float32, std: float = 0.02, gate_noise: float = 0.01) -> "LoftBlockParams":
        """Truncated-normal projections, unit temperatures, identity-biased MGate."""
        values = {}
        for name, shape in cls.shapes(config).items():
            if name in ("ln1_gamma", "ln2_gamma", "alpha"):
                arr = np.ones(shape)
            elif name in ("ln1_beta", "ln2_beta", "mgate_bias"):
                arr = np.zeros(shape)
            elif name == "mgate_weight":
                arr = np.eye(shape[0]) + gate_noise * rng.standard_normal(shape)
            else:
                arr = truncated_normal(rng, shape, std)
            values[name] = Tensor(arr.astype(dtype), name=name)
        return cls(**values)

    @classmethod
    def zeros(cls, config: AttentionConfig, dtype=np.float64) -> "LoftBlockParams":
        return cls(**{name: Tensor(np.zeros(shape, dtype=dtype), name=name)
                      for name, shape in cls.shapes(config).items()})


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


# window partition

def window_partition(z, grid: WindowGrid) -> Tensor:
    z = as_tensor(z)
    if z.ndim != 3 or z.shape[:2] != (grid.h, grid.w):
        raise ShapeError(f"grid is {grid.h}x{grid.w}, map has shape {z.shape}")
    c, b = z.shape[2], grid.b
    x = T.reshape(z, (grid.rows, b, grid.cols, b, c))
    x = T.transpose(x, (0, 2, 4, 1, 3))
    return T.reshape(x, (grid.m, c, grid.n))


def window_reverse(wins, grid: WindowGrid) -> Tensor:
    wins = as_tensor(wins)
    if wins.ndim != 3 or wins.shape[0] != grid.m or wins.shape[2] != grid.n:
        raise ShapeError(f"expected [{grid.m}, c, {grid.n}] windows, got {wins.shape}")
    c, b = wins.shape[1], grid.b
    x = T.reshape(wins, (grid.rows, grid.cols, c, b, b))
    x = T.transpose(x, (0, 3, 1, 4, 2))
    return T.reshape(x, (grid.h, grid.w, c))


def _tokens(x: Tensor) -> Tensor:
    """(h, w, c) -> (c, N) with raster-ordered tokens."""
    h, w, c = x.shape
    return T.transpose(T.reshape(x, (h * w, c)), (1, 0))


def _untokens(t: Tensor, h: int, w: int) -> Tensor:
    return T.reshape(T.transpose(t, (1, 0)), (h, w, t.shape[0]))


def _split_heads(x: Tensor, heads: int, channel_axis: int) -> Tensor:
    shape = list(x.shape)
    c = shape[channel_axis]
    if c % heads:
        raise ShapeError(f"{c} channels do not split into {heads} heads")
    shape[channel_axis:channel_axis + 1] = [heads, c // heads]
    return T.reshape(x, shape)


def _merge_heads(x: Tensor, head_axis: int) -> Tensor:
    shape = list(x.shape)
    shape[head_axis:head_axis + 2] = [shape[head_axis] * shape[head_axis + 1]]
    return T.reshape(x, shape)


# attention kernels

def _alpha_vector(alpha, heads: int, dtype) -> Tensor:
    if isinstance(alpha, Tensor):
        if alpha.shape == (heads,):
            return alpha
        if alpha.data.size == 1:
            return T.reshape(alpha, (1,)) if heads == 1 else Tensor(np.full(heads, alpha.data.item(), dtype=dtype))
        raise ShapeError(f"alpha {alpha.shape} does not match {heads} heads")
    arr = np.broadcast_to(np.asarray(alpha, dtype=dtype), (heads,)).copy()
    return Tensor(arr)


def _check_alpha_positive(alpha) -> None:
    data = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
    if np.any(data <= 0):
        raise ParameterError("alpha must be positive")


def _channel_attention(q: Tensor, k: Tensor, v: Tensor, alpha, head_axis: int):
    """Softmax(q k^T / alpha) v over the last two axes ``[..., c_hat, n]``."""
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    a = _alpha_vector(alpha, q.shape[head_axis], q.dtype)
    axes = tuple(range(q.ndim - 2)) + (q.ndim - 1, q.ndim - 2)
    logits = T.matmul(q, T.transpose(k, axes))
    attn = T.softmax(T.temperature_scale(logits, a, head_axis))
    return T.matmul(attn, v), attn


def _token_attention(q: Tensor, k: Tensor, v: Tensor, alpha, head_axis: int):
    """Spatial-wise attention over the token axis: maps are ``[..., n, n]``."""
    a = _alpha_vector(alpha, q.shape[head_axis], q.dtype)
    axes = tuple(range(q.ndim - 2)) + (q.ndim - 1, q.ndim - 2)
    logits = T.matmul(T.transpose(q, axes), k)
    attn = T.softmax(T.temperature_scale(logits, a, head_axis))
    return T.matmul(v, T.transpose(attn, axes)), attn


def freq_lc_attention(q, k, v, alpha=1.0):
    """Channel attention inside each window.

    ``q, k, v`` are ``[m, r, c_hat, n]``; returns the output with the same
    shape and the row-stochastic maps ``[m, r, c_hat, c_hat]``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 4:
        raise ShapeError(f"expected [m, r, c_hat, n], got {q.shape}")
    _check_alpha_positive(alpha)
    return _channel_attention(q, k, v, alpha, head_axis=1)


def spa_gc_attention(q, k, v, alpha=1.0):
    """Global channel attention; ``q, k, v`` are ``[r, c_hat, N]``."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3:
        raise ShapeError(f"expected [r, c_hat, N], got {q.shape}")
    _check_alpha_positive(alpha)
    return _channel_attention(q, k, v, alpha, head_axis=0)


def variant_attention(variant: str, q, k, v, grid: WindowGrid | None = None, heads: int = 1, alpha=1.0):
    """Run one attention variant on ``(h, w, c)`` maps; returns ``(output, maps)``.

    * ``freq_gc`` / ``spa_gc``: channel attention over all ``N`` tokens
      (maps ``[r, c_hat, c_hat]``); the two differ only in the caller's domain;
    * ``freq_lc``: channel attention per window (maps ``[m, r, c_hat, c_hat]``);
    * ``freq_dc``: channel attention per dilated group; group ``j`` gathers the
      token at intra-window offset ``j`` from every window, so there are ``n``
      groups of ``m`` tokens (maps ``[n, r, c_hat, c_hat]``);
    * ``freq_ls``: token attention inside each window (maps ``[m, r, n, n]``).
    """
    variant = canonical_variant(variant)
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    h, w = q.shape[:2]
    if variant in ("freq_gc", "spa_gc"):
        parts = [_split_heads(_tokens(t), heads, 0) for t in (q, k, v)]
        out, maps = _channel_attention(*parts, alpha, head_axis=0)
        return _untokens(_merge_heads(out, 0), h, w), maps
    if grid is None:
        raise ShapeError(f"variant {variant!r} needs a window grid")
    parts = [window_partition(t, grid) for t in (q, k, v)]
    if variant == "freq_dc":
        parts = [T.transpose(t, (2, 1, 0)) for t in parts]
    parts = [_split_heads(t, heads, 1) for t in parts]
    if variant == "freq_ls":
        out, maps = _token_attention(*parts, alpha, head_axis=1)
    else:
        out, maps = _channel_attention(*parts, alpha, head_axis=1)
    out = _merge_heads(out, 1)
    if variant == "freq_dc":
        out = T.transpose(out, (2, 1, 0))
    return window_reverse(out, grid), maps


def mgate(v_windows, weight, bias=None, axis: str = "window") -> Tensor:
    """GELU(Linear(v)) along the token (``"window"``) or channel axis of ``[m, r, c_hat, n]``."""
    v_windows, weight = as_tensor(v_windows), as_tensor(weight)
    if axis == "window":
        dim = -1
    elif axis == "channel":
        dim = -2
    else:
        raise ParameterError(f"gate axis must be 'window' or 'channel', got {axis!r}")
    width = v_windows.shape[dim]
    if weight.shape != (width, width):
        raise ShapeError(f"gate weight {weight.shape} must be ({width}, {width}) for axis {axis!r}")
    return T.gelu(T.linear_map(v_windows, weight, bias, axis=dim))


# blocks

def _gate_map(v: Tensor, params: LoftBlockParams, config: AttentionConfig, grid: WindowGrid) -> Tensor:
    wins = _split_heads(window_partition(v, grid), config.heads, 1)
    axis = "channel" if config.gate == "cgate" else "window"
    gated = mgate(wins, params.mgate_weight, params.mgate_bias, axis=axis)
    return window_reverse(_merge_heads(gated, 1), grid)


def lofn_forward(x, params: LoftBlockParams, config: AttentionConfig,
                 plan: DctPlan | None = None, grid: WindowGrid | None = None,
                 return_maps: bool = False):
    """Local frequency network: DCT, LN, QKV, windowed attention times gate, projection, IDCT."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[2] != config.channels:
        raise ShapeError(f"expected (h, w, {config.channels}) input, got {x.shape}")
    h, w, c = x.shape
    if grid is None:
        grid = WindowGrid(h, w, config.window)
    elif (grid.h, grid.w) != (h, w):
        raise ShapeError(f"grid {grid.h}x{grid.w} does not match input {h}x{w}")
    freq = config.frequency_domain
    if freq and plan is None:
        plan = dct_plan(h, w)

    def norm(t):
        return T.channel_layernorm(t, params.ln1_gamma, params.ln1_beta, config.eps)

    if not freq:
        z = x if config.ln_placement == "none" else norm(x)
    elif config.ln_placement == "dct_ln":
        z = norm(dct2_forward(x, plan))
    elif config.ln_placement == "ln_dct":
        z = dct2_forward(norm(x), plan)
    else:
        z = dct2_forward(x, plan)

    qkv = T.conv1x1(z, params.qkv_point)
    if config.use_dwconv:
        qkv = T.dwconv3x3(qkv, params.qkv_depth, padding=config.padding)
    q, k, v = (qkv[:, :, i * c:(i + 1) * c] for i in range(3))
    out, maps = variant_attention(config.variant, q, k, v, grid, config.heads, params.alpha)
    if config.gate != "none":
        out = T.mul(out, _gate_map(v, params, config, grid))
    out = T.conv1x1(out, params.out_proj)
    if freq:
        out = dct2_inverse(out, plan)
    return (out, maps) if return_maps else out


def gdfn_forward(x, params: LoftBlockParams, config: AttentionConfig) -> Tensor:
    """Gated depthwise-conv feed-forward network."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[2] != config.channels:
        raise ShapeError(f"expected (h, w, {config.channels}) input, got {x.shape}")
    hid = config.hidden
    y = T.channel_layernorm(x, params.ln2_gamma, params.ln2_beta, config.eps)
    y = T.conv1x1(y, params.ffn_in)
    y = T.dwconv3x3(y, params.ffn_depth, padding=config.padding)
    y = T.mul(T.gelu(y[:, :, :hid]), y[:, :, hid:])
    return T.conv1x1(y, params.ffn_out)


def loft_block_forward(x, params: LoftBlockParams, config: AttentionConfig,
                       plan: DctPlan | None = None, grid: WindowGrid | None = None) -> Tensor:
    """``y = x + LoFN(x)``, then ``y + GDFN(y)``."""
    x = as_tensor(x)
    y = T.add(x, lofn_forward(x, params, config, plan, grid))
    return T.add(y, gdfn_forward(y, params, config))
