"""FLOPs model, losses, image metrics and the attention/frequency diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import tensor as T
from .dct import FrequencyMask, dct2_forward, dct2_inverse, mask_indices
from .errors import ContractError, ParameterError, ShapeError
from .loft import WindowGrid, variant_attention
from .tensor import Tensor, as_tensor

__all__ = [
    "FlopsReport",
    "FLOPS_VARIANTS",
    "TABLE_VARIANTS",
    "sa_flops",
    "flops_table",
    "reports_to_csv",
    "reports_to_json",
    "LossConfig",
    "dft2_parts",
    "l1_loss",
    "frequency_reconstruction_loss",
    "total_loss",
    "psnr",
    "ssim",
    "PSNR_CAP",
    "verify_prop1",
    "verify_prop2",
    "attention_similarity",
    "partial_attention_maps",
    "low_frequency_energy",
    "FrequencyCurve",
    "partial_frequency_psnr",
]


# FLOPs

FLOPS_VARIANTS = {
    "spa_ls": ("Spa-LS", "2NCn"),
    "spa_gc": ("Spa-GC", "2NCĈ"),
    "freq_gc": ("Freq-GC", "2NC(Ĉ+log2(N))"),
    "spa_filter_gc": ("Spa Filter-GC", "2NC(NĈ+log2(N))"),
    "freq_lc": ("Freq-LC", "2NC(Ĉ+log2(N))"),
    "freq_dc": ("Freq-DC", "2NC(Ĉ+log2(N))"),
    "freq_ls": ("Freq-LS", "2NCn"),
}

#: Rows of the published comparison, in order.
TABLE_VARIANTS = ("spa_ls", "spa_gc", "freq_gc", "spa_filter_gc", "freq_lc")


@dataclass(frozen=True)
class FlopsReport:
    variant: str
    H: int
    W: int
    C: int
    b: int
    r: int
    formula: str
    flops: int | float

    @property
    def label(self) -> str:
        return FLOPS_VARIANTS[self.variant][0]

    @property
    def mflops(self) -> float:
        return self.flops / 1e6

    def row(self) -> dict:
        return {"variant": self.label, "H": self.H, "W": self.W, "C": self.C, "b": self.b,
                "r": self.r, "formula": self.formula, "flops": self.flops,
                "mflops": round(self.mflops)}


def _log2(n: int) -> int | float:
    if n & (n - 1) == 0:
        return n.bit_length() - 1
    return math.log2(n)


def sa_flops(variant: str, H: int, W: int, C: int, b: int, r: int = 1) -> FlopsReport:
    """Evaluate the closed-form attention cost for ``variant``.

    Integer arithmetic throughout when ``N = H*W`` is a power of two.
    """
    key = variant.strip().lower().replace("-", "_").replace(" ", "_")
    if key not in FLOPS_VARIANTS:
        raise ParameterError(f"unknown variant {variant!r}; expected one of {sorted(FLOPS_VARIANTS)}")
    if min(H, W, C, b, r) < 1:
        raise ParameterError("H, W, C, b and r must be positive")
    if C % r:
        raise ParameterError(f"C={C} is not divisible by r={r}")
    N, n, c_hat = H * W, b * b, C // r
    log_n = _log2(N)
    cost = {
        "spa_ls": lambda: 2 * N * C * n,
        "spa_gc": lambda: 2 * N * C * c_hat,
        "freq_gc": lambda: 2 * N * C * (c_hat + log_n),
        "spa_filter_gc": lambda: 2 * N * C * (N * c_hat + log_n),
        "freq_lc": lambda: 2 * N * C * (c_hat + log_n),
        "freq_dc": lambda: 2 * N * C * (c_hat + log_n),
        "freq_ls": lambda: 2 * N * C * n,
    }[key]()
    return FlopsReport(key, H, W, C, b, r, FLOPS_VARIANTS[key][1], cost)


def flops_table(H: int = 256, W: int = 256, C: int = 32, b: int = 8, r: int = 1,
                variants: Sequence[str] = TABLE_VARIANTS) -> list[FlopsReport]:
    return [sa_flops(v, H, W, C, b, r) for v in variants]


_CSV_COLUMNS = ("variant", "H", "W", "C", "b", "r", "formula", "flops", "mflops")


def reports_to_csv(reports: Iterable[FlopsReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow(rep.row())
    return buf.getvalue()


def reports_to_json(reports: Iterable[FlopsReport]) -> str:
    return json.dumps([rep.row() for rep in reports], indent=2, ensure_ascii=False)


# losses

@dataclass(frozen=True)
class LossConfig:
    l1_weight: float = 1.0
    fr_weight: float = 0.01

    def __post_init__(self):
        if self.l1_weight < 0 or self.fr_weight < 0:
            raise ParameterError("loss weights must be non-negative")


def dft2_parts(x) -> Tensor:
    """Unnormalised 2D DFT over the two leading axes, as ``[2, h, w, ...]`` (real, imaginary)."""
    x = as_tensor(x)
    f = np.fft.fft2(x.data, axes=(0, 1))
    out = np.stack([f.real, f.imag]).astype(x.dtype, copy=False)

    def vjp(g):
        # the DFT matrix is symmetric, so the adjoint of Re/Im is Re/Im of F applied to g
        return ((np.fft.fft2(g[0], axes=(0, 1)).real + np.fft.fft2(g[1], axes=(0, 1)).imag).astype(g.dtype),)

    return T._make(out, (x,), vjp)


def _check_pair(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")


def l1_loss(pred, target) -> Tensor:
    """Mean absolute difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_pair(pred, target)
    return T.mean(T.abs_(T.sub(pred, target)))


def frequency_reconstruction_loss(pred, target) -> Tensor:
    """Mean absolute difference of the real and imaginary DFT parts, per channel."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_pair(pred, target)
    return T.mean(T.abs_(dft2_parts(T.sub(pred, target))))


def total_loss(pred, target, config: LossConfig = LossConfig()) -> Tensor:
    return T.add(T.mul(l1_loss(pred, target), config.l1_weight),
                 T.mul(frequency_reconstruction_loss(pred, target), config.fr_weight))


# metrics

PSNR_CAP = 100.0


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_range(a: np.ndarray, peak: float) -> None:
    if a.min() < 0 or a.max() > peak:
        raise ContractError(f"values must lie in [0, {peak}], got [{a.min()}, {a.max()}]")


def psnr(a, b, peak: float = 1.0, check_range: bool = True) -> float:
    """``10 log10(peak^2 / MSE)``, capped at :data:`PSNR_CAP` dB."""
    a, b = _array(a).astype(np.float64), _array(b).astype(np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if check_range:
        _check_range(a, peak)
        _check_range(b, peak)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")
    return out[r:-r, r:-r]


def ssim(a, b, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03,
         window: int = 11, sigma: float = 1.5, check_range: bool = True) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Multi-channel inputs ``(h, w, c)`` are averaged over channels. Statistics
    use population (not sample) covariance and only fully covered windows.
    """
    a, b = _array(a).astype(np.float64), _array(b).astype(np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[:2]) < window:
        raise ShapeError(f"images must be at least {window}x{window} for SSIM")
    if check_range:
        _check_range(a, peak)
        _check_range(b, peak)
    g = _gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


# equivalence oracles

def _qkv(rng: np.random.Generator, dims, scale: float) -> list[np.ndarray]:
    return [scale * rng.standard_normal(dims) for _ in range(3)]


def verify_prop1(seed: int = 0, dims: tuple[int, int, int] = (16, 16, 8), heads: int = 1,
                 alpha: float = 1.0, depthwise: bool = False, zero: bool = False) -> float:
    """Max |Spa-GC(q, k, v) - IDCT(Freq-GC(DCT q, DCT k, DCT v))| on random inputs.

    ``depthwise=True`` inserts the same random 3x3 depthwise convolution in
    front of both attention calls, which breaks the equivalence (negative
    control).
    """
    h, w, c = dims
    if max(dims) > 64:
        raise ShapeError("verify_prop1 is meant for small maps")
    rng = np.random.default_rng(seed)
    q, k, v = _qkv(rng, dims, (h * w) ** -0.25)
    if zero:
        q, k, v = (np.zeros(dims) for _ in range(3))
    kernels = rng.standard_normal((3, 3, c)) if depthwise else None

    def prep(t):
        t = as_tensor(t)
        return T.dwconv3x3(t, kernels) if depthwise else t

    spatial, _ = variant_attention("spa_gc", prep(q), prep(k), prep(v), None, heads, alpha)
    fq, fk, fv = (prep(dct2_forward(t)) for t in (q, k, v))
    freq, _ = variant_attention("freq_gc", fq, fk, fv, None, heads, alpha)
    back = dct2_inverse(freq)
    return float(np.max(np.abs(spatial.data - back.data)))


def window_indicator(grid: WindowGrid, window: int) -> np.ndarray:
    """``(h, w, 1)`` mask that is one on ``window`` and zero elsewhere."""
    mask = np.zeros((grid.h, grid.w, 1))
    wr, wc = divmod(window, grid.cols)
    mask[wr * grid.b:(wr + 1) * grid.b, wc * grid.b:(wc + 1) * grid.b] = 1.0
    return mask


def verify_prop2(seed: int = 0, dims: tuple[int, int, int] = (8, 8, 4), b: int = 2,
                 heads: int = 1, alpha: float = 1.0, qkv=None) -> float:
    """Max |window-reverse(per-window attention) - sum of zero-padded global attentions|.

    Each zero-padded term keeps one window of ``q, k, v`` and zeros the rest,
    then runs global channel attention over all ``N`` tokens.
    """
    grid = WindowGrid(dims[0], dims[1], b)
    if qkv is None:
        rng = np.random.default_rng(seed)
        qkv = _qkv(rng, dims, 1.0)
    q, k, v = (np.asarray(t, dtype=np.float64) for t in qkv)
    local, _ = variant_attention("freq_lc", q, k, v, grid, heads, alpha)
    total = np.zeros(dims)
    for i in range(grid.m):
        mask = window_indicator(grid, i)
        out, _ = variant_attention("freq_gc", q * mask, k * mask, v * mask, None, heads, alpha)
        total = total + out.data
    return float(np.max(np.abs(local.data - total)))


# attention diagnostics

def attention_similarity(attn_maps, grid_shape: tuple[int, int] | None = None,
                         diagonal: bool = True) -> np.ndarray:
    """Cosine similarity between flattened per-window attention maps.

    ``attn_maps`` is ``[m, ...]``. With ``diagonal`` (default) only windows on
    the main diagonal of the ``grid_shape`` window grid are compared; the grid
    defaults to square. Zero-norm maps get similarity 0 and raise a warning.
    """
    maps = _array(attn_maps)
    m = maps.shape[0]
    flat = maps.reshape(m, -1)
    if not np.all(np.isfinite(flat)):
        raise ContractError("attention maps contain non-finite values")
    if diagonal:
        if grid_shape is None:
            side = math.isqrt(m)
            if side * side != m:
                raise ShapeError(f"{m} windows do not form a square grid; pass grid_shape")
            grid_shape = (side, side)
        rows, cols = grid_shape
        if rows * cols != m:
            raise ShapeError(f"grid {grid_shape} does not hold {m} windows")
        flat = flat[[i * cols + i for i in range(min(rows, cols))]]
    norms = np.linalg.norm(flat, axis=1)
    zero = norms == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} attention map(s) have zero norm; similarity set to 0",
                      RuntimeWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norms)
    unit = flat / safe[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return sim


def partial_attention_maps(attn_maps, grid_shape: tuple[int, int], ratio: float,
                           kind: str = "low") -> np.ndarray:
    """Keep maps of windows inside the ratio corner of the window grid; edge-replicate the rest.

    Windows outside the kept corner copy the map of the nearest kept window,
    found by clamping the window's (row, col) into the kept corner.
    """
    maps = _array(attn_maps)
    rows, cols = grid_shape
    if rows * cols != maps.shape[0]:
        raise ShapeError(f"grid {grid_shape} does not hold {maps.shape[0]} windows")
    FrequencyMask(rows, cols, kind, ratio)  # validates kind and ratio
    kr, kc = mask_indices(rows, cols, ratio)
    r_idx = np.arange(rows)
    c_idx = np.arange(cols)
    if kind == "low":
        r_src, c_src = np.minimum(r_idx, kr - 1), np.minimum(c_idx, kc - 1)
    else:
        r_src, c_src = np.maximum(r_idx, rows - kr), np.maximum(c_idx, cols - kc)
    src = (r_src[:, None] * cols + c_src[None, :]).reshape(-1)
    return maps[src]


def low_frequency_energy(image, ratio: float) -> float:
    """Fraction of squared DCT energy inside the low-pass ``ratio`` corner."""
    img = _array(image)
    if img.ndim == 2:
        img = img[:, :, None]
    z = dct2_forward(img).data
    keep = FrequencyMask(img.shape[0], img.shape[1], "low", ratio).array()
    total = float(np.sum(z * z))
    return float(np.sum((z * z)[keep])) / total if total else 1.0


@dataclass
class FrequencyCurve:
    kind: str
    ratios: list[float]
    psnr: list[float]

    def to_csv(self) -> str:
        lines = ["kind,ratio,psnr"]
        lines += [f"{self.kind},{r:.6g},{p:.6f}" for r, p in zip(self.ratios, self.psnr)]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _band_limited(img: np.ndarray, mask: FrequencyMask) -> np.ndarray:
    return dct2_inverse(dct2_forward(img).data * mask.array()[:, :, None]).data


def partial_frequency_psnr(restore: Callable, degraded, reference, ratios: Sequence[float],
                           kind: str = "low", peak: float = 1.0) -> FrequencyCurve:
    """PSNR between band-limited restored and reference images for each ratio.

    ``restore`` maps an ``(h, w, 3)`` array to a restored image (a model or any
    callable). Both images are masked in the DCT domain with the same
    :class:`FrequencyMask` before the PSNR is taken.
    """
    if not ratios:
        raise ParameterError("at least one ratio is required")
    degraded = _array(degraded)
    reference = _array(reference).astype(np.float64)
    restored = _array(restore(degraded)).astype(np.float64)
    h, w = reference.shape[:2]
    values = []
    for ratio in ratios:
        mask = FrequencyMask(h, w, kind, float(ratio))
        values.append(psnr(_band_limited(restored, mask), _band_limited(reference, mask),
                           peak=peak, check_range=False))
    return FrequencyCurve(kind, [float(r) for r in ratios], values)
