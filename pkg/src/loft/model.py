"""Four-level encoder/decoder built from LoFT blocks, plus weight files."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, WeightFormatError, WeightIntegrityError
from .loft import AttentionConfig, LoftBlockParams, canonical_variant, loft_block_forward, truncated_normal
from .tensor import Tensor, as_tensor

__all__ = [
    "PRESETS",
    "ModelConfig",
    "Model",
    "build_model",
    "forward",
    "pixel_unshuffle",
    "pixel_shuffle",
    "save_weights",
    "load_weights",
    "WEIGHT_MAGIC",
    "WEIGHT_VERSION",
]

PRESETS = {
    "S": dict(depths=(2, 4, 6, 14), refine=2, base_channels=32),
    "B": dict(depths=(2, 4, 12, 18), refine=2, base_channels=36),
    "L": dict(depths=(2, 4, 12, 18), refine=2, base_channels=48),
    "tiny": dict(depths=(1, 1, 1, 1), refine=1, base_channels=8, window=4),
}


@dataclass(frozen=True)
class ModelConfig:
    depths: tuple[int, int, int, int] = (2, 4, 6, 14)
    refine: int = 2
    base_channels: int = 32
    heads: tuple[int, int, int, int] = (1, 2, 4, 8)
    window: int = 8
    variant: str = "freq_lc"
    ln_placement: str = "dct_ln"
    gate: str = "mgate"
    ffn_expansion: float = 2.66
    padding: str = "zero"
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(r) for r in self.heads))
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("depths and heads need exactly four entries")
        if min(self.depths) < 1 or self.refine < 0:
            raise ConfigError(f"invalid depths {self.depths} / refine {self.refine}")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError(f"base_channels must be even and >= 2, got {self.base_channels}")
        if self.window < 1:
            raise ConfigError(f"window must be positive, got {self.window}")
        for level, r in enumerate(self.heads):
            if (self.base_channels << level) % r:
                raise ConfigError(f"level {level + 1} width {self.base_channels << level} "
                                  f"is not divisible by {r} heads")
        try:
            object.__setattr__(self, "variant", canonical_variant(self.variant))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], "name": name, **overrides})

    @property
    def multiple(self) -> int:
        """Input extents are padded to a multiple of this value."""
        return 8 * self.window

    def attention(self, level: int) -> AttentionConfig:
        return AttentionConfig(
            channels=self.base_channels << level,
            heads=self.heads[level],
            window=self.window,
            variant=self.variant,
            ln_placement=self.ln_placement,
            gate=self.gate,
            ffn_expansion=self.ffn_expansion,
            padding=self.padding,
        )

    def stages(self) -> list[tuple[str, int, int]]:
        """``(stage name, level, block count)``; decoder depths mirror the encoder."""
        d = self.depths
        return [
            ("enc1", 0, d[0]), ("enc2", 1, d[1]), ("enc3", 2, d[2]), ("latent", 3, d[3]),
            ("dec3", 2, d[2]), ("dec2", 1, d[1]), ("dec1", 0, d[0]), ("refine", 0, self.refine),
        ]

    def block_count(self) -> int:
        return sum(n for _, _, n in self.stages())

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            return cls(**json.loads(text))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad config blob: {exc}") from exc


def pixel_unshuffle(x, factor: int = 2) -> Tensor:
    """Space-to-depth: ``(h, w, c) -> (h/f, w/f, c*f*f)``, channel-major."""
    x = as_tensor(x)
    h, w, c = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} not divisible by {factor}")
    y = T.reshape(x, (h // factor, factor, w // factor, factor, c))
    y = T.transpose(y, (0, 2, 4, 1, 3))
    return T.reshape(y, (h // factor, w // factor, c * factor * factor))


def pixel_shuffle(x, factor: int = 2) -> Tensor:
    """Inverse of :func:`pixel_unshuffle`."""
    x = as_tensor(x)
    h, w, cf = x.shape
    c = cf // (factor * factor)
    if c * factor * factor != cf:
        raise ShapeError(f"{cf} channels not divisible by {factor * factor}")
    y = T.reshape(x, (h, w, c, factor, factor))
    y = T.transpose(y, (0, 3, 1, 4, 2))
    return T.reshape(y, (h * factor, w * factor, c))


@dataclass
class Model:
    config: ModelConfig
    layers: dict[str, Tensor] = field(default_factory=dict)
    blocks: dict[str, list[LoftBlockParams]] = field(default_factory=dict)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("embed.point", "embed.depth"):
            yield name, self.layers[name]
        for stage, _, _ in self.config.stages():
            for i, block in enumerate(self.blocks[stage]):
                for pname, t in block.items():
                    yield f"{stage}.{i}.{pname}", t
            adapter = _ADAPTERS.get(stage)
            if adapter:
                for name in adapter:
                    yield name, self.layers[name]
        for name in ("head.depth", "head.point", "head.bias"):
            yield name, self.layers[name]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def requires_grad_(self, flag: bool = True) -> "Model":
        for t in self.parameters():
            t.requires_grad = flag
        return self

    def astype(self, dtype) -> "Model":
        """Cast every parameter in place."""
        for t in self.parameters():
            t.data = t.data.astype(dtype)
        return self

    def zero_head(self) -> "Model":
        """Zero the output projection so the model restores to its input."""
        for name in ("head.point", "head.bias"):
            self.layers[name].data[...] = 0
        return self

    def __call__(self, image) -> Tensor:
        return forward(self, image)


# adapter layers that follow each stage
_ADAPTERS = {
    "enc1": ("down1.point",),
    "enc2": ("down2.point",),
    "enc3": ("down3.point",),
    "latent": ("up4.point", "reduce3.point"),
    "dec3": ("up3.point", "reduce2.point"),
    "dec2": ("up2.point", "reduce1.point"),
}


def _layer_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config.base_channels
    return {
        "embed.point": (3, c),
        "embed.depth": (3, 3, c),
        "down1.point": (c, c // 2),
        "down2.point": (2 * c, c),
        "down3.point": (4 * c, 2 * c),
        "up4.point": (8 * c, 16 * c),
        "reduce3.point": (8 * c, 4 * c),
        "up3.point": (4 * c, 8 * c),
        "reduce2.point": (4 * c, 2 * c),
        "up2.point": (2 * c, 4 * c),
        "reduce1.point": (2 * c, c),
        "head.depth": (3, 3, c),
        "head.point": (c, 3),
        "head.bias": (3,),
    }


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialise every parameter from ``seed``."""
    rng = np.random.default_rng(seed)
    shapes = _layer_shapes(config)
    model = Model(config)
    # draw in serialization order so the stream is fixed by the architecture
    layer_names = [n for n, _ in _iter_layer_order(config)]
    for name in layer_names:
        if name.startswith("block:"):
            _, stage, level = name.split(":")
            cfg = config.attention(int(level))
            model.blocks.setdefault(stage, []).append(LoftBlockParams.initialize(cfg, rng, dtype=dtype))
            continue
        shape = shapes[name]
        arr = np.zeros(shape) if name == "head.bias" else truncated_normal(rng, shape, 0.02)
        model.layers[name] = Tensor(arr.astype(dtype), name=name)
    for stage, _, _ in config.stages():
        model.blocks.setdefault(stage, [])
    return model


def _iter_layer_order(config: ModelConfig):
    yield "embed.point", None
    yield "embed.depth", None
    for stage, level, count in config.stages():
        for _ in range(count):
            yield f"block:{stage}:{level}", None
        for name in _ADAPTERS.get(stage, ()):
            yield name, None
    yield "head.depth", None
    yield "head.point", None
    yield "head.bias", None


def _run_stage(x: Tensor, model: Model, stage: str, level: int) -> Tensor:
    cfg = model.config.attention(level)
    for params in model.blocks[stage]:
        x = loft_block_forward(x, params, cfg)
    return x


def forward(model: Model, image) -> Tensor:
    """Restore an ``(h, w, 3)`` image; output has the input's extents.

    The input is reflect-padded to a multiple of ``8 * window`` and the result
    cropped back; a global residual adds the (padded) input to the head output.
    """
    image = as_tensor(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an (h, w, 3) image, got {image.shape}")
    h, w, _ = image.shape
    mult = model.config.multiple
    ph, pw = -h % mult, -w % mult
    x_in = T.pad(image, [(0, ph), (0, pw)], mode="reflect") if (ph or pw) else image
    L = model.layers

    x = T.dwconv3x3(T.conv1x1(x_in, L["embed.point"]), L["embed.depth"], padding=model.config.padding)
    e1 = _run_stage(x, model, "enc1", 0)
    e2 = _run_stage(pixel_unshuffle(T.conv1x1(e1, L["down1.point"])), model, "enc2", 1)
    e3 = _run_stage(pixel_unshuffle(T.conv1x1(e2, L["down2.point"])), model, "enc3", 2)
    lat = _run_stage(pixel_unshuffle(T.conv1x1(e3, L["down3.point"])), model, "latent", 3)

    d3 = pixel_shuffle(T.conv1x1(lat, L["up4.point"]))
    d3 = _run_stage(T.conv1x1(T.concat([d3, e3]), L["reduce3.point"]), model, "dec3", 2)
    d2 = pixel_shuffle(T.conv1x1(d3, L["up3.point"]))
    d2 = _run_stage(T.conv1x1(T.concat([d2, e2]), L["reduce2.point"]), model, "dec2", 1)
    d1 = pixel_shuffle(T.conv1x1(d2, L["up2.point"]))
    d1 = _run_stage(T.conv1x1(T.concat([d1, e1]), L["reduce1.point"]), model, "dec1", 0)
    r = _run_stage(d1, model, "refine", 0)

    y = T.dwconv3x3(r, L["head.depth"], padding=model.config.padding)
    y = T.add(T.conv1x1(y, L["head.point"], L["head.bias"]), x_in)
    return y[:h, :w, :] if (ph or pw) else y


# weight files

WEIGHT_MAGIC = b"LOFT"
WEIGHT_VERSION = 1


def save_weights(model: Model, path) -> None:
    """Write ``model`` as: magic, u32 version, u32+JSON config, u32 tensor count,
    then per tensor u32 name length, name, u32 rank, u64 dims, f32 LE data;
    a trailing u32 CRC-32 covers everything before it."""
    parts = [WEIGHT_MAGIC, struct.pack("<I", WEIGHT_VERSION)]
    blob = model.config.to_json().encode()
    parts += [struct.pack("<I", len(blob)), blob]
    named = list(model.named_parameters())
    parts.append(struct.pack("<I", len(named)))
    for name, t in named:
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", t.ndim)]
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightIntegrityError("weight file is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHT_MAGIC:
        raise WeightFormatError(f"{path}: not a LOFT weight file")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    if len(data) < 12:
        raise WeightIntegrityError("weight file is truncated")
    (crc,) = struct.unpack("<I", data[-4:])
    (blob_len,) = r.unpack("<I")
    config = ModelConfig.from_json(r.take(blob_len).decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode()
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos + 4 != len(data):
        raise WeightIntegrityError("weight file has trailing or missing bytes")
    if zlib.crc32(data[:-4]) != crc:
        raise WeightIntegrityError("weight file checksum mismatch")

    model = build_model(config, seed=0)
    expected = [name for name, _ in model.named_parameters()]
    if sorted(expected) != sorted(tensors):
        missing = set(expected) - set(tensors)
        extra = set(tensors) - set(expected)
        raise WeightFormatError(f"tensor table mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    for name, t in model.named_parameters():
        if t.shape != tensors[name].shape:
            raise WeightFormatError(f"{name}: shape {tensors[name].shape}, expected {t.shape}")
        t.data = tensors[name]
    return model
