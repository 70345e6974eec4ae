"""Full enhancement network: Haar split, low-frequency U-Net transformer,
high-frequency FFC branch, Haar merge.

Parameter schema (``C_i = base_channels * 2**i``, ``i = 0..3``)::

    stem{i}            3x3 conv 3 -> C_i on the i-th pooled copy of LL
    down{i}  (i>=1)    3x3 stride-2 conv C_{i-1} -> C_i
    fuse{i}  (i>=1)    1x1 conv 2C_i -> C_i
    enc{i}.block{b}    transformer block at width C_i
    up{j}              2x2 transposed conv C_{l+1} -> C_l  (j = 0..2, l = 2 - j)
    dfuse{j}           1x1 conv 2C_l -> C_l
    dec{j}.block{b}    transformer block at width C_l
    head               3x3 conv C_0 -> 3, zero-initialised
    ffc{k}             FFC residual block on the 9 detail channels
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (
    ConfigError,
    NfaConfig,
    ParamSpec,
    Scope,
    _conv,
    block_params,
    conv,
    ffc_params,
    ffc_resblock,
    transformer_block,
)
from .tensor import ShapeError, Tensor
from .wavelet import WaveletBands, dwt2, idwt2, merge_high, split_high

LEVELS = 4
DIVISOR = 16

ModelParams = OrderedDict[str, Tensor]


@dataclass
class ModelConfig:
    base_channels: int = 16
    encoder_blocks: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    decoder_blocks: list[int] = field(default_factory=lambda: [3, 2, 1])
    heads: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    ffc_blocks: int = 4
    expansion: float = 2.0

    def __post_init__(self):
        self.encoder_blocks = list(self.encoder_blocks)
        self.decoder_blocks = list(self.decoder_blocks)
        self.heads = list(self.heads)
        self.validate()

    def validate(self) -> None:
        enc, dec = self.encoder_blocks, self.decoder_blocks
        if len(enc) != LEVELS or len(dec) != LEVELS - 1:
            raise ConfigError("need exactly 4 encoder and 3 decoder block counts")
        if any(b < 1 for b in enc + dec):
            raise ConfigError("block counts must be positive")
        if any(a > b for a, b in zip(enc, enc[1:])):
            raise ConfigError(f"encoder_blocks must be nondecreasing, got {enc}")
        if any(a < b for a, b in zip(dec, dec[1:])):
            raise ConfigError(f"decoder_blocks must be nonincreasing, got {dec}")
        if len(self.heads) != LEVELS:
            raise ConfigError("need one head count per level")
        if self.base_channels < 1 or self.ffc_blocks < 0:
            raise ConfigError("base_channels must be >= 1 and ffc_blocks >= 0")
        for i in range(LEVELS):
            NfaConfig(self.width(i), self.heads[i])

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_schema(config: ModelConfig) -> list[ParamSpec]:
    specs: list[ParamSpec] = []

    def add(prefix: str, items: list[ParamSpec]) -> None:
        specs.extend((f"{prefix}.{n}", s, i) for n, s, i in items)

    for i in range(LEVELS):
        c = config.width(i)
        specs += _conv(f"stem{i}", c, 3, 3)
        if i > 0:
            specs += _conv(f"down{i}", c, config.width(i - 1), 3)
            specs += _conv(f"fuse{i}", c, 2 * c, 1)
        for b in range(config.encoder_blocks[i]):
            add(f"enc{i}.block{b}", block_params(c, config.expansion))
    for j in range(LEVELS - 1):
        lvl = LEVELS - 2 - j
        c, cup = config.width(lvl), config.width(lvl + 1)
        specs += [(f"up{j}.weight", (cup, c, 2, 2), "he_transpose"), (f"up{j}.bias", (c,), "zeros")]
        specs += _conv(f"dfuse{j}", c, 2 * c, 1)
        for b in range(config.decoder_blocks[j]):
            add(f"dec{j}.block{b}", block_params(c, config.expansion))
    specs += _conv("head", 3, config.width(0), 3, init="zeros")
    for k in range(config.ffc_blocks):
        add(f"ffc{k}", ffc_params(9))
    return specs


def count_params(config: ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape, _ in param_schema(config))


def _init(rng: np.random.Generator, shape: tuple[int, ...], kind: str) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape, dtype=np.float32)
    if kind == "ones":
        return np.ones(shape, dtype=np.float32)
    if kind == "he":
        fan_in = math.prod(shape[1:])
    elif kind == "he_transpose":
        fan_in = shape[0]
    else:
        raise ValueError(f"unknown init {kind!r}")
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Deterministically initialise every parameter of the schema."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape, kind in param_schema(config):
        params[name] = Tensor(_init(rng, shape, kind).astype(dtype), requires_grad=True)
    return params


def _run_blocks(x: Tensor, params, prefix: str, count: int, cfg: NfaConfig, expansion: float) -> Tensor:
    h, w = x.shape[-2:]
    # The attention's Haar split needs even sizes; the deepest level can be odd.
    pad_h, pad_w = h % 2, w % 2
    x = T.pad_edge(x, pad_h, pad_w)
    for b in range(count):
        x = transformer_block(x, Scope(params, f"{prefix}.block{b}."), cfg, expansion)
    return T.crop(x, h, w)


def forward(x: Tensor, params, config: ModelConfig, clamp: bool = False) -> Tensor:
    """Enhance a batch ``[N,3,H,W]``; H and W must be multiples of 16."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"forward expects [N,3,H,W], got {x.shape}")
    h, w = x.shape[2:]
    if h % DIVISOR or w % DIVISOR:
        raise ShapeError(f"forward needs H, W divisible by {DIVISOR}, got {h}x{w}")

    bands = dwt2(x)
    x_ll = bands.ll
    x_high = merge_high(bands.lh, bands.hl, bands.hh)

    scales = [x_ll]
    for _ in range(LEVELS - 1):
        scales.append(T.avg_pool2d(scales[-1], 2))

    skips = []
    feat = None
    for i in range(LEVELS):
        f = conv(scales[i], params, f"stem{i}")
        if feat is not None:
            down = conv(feat, params, f"down{i}", stride=2)
            f = conv(T.concat([f, down]), params, f"fuse{i}")
        cfg = NfaConfig(config.width(i), config.heads[i])
        feat = _run_blocks(f, params, f"enc{i}", config.encoder_blocks[i], cfg, config.expansion)
        skips.append(feat)

    for j in range(LEVELS - 1):
        lvl = LEVELS - 2 - j
        up = T.conv_transpose2d(feat, params[f"up{j}.weight"], params[f"up{j}.bias"])
        f = conv(T.concat([up, skips[lvl]]), params, f"dfuse{j}")
        cfg = NfaConfig(config.width(lvl), config.heads[lvl])
        feat = _run_blocks(f, params, f"dec{j}", config.decoder_blocks[j], cfg, config.expansion)

    ll_hat = x_ll + conv(feat, params, "head")

    high = x_high
    for k in range(config.ffc_blocks):
        high = ffc_resblock(high, Scope(params, f"ffc{k}."))
    lh, hl, hh = split_high(high)

    out = idwt2(WaveletBands(ll_hat, lh, hl, hh))
    if clamp:
        out = Tensor(np.clip(out.data, 0.0, 1.0))
    return out


def enhance(images: np.ndarray, params, config: ModelConfig) -> np.ndarray:
    """Inference helper: ``[N,3,H,W]`` array in, clamped array out, no tape."""
    with T.no_grad():
        return forward(Tensor(np.asarray(images, dtype=np.float32)), params, config, clamp=True).data
