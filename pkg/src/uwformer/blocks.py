"""Frequency-aware attention, multi-scale feed-forward, and FFC residual blocks.

Blocks are plain functions of an input tensor and a parameter mapping. Each
block also publishes its parameter layout as ``(name, shape, init)`` triples
so the model can build and count parameters from one schema.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from . import tensor as T
from .tensor import ShapeError, Tensor
from .wavelet import dwt2_stacked, idwt2_stacked

ParamSpec = tuple[str, tuple[int, ...], str]


class ConfigError(ValueError):
    """Invalid block or model configuration."""


class Scope(Mapping[str, Tensor]):
    """Read-only view of a flat parameter dict under a name prefix."""

    def __init__(self, params: Mapping[str, Tensor], prefix: str):
        self._params = params
        self._prefix = prefix

    def __getitem__(self, key: str) -> Tensor:
        return self._params[self._prefix + key]

    def __iter__(self):
        n = len(self._prefix)
        return (k[n:] for k in self._params if k.startswith(self._prefix))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self._params, self._prefix + prefix)


def _conv(name: str, cout: int, cin: int, k: int, init: str = "he") -> list[ParamSpec]:
    return [(f"{name}.weight", (cout, cin, k, k), init), (f"{name}.bias", (cout,), "zeros")]


def _norm(name: str, c: int) -> list[ParamSpec]:
    return [(f"{name}.weight", (c,), "ones"), (f"{name}.bias", (c,), "zeros")]


def conv(x: Tensor, p: Mapping[str, Tensor], name: str, stride: int = 1) -> Tensor:
    w = p[f"{name}.weight"]
    return T.conv2d(x, w, p[f"{name}.bias"], stride=stride, padding=w.shape[-1] // 2)


def dwconv(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    return T.dwconv2d(x, p[f"{name}.weight"], p[f"{name}.bias"])


# ----------------------------------------------------------------------------
# NFA


@dataclass(frozen=True)
class NfaConfig:
    channels: int
    heads: int = 1

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1 or (4 * self.channels) % self.heads:
            raise ConfigError(
                f"heads={self.heads} must divide 4*channels={4 * self.channels}"
            )

    @property
    def head_dim(self) -> int:
        return 4 * self.channels // self.heads


def nfa_params(c: int) -> list[ParamSpec]:
    return (
        _conv("q_pw", 4 * c, c, 1)
        + _conv("q_dw", 4 * c, 1, 3)
        + _conv("ctx_dw", 4 * c, 1, 3)
        + _conv("k_pw", 16 * c, 4 * c, 1)
        + _conv("k_dw", 16 * c, 1, 3)
        + _conv("v_pw", 16 * c, 4 * c, 1)
        + _conv("v_dw", 16 * c, 1, 3)
        + _conv("proj", c, 5 * c, 1)
    )


def nfa_branch(x: Tensor, p: Mapping[str, Tensor], cfg: NfaConfig, parts: dict | None = None) -> Tensor:
    """Attention output before the residual add, shape ``[N,C,H,W]``."""
    n, c, h, w = x.shape
    if c != cfg.channels:
        raise ShapeError(f"nfa: input has {c} channels, config says {cfg.channels}")
    if h % 2 or w % 2:
        raise ShapeError(f"nfa needs even spatial dims, got {h}x{w}")
    heads, dh = cfg.heads, cfg.head_dim

    q = dwconv(conv(x, p, "q_pw"), p, "q_dw")                       # [N,4C,H,W]
    ctx = dwconv(dwt2_stacked(x), p, "ctx_dw")                        # [N,4C,H/2,W/2]
    k = dwconv(conv(ctx, p, "k_pw"), p, "k_dw")                       # [N,16C,H/2,W/2]
    v = dwconv(conv(ctx, p, "v_pw"), p, "v_dw")
    x_r = idwt2_stacked(ctx)                                          # [N,C,H,W]

    # 16C*(H/2)(W/2) == 4C*HW, so K and V fold to the same [heads, Dh, HW] as Q.
    seq = h * w
    qh = T.reshape(q, (n, heads, dh, seq))
    kh = T.reshape(k, (n, heads, dh, seq))
    vh = T.reshape(v, (n, heads, dh, seq))
    scores = T.scale(T.matmul(qh, T.transpose_last(kh)), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)                                 # [N,heads,Dh,Dh]
    out = T.reshape(T.matmul(attn, vh), (n, 4 * c, h, w))
    y = conv(T.concat([out, x_r], axis=1), p, "proj")
    if parts is not None:
        parts.update(q=q, k=k, v=v, x_r=x_r, attn=attn)
    return y


def nfa_forward(x: Tensor, p: Mapping[str, Tensor], cfg: NfaConfig, parts: dict | None = None) -> Tensor:
    return x + nfa_branch(x, p, cfg, parts)


# ----------------------------------------------------------------------------
# MSFN


def msfn_hidden(c: int, expansion: float) -> int:
    hidden = expansion * c / 2
    if hidden != int(hidden) or hidden < 1:
        raise ConfigError(f"expansion {expansion} with {c} channels gives non-integer width")
    return int(hidden)


def msfn_params(c: int, expansion: float = 2.0) -> list[ParamSpec]:
    e = msfn_hidden(c, expansion)
    return (
        _conv("expand", 4 * e, c, 1)
        + _conv("dw3_ll", e, 1, 3)
        + _conv("dw3_lg", e, 1, 3)
        + _conv("dw5_gl", e, 1, 5)
        + _conv("dw5_gg", e, 1, 5)
        + _conv("fuse_l", 2 * e, 1, 3)
        + _conv("fuse_g", 2 * e, 1, 3)
        + _conv("proj", c, 4 * e, 1)
    )


def msfn_branch(x: Tensor, p: Mapping[str, Tensor], expansion: float = 2.0) -> Tensor:
    e = msfn_hidden(x.shape[1], expansion)
    x_ll, x_lg, x_gl, x_gg = T.split(conv(x, p, "expand"), 1, [e] * 4)
    x_l = T.concat([T.gelu(dwconv(x_ll, p, "dw3_ll")), T.gelu(dwconv(x_gl, p, "dw5_gl"))])
    x_g = T.concat([T.gelu(dwconv(x_lg, p, "dw3_lg")), T.gelu(dwconv(x_gg, p, "dw5_gg"))])
    fused = T.concat([T.gelu(dwconv(x_l, p, "fuse_l")), T.gelu(dwconv(x_g, p, "fuse_g"))])
    return conv(fused, p, "proj")


def msfn_forward(x: Tensor, p: Mapping[str, Tensor], expansion: float = 2.0) -> Tensor:
    return x + msfn_branch(x, p, expansion)


# ----------------------------------------------------------------------------
# transformer block


def block_params(c: int, expansion: float = 2.0) -> list[ParamSpec]:
    specs = _norm("norm1", c)
    specs += [("nfa." + n, s, i) for n, s, i in nfa_params(c)]
    specs += _norm("norm2", c)
    specs += [("msfn." + n, s, i) for n, s, i in msfn_params(c, expansion)]
    return specs


def transformer_block(x: Tensor, p: Mapping[str, Tensor], cfg: NfaConfig, expansion: float = 2.0) -> Tensor:
    """Pre-norm block: ``x + NFA(LN(x))`` then ``+ MSFN(LN(.))``."""
    sp = p if isinstance(p, Scope) else Scope(p, "")
    y = x + nfa_branch(
        T.layer_norm_channels(x, sp["norm1.weight"], sp["norm1.bias"]), sp.scope("nfa."), cfg
    )
    z = T.layer_norm_channels(y, sp["norm2.weight"], sp["norm2.bias"])
    return y + msfn_branch(z, sp.scope("msfn."), expansion)


# ----------------------------------------------------------------------------
# FFC residual block


def ffc_split(c: int) -> tuple[int, int]:
    """(local, global) channel counts; the local half takes the odd channel."""
    return c - c // 2, c // 2


def ffc_params(c: int) -> list[ParamSpec]:
    cl, cg = ffc_split(c)
    return (
        _conv("local", cl, cl, 3)
        + _conv("spectral", 2 * cg, 2 * cg, 1)
        + _conv("proj", c, c, 1, init="zeros")
    )


def fourier_unit(x: Tensor, weight: Tensor, bias: Tensor, activation: bool = True) -> Tensor:
    """rFFT -> 1x1 conv over stacked (real, imag) channels -> GeLU -> inverse rFFT."""
    spec = T.conv2d(T.rfft2(x), weight, bias)
    if activation:
        spec = T.gelu(spec)
    return T.irfft2(spec, x.shape[-1])


def ffc_resblock(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    cl, cg = ffc_split(x.shape[1])
    if cg == 0:
        raise ShapeError("ffc_resblock needs at least 2 channels")
    local, glob = T.split(x, 1, [cl, cg])
    local = T.gelu(conv(local, p, "local"))
    glob = fourier_unit(glob, p["spectral.weight"], p["spectral.bias"])
    return x + conv(T.concat([local, glob]), p, "proj")
