"""One-level orthonormal 2-D Haar transform on NCHW tensors."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .tensor import ShapeError, Tensor, concat, record, split


class WaveletBands(NamedTuple):
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor


def _analysis(x: np.ndarray) -> np.ndarray:
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    half = x.dtype.type(0.5)
    return np.concatenate(
        [
            (a + b + c + d) * half,
            (a + b - c - d) * half,
            (a - b + c - d) * half,
            (a - b - c + d) * half,
        ],
        axis=1,
    )


def _synthesis(s: np.ndarray) -> np.ndarray:
    n, c4, h, w = s.shape
    c = c4 // 4
    ll, lh, hl, hh = (s[:, i * c:(i + 1) * c] for i in range(4))
    half = s.dtype.type(0.5)
    out = np.empty((n, c, 2 * h, 2 * w), dtype=s.dtype)
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) * half
    out[..., 0::2, 1::2] = (ll + lh - hl - hh) * half
    out[..., 1::2, 0::2] = (ll - lh + hl - hh) * half
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) * half
    return out


def dwt2_stacked(x: Tensor) -> Tensor:
    """Haar analysis returning bands stacked on channels as ``[LL, LH, HL, HH]``.

    The transform is orthogonal, so its adjoint is the synthesis step.
    """
    if x.ndim != 4:
        raise ShapeError(f"dwt2 expects NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"dwt2 needs even spatial dims, got {h}x{w}")
    return record("dwt2", _analysis(x.data), (x,), lambda g: (_synthesis(g),))


def idwt2_stacked(s: Tensor) -> Tensor:
    if s.ndim != 4 or s.shape[1] % 4:
        raise ShapeError(f"idwt2 expects [N,4C,h,w], got {s.shape}")
    return record("idwt2", _synthesis(s.data), (s,), lambda g: (_analysis(g),))


def dwt2(x: Tensor) -> WaveletBands:
    c = x.shape[1]
    return WaveletBands(*split(dwt2_stacked(x), 1, [c] * 4))


def idwt2(bands: WaveletBands) -> Tensor:
    shape = bands.ll.shape
    for band in bands[1:]:
        if band.shape != shape:
            raise ShapeError(f"idwt2: band shapes differ ({band.shape} vs {shape})")
    return idwt2_stacked(concat(list(bands), axis=1))


def merge_high(lh: Tensor, hl: Tensor, hh: Tensor) -> Tensor:
    """Stack the detail bands on channels in LH, HL, HH order."""
    if not lh.shape == hl.shape == hh.shape:
        raise ShapeError(f"merge_high: {lh.shape}, {hl.shape}, {hh.shape}")
    return concat([lh, hl, hh], axis=1)


def split_high(x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    c3 = x.shape[1]
    if c3 % 3:
        raise ShapeError(f"split_high: {c3} channels is not a multiple of 3")
    lh, hl, hh = split(x, 1, [c3 // 3] * 3)
    return lh, hl, hh
