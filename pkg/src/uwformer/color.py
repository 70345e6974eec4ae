"""sRGB -> CIELab (D65) and HSV saturation on channel-first images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Linear sRGB -> XYZ, D65 reference white.
SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
D65_WHITE = SRGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0


@dataclass
class LabImage:
    l: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def chroma(self) -> np.ndarray:
        return np.hypot(self.a, self.b)


def as_chw(image) -> np.ndarray:
    """Return a float64 ``[3,H,W]`` copy of an image, Tensor or ndarray."""
    data = getattr(image, "data", image)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a [3,H,W] image, got shape {arr.shape}")
    return arr


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4.0 / 29.0)


def srgb_to_lab(image) -> LabImage:
    rgb = np.clip(as_chw(image), 0.0, 1.0)
    lin = srgb_to_linear(rgb)
    xyz = np.tensordot(SRGB_TO_XYZ, lin, axes=([1], [0]))
    fx, fy, fz = (_lab_f(xyz[i] / D65_WHITE[i]) for i in range(3))
    return LabImage(l=116.0 * fy - 16.0, a=500.0 * (fx - fy), b=200.0 * (fy - fz))


def hsv_saturation(image) -> np.ndarray:
    rgb = np.clip(as_chw(image), 0.0, 1.0)
    mx = rgb.max(axis=0)
    mn = rgb.min(axis=0)
    out = np.zeros_like(mx)
    np.divide(mx - mn, mx, out=out, where=mx > 0)
    return out
