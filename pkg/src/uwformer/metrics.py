"""Underwater and full-reference image quality measures.

All functions take ``[3,H,W]`` RGB images in [0, 1] (numpy arrays or
:class:`~uwformer.tensor.Tensor`) and compute in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .color import as_chw, hsv_saturation, srgb_to_lab

SPL_COEFFS = (0.4680, 0.2745, 0.2576)
UIQM_COEFFS = (0.0282, 0.2953, 3.5753)
UICM_COEFFS = (-0.0268, 0.1586)
UISM_CHANNEL_WEIGHTS = (0.299, 0.587, 0.114)
UIQM_BLOCK = 8
UICM_TRIM = 0.1
PSNR_IDENTICAL = math.inf


@dataclass
class MetricReport:
    psnr: float | None = None
    ssim: float | None = None
    spl: float | None = None
    uciqe: float | None = None
    uiqm: float | None = None


# ----------------------------------------------------------------------------
# SPL / UCIQE


def spl_terms(image) -> tuple[float, float, float]:
    """Return (chroma std / 100, lightness 1-99 percentile spread / 100, mean saturation)."""
    rgb = as_chw(image)
    if rgb.shape[1] == 0 or rgb.shape[2] == 0:
        raise ValueError("empty image")
    lab = srgb_to_lab(rgb)
    sigma_c = float(np.std(lab.chroma())) / 100.0
    lo, hi = np.percentile(lab.l, [1.0, 99.0])
    contrast = float(hi - lo) / 100.0
    mu_s = float(np.mean(hsv_saturation(rgb)))
    return sigma_c, contrast, mu_s


def spl(image) -> float:
    """Subaqueous perceptual score; higher means more vivid and contrasted."""
    terms = spl_terms(image)
    return float(sum(c * t for c, t in zip(SPL_COEFFS, terms)))


def uciqe(image) -> float:
    # Same weights and term definitions as spl; kept as its own reporting name.
    return spl(image)


# ----------------------------------------------------------------------------
# UIQM


def trimmed_mean(x: np.ndarray, alpha: float = UICM_TRIM) -> float:
    """Asymmetric alpha-trimmed mean: drop ceil(aK) lowest and floor(aK) highest."""
    x = np.sort(np.ravel(x))
    k = x.size
    lo = math.ceil(alpha * k)
    hi = math.floor(alpha * k)
    return float(x[lo:k - hi].mean())


def uicm(image) -> float:
    rgb = as_chw(image) * 255.0
    r, g, b = rgb
    rg = r - g
    yb = 0.5 * (r + g) - b
    mu_rg, mu_yb = trimmed_mean(rg), trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    c_mean, c_spread = UICM_COEFFS
    return c_mean * math.hypot(mu_rg, mu_yb) + c_spread * math.sqrt(var_rg + var_yb)


def _blocks(x: np.ndarray, size: int) -> np.ndarray:
    """Crop to whole blocks and return ``[..., k2, k1, size, size]``."""
    h, w = x.shape[-2:]
    k2, k1 = h // size, w // size
    if k1 == 0 or k2 == 0:
        raise ValueError(f"image {h}x{w} is smaller than one {size}x{size} block")
    x = x[..., :k2 * size, :k1 * size]
    lead = x.shape[:-2]
    x = x.reshape(*lead, k2, size, k1, size)
    return np.moveaxis(x, -3, -2)


def sobel_magnitude(channel: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude rescaled so its maximum is 255."""
    mag = np.hypot(ndimage.sobel(channel, axis=0), ndimage.sobel(channel, axis=1))
    peak = mag.max()
    if peak > 0:
        mag = mag * (255.0 / peak)
    return mag


def eme(x: np.ndarray, size: int = UIQM_BLOCK) -> float:
    blk = _blocks(x, size)
    k2, k1 = blk.shape[:2]
    mx = blk.max(axis=(-2, -1))
    mn = blk.min(axis=(-2, -1))
    ok = (mn > 0) & (mx > 0)
    ratio = np.where(ok, mx, 1.0) / np.where(ok, mn, 1.0)
    return 2.0 / (k1 * k2) * float(np.log(ratio).sum())


def uism(image) -> float:
    rgb = as_chw(image) * 255.0
    total = 0.0
    for weight, ch in zip(UISM_CHANNEL_WEIGHTS, rgb):
        total += weight * eme(sobel_magnitude(ch) * ch)
    return total


def uiconm(image, size: int = UIQM_BLOCK) -> float:
    """Block log-AMEE contrast over all three channels jointly."""
    rgb = as_chw(image) * 255.0
    blk = _blocks(rgb, size)  # [3, k2, k1, s, s]
    k2, k1 = blk.shape[1:3]
    mx = blk.max(axis=(0, -2, -1))
    mn = blk.min(axis=(0, -2, -1))
    top = mx - mn
    bot = mx + mn
    ok = (top > 0) & (bot > 0)
    q = np.where(ok, top, 1.0) / np.where(ok, bot, 1.0)
    return -1.0 / (k1 * k2) * float((q * np.log(q)).sum())


def uiqm(image) -> float:
    c1, c2, c3 = UIQM_COEFFS
    return c1 * uicm(image) + c2 * uism(image) + c3 * uiconm(image)


# ----------------------------------------------------------------------------
# full reference


def psnr(a, b, peak: float = 1.0) -> float:
    x, y = as_chw(a), as_chw(b)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    return np.tensordot(sliding_window_view(x, (k, k)), win, axes=([2, 3], [0, 1]))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    x, y = as_chw(a), as_chw(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    win = gaussian_window()
    if min(x.shape[1:]) < win.shape[0]:
        raise ValueError(f"ssim needs at least {win.shape[0]}x{win.shape[0]} images")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    scores = []
    for xc, yc in zip(x, y):
        mx = _filter_valid(xc, win)
        my = _filter_valid(yc, win)
        sxx = _filter_valid(xc * xc, win) - mx * mx
        syy = _filter_valid(yc * yc, win) - my * my
        sxy = _filter_valid(xc * yc, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def report(image, reference=None) -> MetricReport:
    rep = MetricReport(spl=spl(image), uiqm=uiqm(image))
    rep.uciqe = rep.spl
    if reference is not None:
        rep.psnr = psnr(image, reference)
        rep.ssim = ssim(image, reference)
    return rep
