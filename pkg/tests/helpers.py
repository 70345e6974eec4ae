"""Small fixtures shared by several test modules."""

from collections import OrderedDict

import numpy as np

from uwformer.model import _init
from uwformer.tensor import Tensor


def make_params(specs, seed=0, dtype=np.float64, randomize_zeros=False, scale=1.0):
    """Materialise ``(name, shape, init)`` specs into grad-tracking tensors.

    ``randomize_zeros`` replaces zero-initialised tensors with small noise so
    every parameter influences the output.
    """
    rng = np.random.default_rng(seed)
    out = OrderedDict()
    for name, shape, kind in specs:
        if kind == "zeros" and randomize_zeros:
            arr = 0.1 * rng.standard_normal(shape)
        elif kind in ("zeros", "ones"):
            arr = _init(rng, shape, kind)
        else:
            arr = scale * _init(rng, shape, kind)
        out[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)
    return out


# --- synthetic colour-cast corpus -------------------------------------------

# Per-channel transmission and veil colour of a haze-style underwater cast:
# red is attenuated most and everything is blended towards a blue-green veil.
TRANSMISSION = np.array([0.6, 0.8, 0.85])
VEIL = np.array([0.25, 0.45, 0.5])


def smooth_images(rng, n, size, sigma=3.0):
    """``n`` smooth random ``[3,size,size]`` images stretched to [0,1]."""
    from scipy import ndimage

    x = ndimage.gaussian_filter(rng.random((n, 3, size, size)), (0, 0, sigma, sigma))
    lo = x.min(axis=(1, 2, 3), keepdims=True)
    hi = x.max(axis=(1, 2, 3), keepdims=True)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def apply_cast(clean):
    """Known affine cast ``t * clean + (1 - t) * veil``, applied per channel."""
    t = TRANSMISSION[None, :, None, None]
    cast = t * clean + (1.0 - t) * VEIL[None, :, None, None]
    return np.clip(cast, 0.0, 1.0).astype(np.float32)


def remove_cast(cast):
    """Exact inverse of :func:`apply_cast` (before clipping)."""
    t = TRANSMISSION[None, :, None, None]
    return (cast - (1.0 - t) * VEIL[None, :, None, None]) / t


def write_corpus(root, clean, cast=None, labeled=True):
    """Write PPM files; labeled corpora get input/ and target/ subfolders."""
    from pathlib import Path

    from uwformer.io import quantize, write_ppm

    root = Path(root)
    cast = apply_cast(clean) if cast is None else cast
    if labeled:
        (root / "input").mkdir(parents=True, exist_ok=True)
        (root / "target").mkdir(parents=True, exist_ok=True)
    else:
        root.mkdir(parents=True, exist_ok=True)
    for i, (c, x) in enumerate(zip(clean, cast)):
        name = f"img{i:03d}.ppm"
        if labeled:
            write_ppm(root / "input" / name, quantize(x))
            write_ppm(root / "target" / name, quantize(c))
        else:
            write_ppm(root / name, quantize(x))
    return root
