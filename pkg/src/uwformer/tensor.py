"""Dense tensors with a minimal reverse-mode autodiff tape.

Every differentiable operation appends one node to the thread-local tape.
``backward`` walks the tape in strict reverse append order, so no graph
sorting is required. Only the operations the network actually needs are
provided.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "abs_",
    "add",
    "avg_pool2d",
    "backward",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "crop",
    "dwconv2d",
    "gelu",
    "get_tape",
    "irfft2",
    "layer_norm_channels",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "pad_edge",
    "record",
    "reshape",
    "rfft2",
    "scale",
    "softmax",
    "split",
    "sub",
    "sum_",
    "transpose_last",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Raised when an operation's shape contract is violated."""


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: BackwardFn


@dataclass
class Tape:
    """Append-only record of differentiable operations."""

    nodes: list[Node] = field(default_factory=list)
    generation: int = 0

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording within the block."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """N-dimensional real array that may participate in the tape.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    :func:`backward`. Non-leaf tensors carry a ``(generation, index)`` handle
    into the tape that produced them; a handle from an earlier generation is
    treated as a constant.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: tuple[int, int] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def _live(self) -> bool:
        if not self.requires_grad:
            return False
        if self.node_id is None:
            return True
        return self.node_id[0] == get_tape().generation

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as an op output and append a node when any input is live.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per input, in order.
    """
    out = Tensor(data)
    if _grad_enabled() and any(t._live() for t in inputs):
        tape = get_tape()
        idx = tape.append(Node(op, tuple(inputs), backward_fn))
        out.requires_grad = True
        out.node_id = (tape.generation, idx)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every live leaf reachable from ``loss``.

    The tape is consumed: it is reset once the sweep completes.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if loss.node_id is None or loss.node_id[0] != tape.generation:
        raise ShapeError("loss was not produced on the current tape")
    start = loss.node_id[1]
    pending: dict[int, np.ndarray] = {start: np.ones_like(loss.data)}
    for idx in range(start, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp._live():
                continue
            gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
            if inp.node_id is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                k = inp.node_id[1]
                pending[k] = gi if k not in pending else pending[k] + gi
    tape.reset()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return record("add", out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return record("sub", out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return record("scale", a.data * s, (a,), lambda g: (g * s,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                  lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return record("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                  lambda g: (np.broadcast_to(g / n, shape),))


def gelu(a: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)``."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    out = (x * cdf).astype(x.dtype, copy=False)
    return record("gelu", out, (a,), lambda g: (g * (cdf + x * pdf),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (a,), bw)


# ----------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose_last(a: Tensor) -> Tensor:
    """Swap the two trailing axes."""
    return record("transpose", np.swapaxes(a.data, -1, -2), (a,),
                  lambda g: (np.swapaxes(g, -1, -2),))


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat needs at least one tensor")
    ref = inputs[0].shape
    ax = axis % len(ref)
    for t in inputs[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} on axis {axis}")
    if len(inputs) == 1:
        return inputs[0]
    sizes = [t.shape[ax] for t in inputs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in inputs], axis=ax)
    return record("concat", out, inputs, lambda g: np.split(g, bounds, axis=ax))


def split(a: Tensor, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[ax]}")
    outs = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, start + n)
        sl = tuple(sl)

        def bw(g, sl=sl):
            full = np.zeros(a.shape, dtype=a.dtype)
            full[sl] = g
            return (full,)

        outs.append(record("split", a.data[sl], (a,), bw))
        start += n
    return outs


def pad_edge(a: Tensor, bottom: int, right: int) -> Tensor:
    """Replicate the last row/column of an NCHW tensor."""
    if bottom == 0 and right == 0:
        return a
    h, w = a.shape[-2:]
    out = np.pad(a.data, ((0, 0), (0, 0), (0, bottom), (0, right)), mode="edge")

    def bw(g):
        gx = g[..., :h, :w].copy()
        if bottom:
            gx[..., h - 1, :] += g[..., h:, :w].sum(axis=-2)
        if right:
            gx[..., :, w - 1] += g[..., :h, w:].sum(axis=-1)
        if bottom and right:
            gx[..., h - 1, w - 1] += g[..., h:, w:].sum(axis=(-2, -1))
        return (gx,)

    return record("pad_edge", out, (a,), bw)


def crop(a: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height x width`` window of an NCHW tensor."""
    if (height, width) == a.shape[-2:]:
        return a

    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[..., :height, :width] = g
        return (full,)

    return record("crop", a.data[..., :height, :width], (a,), bw)


# ----------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return record("matmul", ad @ bd, (a, b), bw)


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, cin: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv expects 4-d input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv: input has {x.shape[1]} channels, weight expects {cin}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv: bias shape {b.shape} != ({w.shape[0]},)")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIKK kernel.

    Output size is ``floor((H + 2p - k) / stride) + 1``.
    """
    cout, cin, kh, kw = weight.shape
    _check_conv(x, weight, bias, cin)
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ShapeError("conv2d: padding must be >= 0 and stride >= 1")
    n, _, h, wd = x.shape
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape} and kernel {k}")
    xd, wdat = x.data, weight.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    if k == 1 and stride == 1 and padding == 0:
        w2 = wdat[:, :, 0, 0]
        xf = xd.reshape(n, cin, h * wd)
        out = np.matmul(w2, xf).reshape(n, cout, h, wd)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def bw1(g):
            gf = g.reshape(n, cout, h * wd)
            gx = np.matmul(w2.T, gf).reshape(xd.shape)
            gw = np.tensordot(gf, xf, axes=([0, 2], [0, 2]))[:, :, None, None]
            return (gx, gw, g.sum(axis=(0, 2, 3)))[: len(inputs)]

        return record("conv2d", out, inputs, bw1)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, wdat, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(wdat[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return (gx, gw, g.sum(axis=(0, 2, 3)))[: len(inputs)]

    return record("conv2d", out, inputs, bw)


def dwconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
             padding: int | None = None) -> Tensor:
    """Depthwise convolution; channel c sees only input channel c."""
    c, one, kh, kw = weight.shape
    if one != 1 or kh != kw:
        raise ShapeError(f"dwconv2d weight must be [C,1,k,k], got {weight.shape}")
    k = kh
    if k % 2 == 0:
        raise ShapeError(f"dwconv2d needs an odd kernel, got {k}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ShapeError("dwconv2d padding must preserve spatial size")
    _check_conv(x, weight, bias, c)
    h, wd = x.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wdat = weight.data
    out = np.zeros_like(x.data)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + h, j:j + wd] * wdat[None, :, 0, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wdat)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + h, j:j + wd] += g * wdat[None, :, 0, i, j, None, None]
                gw[:, 0, i, j] = (g * xp[:, :, i:i + h, j:j + wd]).sum(axis=(0, 2, 3))
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        return (gx, gw, g.sum(axis=(0, 2, 3)))[: len(inputs)]

    return record("dwconv2d", out, inputs, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Non-overlapping transposed convolution (kernel size == stride).

    ``weight`` is laid out ``[Cin, Cout, s, s]``; output is ``s`` times larger.
    """
    cin, cout, s, s2 = weight.shape
    if s != s2:
        raise ShapeError("conv_transpose2d needs a square kernel")
    if x.ndim != 4 or x.shape[1] != cin:
        raise ShapeError(f"conv_transpose2d: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({cout},)")
    n, _, h, w = x.shape
    xd, wdat = x.data, weight.data
    # [N,h,w,Cout,s,s] -> [N,Cout,h,s,w,s]
    out = np.tensordot(xd, wdat, axes=([1], [0])).transpose(0, 3, 1, 4, 2, 5)
    out = np.ascontiguousarray(out).reshape(n, cout, h * s, w * s)
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gb = g.reshape(n, cout, h, s, w, s)
        gx = np.tensordot(gb, wdat, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xd, gb, axes=([0, 2, 3], [0, 2, 4]))
        return (gx, gw, g.sum(axis=(0, 2, 3)))[: len(inputs)]

    return record("conv_transpose2d", out, inputs, bw)


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    f = factor
    out = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, f, axis=2), f, axis=3) / (f * f),)

    return record("avg_pool2d", out.astype(x.dtype, copy=False), (x,), bw)


def layer_norm_channels(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis independently at every pixel."""
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    wv = weight.data[None, :, None, None]
    out = xhat * wv + bias.data[None, :, None, None]

    def bw(g):
        gh = g * wv
        gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record("layer_norm", out.astype(xd.dtype, copy=False), (x, weight, bias), bw)


# ----------------------------------------------------------------------------
# spectral


def rfft2(x: Tensor) -> Tensor:
    """Orthonormal real 2-D FFT over the last two axes of NCHW input.

    Returns ``[N, 2C, H, W//2+1]``: real parts in the first C channels,
    imaginary parts in the last C.
    """
    n, c, h, w = x.shape
    spec = np.fft.rfft2(x.data, norm="ortho")
    out = np.concatenate([spec.real, spec.imag], axis=1).astype(x.dtype)
    wf = w // 2 + 1

    def bw(g):
        full = np.zeros((n, c, h, w), dtype=np.complex128)
        full[..., :wf] = g[:, :c] + 1j * g[:, c:]
        return (np.fft.ifft2(full, norm="ortho").real,)

    return record("rfft2", out, (x,), bw)


def irfft2(spec: Tensor, width: int) -> Tensor:
    """Inverse of :func:`rfft2` for a real signal of the given width."""
    n, c2, h, wf = spec.shape
    if c2 % 2 or wf != width // 2 + 1:
        raise ShapeError(f"irfft2: spectrum {spec.shape} inconsistent with width {width}")
    c = c2 // 2
    sd = spec.data
    out = np.fft.irfft2(sd[:, :c] + 1j * sd[:, c:], s=(h, width), norm="ortho").astype(sd.dtype)
    # Hermitian weight: interior bins appear twice in the full spectrum.
    mult = np.full(wf, 2.0)
    mult[0] = 1.0
    if width % 2 == 0:
        mult[-1] = 1.0

    def bw(g):
        gs = np.fft.rfft2(g, norm="ortho") * mult
        return (np.concatenate([gs.real, gs.imag], axis=1),)

    return record("irfft2", out, (spec,), bw)
