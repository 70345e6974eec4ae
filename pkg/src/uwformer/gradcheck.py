"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, get_tape, mul, no_grad, sum_


def _project(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_(mul(out, Tensor(weights)))


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], weights: np.ndarray,
                 index: int, h: float = 1e-5, positions=None) -> np.ndarray:
    """Central differences of ``sum(weights * fn(*inputs))`` w.r.t. one input."""
    x = inputs[index].data
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if positions is None else positions
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            plus = float(np.sum(weights * fn(*inputs).data))
            flat[i] = orig - h
            minus = float(np.sum(weights * fn(*inputs).data))
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * h)
    return grad


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[Tensor], weights: np.ndarray) -> list[np.ndarray]:
    get_tape().reset()
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    backward(_project(fn(*inputs), weights))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], seed: int = 0,
                    h: float = 1e-5) -> list[float]:
    """Relative error of the analytic gradient for every input, in float64.

    The scalar objective is a random projection of ``fn``'s output so every
    output element contributes.
    """
    inputs = [Tensor(np.array(t.data, dtype=np.float64)) for t in inputs]
    out = fn(*inputs)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    get_tape().reset()
    ana = analytic_grads(fn, inputs, weights)
    errs = []
    for i in range(len(inputs)):
        num = numeric_grad(fn, inputs, weights, i, h)
        errs.append(relative_error(ana[i], num))
    return errs
