"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from hsattn.autodiff.tensor import Tensor

DEFAULT_STEP = 1e-4


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x``.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    g = np.zeros(x.shape) if x.grad is None else np.array(x.grad, dtype=np.float64)
    x.grad = None
    x.requires_grad = was
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = DEFAULT_STEP) -> float:
    """Max relative error between the backward pass and central differences.

    ``f`` maps ``x`` to a scalar tensor. It may also close over other tensors
    and ignore its argument, provided ``x`` is one of the tensors it reads.
    """
    return relative_error(analytic_grad(f, x), numeric_grad(f, x, h))


def grad_check_all(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = DEFAULT_STEP) -> dict[str, float]:
    """Run :func:`grad_check` for every named parameter of a closure-based loss."""
    return {name: grad_check(lambda _p: loss_fn(), p, h) for name, p in params.items()}
