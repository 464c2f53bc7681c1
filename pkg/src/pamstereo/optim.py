"""Adam updates and the central-difference gradient checker."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import NumericsError, Param, Tape, Tensor

__all__ = ["adam_update", "grad_check"]


def adam_update(p: Param, grad: Optional[np.ndarray] = None, lr: float = 1e-3,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                weight_decay: float = 0.0) -> Param:
    """One in-place Adam step with bias correction.

    `grad` defaults to the parameter's accumulated gradient.  The first
    step moves by roughly -lr * sign(grad).  `weight_decay` is decoupled
    (applied directly to the value, scaled by lr).
    """
    if grad is None:
        grad = p.value.grad
    if grad is None:
        raise ValueError("no gradient available for Adam update")
    grad = np.asarray(grad)
    if grad.shape != p.value.data.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {p.value.data.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericsError("non-finite gradient in Adam update")
    p.step_count += 1
    t = p.step_count
    p.adam_m *= beta1
    p.adam_m += (1.0 - beta1) * grad
    p.adam_v *= beta2
    p.adam_v += (1.0 - beta2) * grad * grad
    mhat = p.adam_m / (1.0 - beta1 ** t)
    vhat = p.adam_v / (1.0 - beta2 ** t)
    p.value.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.data.dtype)
    if weight_decay:
        p.value.data -= (lr * weight_decay) * p.value.data
    return p


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per element is |analytic - numeric| / max(1, |analytic|).  Run at
    64-bit precision; `f` must map a tensor to a finite scalar.
    """
    x = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x)
        if y.data.size != 1:
            raise ValueError("grad_check target must be scalar")
        if not np.isfinite(y.data):
            raise NumericsError("non-finite function value in grad_check")
        tape.backward(y)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x.data.copy(), dtype=np.float64)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x.data.copy(), dtype=np.float64)).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError("non-finite function value in grad_check")
        nflat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
