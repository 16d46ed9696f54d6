"""Finite-difference verification of reverse-mode gradients.

Runs in float64 regardless of the training dtype: inputs are copied to
64-bit shadow tensors, the closure is evaluated once with the graph enabled
for the analytic gradients, and then twice per input element for central
differences.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, backward, no_grad


def as_f64(t: Tensor, requires_grad: bool = True) -> Tensor:
    return Tensor(t.data.astype(np.float64), requires_grad=requires_grad)


def grad_check(fn, inputs, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` must map the given tensors to a scalar Tensor and be deterministic.
    All `inputs` are treated as differentiation targets; anything else the
    closure captures is held constant.
    """
    shadows = [as_f64(t if isinstance(t, Tensor) else Tensor(t)) for t in inputs]
    out = fn(*shadows)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check closure must return a scalar Tensor")
    backward(out)
    analytic = [np.zeros_like(s.data) if s.grad is None else s.grad.copy() for s in shadows]

    def evaluate() -> float:
        with no_grad():
            return fn(*shadows).item()

    max_err = 0.0
    for s, a in zip(shadows, analytic):
        flat = s.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            scale = max(abs(a_flat[i]), abs(numeric))
            if scale < 1e-6:
                err = abs(a_flat[i] - numeric)
            else:
                err = abs(a_flat[i] - numeric) / scale
            if err > max_err:
                max_err = err
    return max_err
