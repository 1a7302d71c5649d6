"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Tensor, backward, zero_grads


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    sample: Optional[Sequence[int]] = None,
) -> float:
    """Compare the analytic gradient of scalar-valued ``f`` at ``x`` against
    central differences (f(x+h) - f(x-h)) / 2h.

    Returns max over checked elements of |analytic - numeric| / max(1, |numeric|).
    ``sample`` restricts the check to the given flat indices (all elements by
    default). ``x`` is evaluated at 64-bit fidelity only if built that way;
    callers pick the precision.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ValueError(f"f must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite function value in finite_difference_check")
    zero_grads([probe])
    backward(out)
    analytic = probe.grad.reshape(-1).copy() if probe.grad is not None else np.zeros(x.size, dtype=x.dtype)

    flat = x.data.reshape(-1).copy()
    indices = range(flat.size) if sample is None else sample
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        hi = _eval(f, flat, x)
        flat[i] = orig - h
        lo = _eval(f, flat, x)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * h)
        err = abs(float(analytic[i]) - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


def _eval(f, flat: np.ndarray, template: Tensor) -> float:
    value = f(Tensor(flat.reshape(template.shape).copy()))
    v = float(value.data.reshape(()))
    if not np.isfinite(v):
        raise NumericError("non-finite function value in finite_difference_check")
    return v
