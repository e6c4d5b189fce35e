"""Finite-difference gradient verification."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(fn, inputs, eps: float = 1e-4) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps the given tensors to a scalar Tensor.  Inputs must be float64
    leaves with ``requires_grad``; each coordinate is perturbed by +/-eps.
    Returns the max over coordinates of
    ``|analytic - numeric| / max(1e-12, |analytic| + |numeric|)``.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        if not t.requires_grad:
            raise ValueError("grad_check inputs must require grad")
        t.zero_grad()

    out = fn(*inputs)
    if out.size != 1:
        raise ValueError("grad_check target must be scalar")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                hi = fn(*inputs).item()
                flat[i] = keep - eps
                lo = fn(*inputs).item()
                flat[i] = keep
                numeric = (hi - lo) / (2.0 * eps)
                denom = max(1e-12, abs(gflat[i]) + abs(numeric))
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
