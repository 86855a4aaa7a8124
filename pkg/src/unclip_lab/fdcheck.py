"""Finite-difference oracle for gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import AutogradError, backward, default_dtype


def finite_diff_check(function, params, h=1e-3):
    """Compare reverse-mode gradients of `function()` against central differences.

    `function` must be a deterministic closure over `params` returning a
    scalar Tensor. The whole check runs with the engine switched to
    float64 so the oracle is not drowned by float32 rounding; parameter
    values are restored (bit-exact float32) afterwards. Returns the max
    elementwise relative error, denominator max(|a|, |b|, 1e-8).
    """
    saved = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        with default_dtype(np.float64):
            out1 = function()
            out2 = function()
            if abs(out1.item() - out2.item()) > 0:
                raise AutogradError("function is not deterministic across evaluations")

            loss = function()
            backward(loss, params=params)
            analytic = [p.grad.copy() for p in params]

            max_err = 0.0
            for p, ga in zip(params, analytic):
                flat = p.data.reshape(-1)
                gflat = np.asarray(ga).reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = float(function().item())
                    flat[i] = orig - h
                    fm = float(function().item())
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * h)
                    a, b = float(gflat[i]), num
                    err = abs(a - b) / max(abs(a), abs(b), 1e-8)
                    max_err = max(max_err, err)
            return max_err
    finally:
        for p, d in zip(params, saved):
            p.data = d
            p.grad = None
