"""Shared test utilities: finite-difference gradients and brute-force oracles."""

import numpy as np

from flowcast import autodiff
from flowcast.autodiff import Tensor


def finite_difference(fn, tensors, index, eps=1e-4):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``tensors[index]``.

    ``fn`` must rebuild the graph from the tensors' current data on each call.
    """
    t = tensors[index]
    base = t.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with autodiff.no_grad():
            hi = fn().item()
        flat[i] = orig - eps
        with autodiff.no_grad():
            lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def check_gradients(fn, tensors, eps=1e-4, tol=1e-4):
    """Assert analytic gradients of scalar ``fn()`` match central differences.

    Relative error uses max(1, |analytic|, |numeric|) as the scale so that
    near-zero entries are compared absolutely.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn()
    autodiff.backward(loss)
    for idx, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        analytic = t.grad
        numeric = finite_difference(fn, tensors, idx, eps=eps)
        scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        err = np.abs(analytic - numeric) / scale
        assert err.max() < tol, (
            f"gradient mismatch for input {idx}: max rel err {err.max():.3e}\n"
            f"analytic={analytic}\nnumeric={numeric}"
        )


def conv2d_bruteforce(x, w, b, stride=1, pad=0):
    """Nested-loop cross-correlation, the oracle conv2d is checked against."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    out[ni, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def integer_shift_remap(features, dx, dy):
    """Index-remap oracle for integer flow: out[i, j] = f[i + dy, j + dx], zero outside."""
    n, c, h, w = features.shape
    out = np.zeros_like(features)
    for i in range(h):
        for j in range(w):
            si, sj = i + dy, j + dx
            if 0 <= si < h and 0 <= sj < w:
                out[:, :, i, j] = features[:, :, si, sj]
    return out


def tensor64(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)
