"""Finite-difference verification of reverse-mode gradients.

Central differences are the independent oracle for every differentiable op:
perturb one scalar entry at a time, re-run the forward function, and compare
the slope against the tape's gradient.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_grad(fn, tensor, h=1e-5, entries=None, rng=None):
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``tensor``.

    ``fn`` must be a zero-argument callable re-running the forward pass and
    returning a scalar Tensor; it reads ``tensor.data`` by reference so the
    in-place perturbations are visible. Returns (flat_indices, slopes).
    If ``entries`` is given, only that many randomly chosen entries are probed.
    """
    flat = tensor.data.reshape(-1)
    idx = np.arange(flat.size)
    if entries is not None and entries < flat.size:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=entries, replace=False)
    slopes = np.empty(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(fn().data.reshape(-1)[0])
        flat[i] = orig - h
        lo = float(fn().data.reshape(-1)[0])
        flat[i] = orig
        slopes[n] = (hi - lo) / (2.0 * h)
    return idx, slopes


def max_rel_err(analytic, numeric, zero_floor=1e-8):
    """Worst relative error between gradient samples; exact-zero pairs pass."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    rel = np.where(scale > zero_floor, err / np.maximum(scale, zero_floor), 0.0)
    return float(rel.max()) if rel.size else 0.0


def check_gradients(fn, tensors, h=1e-5, rel_tol=1e-4, entries=None, rng=None):
    """Assert tape gradients of scalar ``fn()`` match central differences.

    Runs one backward pass, then probes each tensor in ``tensors`` (all
    entries, or ``entries`` random ones each). Returns the worst relative
    error observed; raises AssertionError above ``rel_tol``.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached a checked tensor"
        analytic_flat = t.grad.reshape(-1)
        idx, slopes = numerical_grad(fn, t, h=h, entries=entries, rng=rng)
        worst = max(worst, max_rel_err(analytic_flat[idx], slopes))
    assert worst <= rel_tol, f"gradient mismatch: max rel err {worst:.3e} > {rel_tol:.1e}"
    return worst


def leaf(data, rng=None, shape=None):
    """Convenience: a float64 leaf tensor with requires_grad, random if rng given."""
    if rng is not None:
        data = rng.standard_normal(shape)
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
