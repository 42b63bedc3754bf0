"""Shared test oracles.

These deliberately re-derive results through independent routes (finite
differences, brute-force pair counting) rather than re-using the
production code paths they check.
"""

from __future__ import annotations

import numpy as np

from inmerge.layers import (
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
    sigmoid_bce_loss,
    softmax_ce_loss,
)

FD_STEP = 1e-3
REL_TOL = 1e-3


def numeric_grad(scalar_fn, x: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
    """Central finite differences of ``scalar_fn()`` w.r.t. the entries of
    ``x`` (mutated in place during probing, restored afterwards)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        f_plus = scalar_fn()
        x[idx] = orig - eps
        f_minus = scalar_fn()
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _relu_safe(rng, shape):
    """Random values bounded away from the relu kink at 0."""
    return (rng.uniform(0.05, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape))


def _pool_safe(rng, shape, window, stride, tries=50):
    """Random input whose per-window top-2 gap exceeds the probe step, so
    finite differences never flip an argmax."""
    for t in range(tries):
        x = rng.uniform(0.0, 1.0, size=shape)
        from numpy.lib.stride_tricks import sliding_window_view

        win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
        flat = np.sort(win.reshape(-1, window * window), axis=1)
        if window * window == 1 or (flat[:, -1] - flat[:, -2]).min() > 3 * FD_STEP:
            return x
    raise AssertionError("could not draw a tie-safe pooling input")


def gradcheck_case(kind: str, seed: int) -> float:
    """One finite-difference check of ``kind``; returns the relative error.

    All math runs in float64 so the probe step dominates the error.
    """
    rng = np.random.default_rng(seed)
    if kind == "conv2d":
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        c_in, c_out, n = int(rng.integers(1, 3)), int(rng.integers(1, 4)), 2
        h = kh + stride * int(rng.integers(1, 4)) - 2 * padding
        w = kw + stride * int(rng.integers(1, 4)) - 2 * padding
        x = rng.normal(size=(n, c_in, h, w))
        wt = rng.normal(size=(c_out, c_in, kh, kw))
        b = rng.normal(size=c_out)
        proj = rng.normal(size=conv2d_forward(x, wt, b, stride, padding).shape)
        fn = lambda: float((conv2d_forward(x, wt, b, stride, padding) * proj).sum())
        gx, gw, gb = conv2d_backward(proj, x, wt, stride, padding)
        return max(
            rel_err(gx, numeric_grad(fn, x)),
            rel_err(gw, numeric_grad(fn, wt)),
            rel_err(gb, numeric_grad(fn, b)),
        )
    if kind == "dense":
        n, f_in, f_out = 3, int(rng.integers(1, 6)), int(rng.integers(1, 5))
        x = rng.normal(size=(n, f_in))
        wt = rng.normal(size=(f_out, f_in))
        b = rng.normal(size=f_out)
        proj = rng.normal(size=(n, f_out))
        fn = lambda: float((dense_forward(x, wt, b) * proj).sum())
        gx, gw, gb = dense_backward(proj, x, wt)
        return max(
            rel_err(gx, numeric_grad(fn, x)),
            rel_err(gw, numeric_grad(fn, wt)),
            rel_err(gb, numeric_grad(fn, b)),
        )
    if kind == "relu":
        x = _relu_safe(rng, (3, int(rng.integers(2, 8))))
        proj = rng.normal(size=x.shape)
        fn = lambda: float((relu(x) * proj).sum())
        return rel_err(relu_backward(proj, x), numeric_grad(fn, x))
    if kind == "maxpool2d":
        window = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        h = window + stride * int(rng.integers(1, 4))
        x = _pool_safe(rng, (2, 2, h, h), window, stride)
        proj = rng.normal(size=maxpool2d(x, window, stride)[0].shape)

        def fn():
            out, _ = maxpool2d(x, window, stride)
            return float((out * proj).sum())

        _, cache = maxpool2d(x, window, stride)
        return rel_err(maxpool2d_backward(proj, cache), numeric_grad(fn, x))
    if kind == "softmax_ce":
        n, k = 4, int(rng.integers(2, 6))
        logits = rng.normal(size=(n, k))
        labels = rng.integers(0, k, size=n)
        fn = lambda: softmax_ce_loss(logits, labels)[0]
        _, grad = softmax_ce_loss(logits, labels)
        return rel_err(grad, numeric_grad(fn, logits))
    if kind == "sigmoid_bce":
        n, k = 4, int(rng.integers(1, 6))
        logits = rng.normal(size=(n, k))
        labels = rng.integers(0, 2, size=(n, k))
        fn = lambda: sigmoid_bce_loss(logits, labels)[0]
        _, grad = sigmoid_bce_loss(logits, labels)
        return rel_err(grad, numeric_grad(fn, logits))
    raise ValueError(f"unknown kind {kind}")


GRADCHECK_KINDS = ("conv2d", "dense", "relu", "maxpool2d", "softmax_ce", "sigmoid_bce")


def auroc_pair_oracle(scores: np.ndarray, labels: np.ndarray) -> float:
    """O(n^2) Mann-Whitney oracle: (concordant + 0.5 * tied) / (n1 * n0)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    concordant = float((diff > 0).sum())
    tied = float((diff == 0).sum())
    return (concordant + 0.5 * tied) / (pos.size * neg.size)
