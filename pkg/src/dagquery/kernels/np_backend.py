"""Pure numpy implementations of the hot kernels.

Semantics contract shared with the compiled backend in `_core.pyx`:
identical signatures, identical math, same dtype in as out (float32 or
float64).  Disallowed softmax entries are exactly zero on both backends.
"""

from __future__ import annotations

import numpy as np

GELU_C = float(np.sqrt(2.0 / np.pi))
GELU_A = 0.044715


def masked_softmax(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Row softmax over the last axis restricted to `allowed` entries.

    Disallowed entries are exactly 0 in the result.  Every row must have
    at least one allowed entry.
    """
    s = np.where(allowed, scores, -np.inf)
    m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)  # exp(-inf) == 0.0 exactly
    denom = np.sum(e, axis=-1, keepdims=True)
    return e / denom


def softmax_grad(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Backward of row softmax: dscores from probs and dprobs."""
    inner = np.sum(probs * dprobs, axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def layer_norm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize the last axis; returns (y, xhat, rstd)."""
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gain + bias, xhat, rstd.squeeze(-1)


def layer_norm_grad(
    dy: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gain: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward of layer_norm; returns (dx, dgain, dbias)."""
    d = xhat.shape[-1]
    dxhat = dy * gain
    mean_dxhat = np.mean(dxhat, axis=-1, keepdims=True)
    mean_dxhat_xhat = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * rstd[..., None]
    axes = tuple(range(dy.ndim - 1))
    return dx, np.sum(dy * xhat, axis=axes), np.sum(dy, axis=axes)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-approximation GELU."""
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def gelu_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def softmax_xent(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax cross-entropy.

    Returns (losses, dlogits) where dlogits = softmax(logits) - onehot,
    NOT scaled by any batch normalizer (the caller applies 1/N).
    """
    n = logits.shape[0]
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - m)
    z = np.sum(e, axis=-1, keepdims=True)
    log_probs = logits - m - np.log(z)
    rows = np.arange(n)
    losses = -log_probs[rows, labels]
    dlogits = e / z
    dlogits[rows, labels] -= 1.0
    return losses, dlogits


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> None:
    """One bias-corrected Adam update, in place on param, m and v."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def add_rows(acc: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """acc[idx[i]] += rows[i] with repeated indices accumulated."""
    np.add.at(acc, idx, rows)
