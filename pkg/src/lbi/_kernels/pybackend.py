"""NumPy implementations of the hot-path kernels.

This module is the portable fallback backend and the reference semantics
for the compiled backend in ``_core``: for identical inputs the two must
agree to ~1e-13 relative error (bit-identity is not promised because
summation orders differ).

Conventions shared by both backends:

* all float arrays are C-contiguous float64,
* token sequences arrive flattened as ``tokens`` (int64) plus an
  ``offsets`` array of length B+1 (CSR-style ragged layout),
* ``wpe`` arguments are per-example weights folded into backward passes,
  so a mean loss uses ``wpe = 1/B`` and a weighted sum uses ``wpe = a``,
* ``adam_step`` mutates ``param``, ``m`` and ``v`` in place.

Shape validation happens in the callers; kernels assume clean inputs.
"""

import numpy as np


def linear_fwd(x, w, b):
    """y[i] = x[i] @ w.T + b for a stack of rows."""
    return x @ w.T + b


def linear_bwd(x, w, dy, need_dx=True):
    """Gradients of a linear layer; ``dx`` is skipped when not needed."""
    dw = dy.T @ x
    db = dy.sum(axis=0)
    dx = dy @ w if need_dx else None
    return dx, dw, db


def matmul(a, b):
    return a @ b


def tanh_fwd(x):
    return np.tanh(x)


def tanh_bwd(y, dy):
    return dy * (1.0 - y * y)


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, dy):
    return np.where(x > 0.0, dy, 0.0)


def sigmoid_fwd(x):
    # Split by sign so the exponential never overflows.
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid_bwd(y, dy):
    return dy * y * (1.0 - y)


def softmax_fwd(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent_fwd(logits, labels):
    """Per-example cross-entropy of a softmax over ``logits``.

    Returns ``(losses, probs)``; losses are >= 0 by construction since
    both ``max - logit[label]`` and ``log(sum exp)`` are non-negative.
    """
    m = logits.max(axis=1)
    shifted = logits - m[:, None]
    e = np.exp(shifted)
    s = e.sum(axis=1)
    rows = np.arange(logits.shape[0])
    losses = np.log(s) + (m - logits[rows, labels])
    probs = e / s[:, None]
    return losses, probs


def softmax_xent_bwd(probs, labels, wpe):
    """d(sum_i wpe[i] * loss_i)/dlogits given cached softmax ``probs``."""
    g = probs * wpe[:, None]
    g[np.arange(probs.shape[0]), labels] -= wpe
    return g


def bce_logits_fwd(z, y):
    """Per-example binary cross-entropy on logits (stable softplus form)."""
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def bce_logits_bwd(z, y, wpe):
    return (sigmoid_fwd(z) - y) * wpe


def embed_meanpool_fwd(table, tokens, offsets):
    """Mean of embedding rows per segment; segments must be non-empty."""
    n = offsets.shape[0] - 1
    gathered = table[tokens]
    sums = np.add.reduceat(gathered, offsets[:-1], axis=0)
    lengths = (offsets[1:] - offsets[:-1]).astype(np.float64)
    return sums / lengths[:, None], lengths


def embed_meanpool_bwd(dout, tokens, offsets, n_rows):
    lengths = (offsets[1:] - offsets[:-1]).astype(np.float64)
    scaled = dout / lengths[:, None]
    dtable = np.zeros((n_rows, dout.shape[1]))
    np.add.at(dtable, tokens, np.repeat(scaled, (offsets[1:] - offsets[:-1]), axis=0))
    return dtable


def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One bias-corrected Adam update, in place.

    Weight decay is decoupled: the multiplicative shrink happens after
    the Adam update, not inside the gradient.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    if weight_decay > 0.0:
        param *= 1.0 - lr * weight_decay
