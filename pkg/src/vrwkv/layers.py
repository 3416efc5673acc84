"""Small differentiable primitives used by the encoder (numpy, last-axis)."""

import numpy as np

LN_EPS = 1e-5


def layer_norm(x, g, b, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_backward(gy, cache):
    xhat, rstd, g = cache
    axes = tuple(range(gy.ndim - 1))
    gg = (gy * xhat).sum(axis=axes)
    gb = gy.sum(axis=axes)
    gxhat = gy * g
    gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                 - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, gg, gb


def sigmoid(x):
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def squared_relu(x):
    return np.square(np.maximum(x, 0))


def matmul_backward(gy, x, W):
    """Gradients of ``y = x @ W`` for x of shape (..., n) and W (n, m)."""
    gW = x.reshape(-1, x.shape[-1]).T @ gy.reshape(-1, gy.shape[-1])
    return gy @ W.T, gW


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def resize_matrix(n_out, n_in, dtype=np.float64):
    """Linear interpolation matrix (half-pixel centres, edge clamped).

    Identity when ``n_out == n_in``; applied along both grid axes it gives
    bilinear resizing, and its transpose is the exact adjoint.
    """
    M = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        M[:, 0] = 1.0
        return M
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(M, (rows, i0), 1.0 - frac)
    np.add.at(M, (rows, i1), frac)
    return M
