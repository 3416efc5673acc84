"""Token shift operators on ``(B, Hp, Wp, C)`` token grids.

Each mode builds a neighbour tensor ``N`` by slicing ``X`` (zero padding at
the border) and interpolates ``mu * X + (1 - mu) * N``:

* ``quad``: channel quarters come from the token above, below, left, right.
* ``causal``: every channel comes from the previous token in raster order.
* ``bidirectional``: channel halves come from the left and right tokens.
* ``none``: identity.

``literal=True`` switches to ``X + (1 - mu) * N`` instead of the convex form.
"""

import numpy as np

MODES = ("quad", "causal", "bidirectional", "none")


def _take(out, x, c0, c1, dh, dw):
    """``out[:, h, w, c0:c1] = x[:, h + dh, w + dw, c0:c1]``; out of grid is left alone."""
    H, W = x.shape[1], x.shape[2]
    hs, he = max(0, -dh), min(H, H - dh)
    ws, we = max(0, -dw), min(W, W - dw)
    if hs < he and ws < we:
        out[:, hs:he, ws:we, c0:c1] = x[:, hs + dh:he + dh, ws + dw:we + dw, c0:c1]


def _pattern(mode, C):
    """List of (channel start, channel stop, dh, dw) for grid-neighbour modes."""
    if mode == "quad":
        if C % 4:
            raise ValueError(f"quad shift needs C divisible by 4, got C={C}")
        q = C // 4
        return [(0, q, -1, 0), (q, 2 * q, 1, 0), (2 * q, 3 * q, 0, -1), (3 * q, C, 0, 1)]
    if mode == "bidirectional":
        if C % 2:
            raise ValueError(f"bidirectional shift needs even C, got C={C}")
        h = C // 2
        return [(0, h, 0, -1), (h, C, 0, 1)]
    raise ValueError(f"unknown shift mode {mode!r}")


def neighbours(x, mode, adjoint=False):
    """Build ``N`` for ``mode`` (or apply its transpose when ``adjoint``)."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected a (B, Hp, Wp, C) grid, got shape {x.shape}")
    if mode == "none":
        return np.zeros_like(x)
    if mode == "causal":
        B, H, W, C = x.shape
        flat = x.reshape(B, H * W, C)
        out = np.zeros_like(flat)
        if adjoint:
            out[:, :-1] = flat[:, 1:]
        else:
            out[:, 1:] = flat[:, :-1]
        return out.reshape(x.shape)
    out = np.zeros_like(x)
    sign = -1 if adjoint else 1
    for c0, c1, dh, dw in _pattern(mode, x.shape[3]):
        _take(out, x, c0, c1, sign * dh, sign * dw)
    return out


def _check_mu(mu, C):
    mu = np.asarray(mu)
    if mu.shape != (C,):
        raise ValueError(f"mu must have shape ({C},), got {mu.shape}")
    return np.clip(mu, 0.0, 1.0)


def token_shift(x, mu, mode="quad", literal=False):
    if mode not in MODES:
        raise ValueError(f"unknown shift mode {mode!r}")
    x = np.asarray(x)
    if mode == "none":
        return x
    m = _check_mu(mu, x.shape[-1]).astype(x.dtype, copy=False)
    xd = neighbours(x, mode)
    if literal:
        return x + (1 - m) * xd
    return m * x + (1 - m) * xd


def q_shift(x, mu, literal=False):
    return token_shift(x, mu, "quad", literal)


def token_shift_backward(gout, x, mu, mode="quad", literal=False):
    """Return ``(gx, gmu)`` for :func:`token_shift`.

    ``gmu`` is zero where ``mu`` lies outside [0, 1] (the clamp is flat there).
    """
    gout = np.asarray(gout)
    x = np.asarray(x)
    if gout.shape != x.shape:
        raise ValueError(f"gradient shape {gout.shape} does not match input {x.shape}")
    if mode not in MODES:
        raise ValueError(f"unknown shift mode {mode!r}")
    C = x.shape[-1]
    if mode == "none":
        return gout, np.zeros(C, dtype=x.dtype)
    mu = np.asarray(mu)
    m = _check_mu(mu, C).astype(x.dtype, copy=False)
    xd = neighbours(x, mode)
    gx = neighbours((1 - m) * gout, mode, adjoint=True)
    axes = tuple(range(x.ndim - 1))
    if literal:
        gx = gx + gout
        gm = -(gout * xd).sum(axis=axes)
    else:
        gx = gx + m * gout
        gm = (gout * (x - xd)).sum(axis=axes)
    gm = np.where((mu >= 0) & (mu <= 1), gm, 0.0).astype(x.dtype)
    return gx, gm
