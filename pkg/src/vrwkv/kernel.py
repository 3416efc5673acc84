"""Bi-WKV: bidirectional weighted key-value attention.

For each channel c and token t the operator returns a positive-weight
average of the values::

    wkv[t] = (sum_{i != t} e^{-(|t-i|-1)/T * w + k[i]} v[i] + e^{u + k[t]} v[t])
             / (sum_{i != t} e^{-(|t-i|-1)/T * w + k[i]}      + e^{u + k[t]})

Three evaluation routes live here:

* :func:`biwkv_oracle` evaluates the double sum directly, O(T^2 C).
* :func:`biwkv_forward` / :func:`biwkv_backward` run the O(T C) recurrences
  over past states (a, c) and future states (b, d), each carried as a
  mantissa plus running max-exponent so no exponential exceeds 1.

Arrays are ``(T, C)`` or batched ``(N, T, C)``; ``w`` and ``u`` are ``(C,)``.
The recurrent kernels have a numba path and a vectorised numpy path with
identical math (see :mod:`vrwkv._accel`).
"""

from dataclasses import dataclass

import numpy as np

from vrwkv._accel import njit, resolve_backend

FLOPS_PER_TOKEN_CHANNEL = 13
_INT64_MAX = np.iinfo(np.int64).max


class NonFiniteInputError(ValueError):
    pass


class DegenerateInputError(ArithmeticError):
    """The Bi-WKV denominator underflowed to exactly zero."""


class RecurrenceError(FloatingPointError):
    """A safe recurrence produced a non-finite value (indicates a bug)."""


@dataclass
class WkvContext:
    """What the backward pass needs from a forward call."""
    k: np.ndarray
    v: np.ndarray
    w: np.ndarray
    u: np.ndarray
    y: np.ndarray
    logd: np.ndarray  # log of the full denominator per (n, t, c)
    bounded: bool
    causal: bool
    squeeze: bool


@dataclass
class WkvGradients:
    gw: np.ndarray
    gu: np.ndarray
    gk: np.ndarray
    gv: np.ndarray


def _prepare(k, v, w, u, dtype=None):
    k = np.asarray(k)
    v = np.asarray(v)
    if dtype is None:
        dtype = np.result_type(k.dtype, v.dtype, np.float32)
        if dtype not in (np.float32, np.float64):
            dtype = np.float64
    if k.shape != v.shape:
        raise ValueError(f"K and V shapes differ: {k.shape} vs {v.shape}")
    if k.ndim not in (2, 3):
        raise ValueError(f"expected (T, C) or (N, T, C), got shape {k.shape}")
    squeeze = k.ndim == 2
    if squeeze:
        k = k[None]
        v = v[None]
    n, t, c = k.shape
    if t < 1 or c < 1:
        raise ValueError(f"need T >= 1 and C >= 1, got T={t}, C={c}")
    w = np.asarray(w, dtype=dtype).reshape(-1)
    u = np.asarray(u, dtype=dtype).reshape(-1)
    if w.shape != (c,) or u.shape != (c,):
        raise ValueError(f"w and u must have length C={c}, got {w.shape} and {u.shape}")
    k = np.ascontiguousarray(k, dtype=dtype)
    v = np.ascontiguousarray(v, dtype=dtype)
    for name, arr in (("K", k), ("V", v), ("w", w), ("u", u)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInputError(f"{name} contains non-finite entries")
    return k, v, w, u, squeeze


def biwkv_oracle(k, v, w, u, *, bounded=True, causal=False):
    """Direct double-sum evaluation in float64. O(T^2 C) time and memory.

    ``causal=True`` restricts the sum to ``i <= t`` (the unidirectional
    RWKV attention). ``bounded=False`` drops the ``/T`` on the distance.
    """
    k, v, w, u, squeeze = _prepare(k, v, w, u, dtype=np.float64)
    T = k.shape[1]
    idx = np.arange(T)
    dist = np.abs(idx[:, None] - idx[None, :]) - 1.0  # (t, i)
    if bounded:
        dist = dist / T
    expo = -dist[None, :, :, None] * w + k[:, None, :, :]  # (n, t, i, c)
    diag = np.arange(T)
    expo[:, diag, diag, :] = u + k
    with np.errstate(over="ignore", under="ignore"):
        wts = np.exp(expo)
    if causal:
        wts = wts * (idx[None, :] <= idx[:, None])[None, :, :, None]
    num = np.einsum("ntic,nic->ntc", wts, v)
    den = wts.sum(axis=2)
    if np.any(den == 0.0):
        raise DegenerateInputError("Bi-WKV denominator underflowed to zero")
    if not (np.all(np.isfinite(num)) and np.all(np.isfinite(den))):
        raise FloatingPointError("exponential overflow in direct Bi-WKV evaluation")
    # a lone token's weight cancels exactly; skip the rounding of e^x v / e^x
    y = v.copy() if T == 1 else num / den
    return y[0] if squeeze else y


# --------------------------------------------------------------------------
# numba kernels


@njit(inline="always")
def _merge(p, x, one):
    """``q = max(p, x)`` with ``(e^(p-q), e^(x-q))``; one factor is exactly 1."""
    if p > x:
        return p, one, np.exp(x - p)
    return x, np.exp(p - x), one


@njit(cache=True)
def _forward_nb(k, v, lam, u, ninf, zero, safe, causal, flip, y, logd):
    # token-outer, channel-inner: rows of (T, C) are read contiguously and
    # all recurrence state lives in length-C vectors
    N, T, C = k.shape
    one = np.exp(zero)
    st = np.empty((3, C), k.dtype)
    for n in range(N):
        # reverse sweep: the future part of every output, parked in the
        # output buffers as (b / d, p + log d)
        if not causal:
            st[0] = zero
            st[1] = zero
            st[2] = ninf if safe else zero
            for t in range(T - 1, -1, -1):
                for c in range(C):
                    b = st[0, c]
                    d = st[1, c]
                    p = st[2, c]
                    if d > zero:
                        y[n, t, c] = b / d
                        logd[n, t, c] = p + np.log(d)
                    else:
                        y[n, t, c] = zero
                        logd[n, t, c] = ninf
                    kt = k[n, t, c]
                    if safe:
                        p, e1, e2 = _merge(p - lam[c], kt, one)
                    else:
                        e1 = np.exp(-lam[c])
                        e2 = np.exp(kt)
                    st[0, c] = e1 * b + e2 * v[n, t, c]
                    st[1, c] = e1 * d + e2
                    st[2, c] = p
        # forward sweep: past states, combined with the parked future part
        st[0] = zero
        st[1] = zero
        st[2] = ninf if safe else zero
        for t in range(T):
            for c in range(C):
                a = st[0, c]
                cc = st[1, c]
                p = st[2, c]
                kt = k[n, t, c]
                vt = v[n, t, c]
                s = u[c] + kt
                if causal:
                    rf = zero
                    lf = ninf
                else:
                    rf = y[n, t, c]
                    lf = logd[n, t, c]
                if safe:
                    m = max(max(p, lf), s)
                    ea = np.exp(p - m)
                    eb = np.exp(lf - m)
                    es = np.exp(s - m)
                else:
                    m = zero
                    ea = one
                    eb = np.exp(lf)
                    es = np.exp(s)
                num = a * ea + rf * eb + es * vt
                den = cc * ea + eb + es
                y[n, t, c] = num / den
                logd[n, t, c] = m + np.log(den)
                la = -lam[c] if flip else lam[c]
                if safe:
                    p, e1, e2 = _merge(p - la, kt, one)
                else:
                    e1 = np.exp(-la)
                    e2 = np.exp(kt)
                st[0, c] = e1 * a + e2 * vt
                st[1, c] = e1 * cc + e2
                st[2, c] = p


@njit(cache=True)
def _backward_nb(k, v, lam, u, y, logd, gy, ninf, zero, scale, causal, gk, gv, gw, gu):
    N, T, C = k.shape
    one = np.exp(zero)
    st = np.empty((8, C), k.dtype)
    for n in range(N):
        # forward sweep: past states (a, cc, da, dc | pa) feed gw;
        # qs/qr accumulate gy/D and gy*y/D of earlier outputs (| pq)
        st[:6] = zero
        st[6] = ninf
        st[7] = ninf
        for t in range(T):
            for c in range(C):
                a, cc, da, dc, qs, qr, pa, pq = st[0, c], st[1, c], st[2, c], st[3, c], \
                    st[4, c], st[5, c], st[6, c], st[7, c]
                lc = lam[c]
                kt = k[n, t, c]
                vt = v[n, t, c]
                yt = y[n, t, c]
                ld = logd[n, t, c]
                g = gy[n, t, c]
                gs = g * np.exp(u[c] + kt - ld)
                gvt = gs
                gkt = gs * (vt - yt)
                gu[c] += gkt
                gw[c] -= scale * g * np.exp(pa - ld) * (da - yt * dc)
                if not causal:
                    eq = np.exp(kt + pq)
                    gvt += eq * qs
                    gkt += eq * (vt * qs - qr)
                gk[n, t, c] = gkt
                gv[n, t, c] = gvt
                pa, e1, e2 = _merge(pa - lc, kt, one)
                st[2, c] = e1 * (da + a)
                st[3, c] = e1 * (dc + cc)
                st[0, c] = e1 * a + e2 * vt
                st[1, c] = e1 * cc + e2
                st[6, c] = pa
                if not causal:
                    pq, e1, e2 = _merge(pq - lc, -ld, one)
                    e2 = e2 * g
                    st[4, c] = e1 * qs + e2
                    st[5, c] = e1 * qr + e2 * yt
                    st[7, c] = pq
        # reverse sweep: future states (b, d, db, dd | pb) feed gw;
        # ps/pr accumulate over later outputs (| pp)
        st[:6] = zero
        st[6] = ninf
        st[7] = ninf
        for t in range(T - 1, -1, -1):
            for c in range(C):
                b, d, db, dd, ps, pr, pb, pp = st[0, c], st[1, c], st[2, c], st[3, c], \
                    st[4, c], st[5, c], st[6, c], st[7, c]
                lc = lam[c]
                kt = k[n, t, c]
                vt = v[n, t, c]
                yt = y[n, t, c]
                ld = logd[n, t, c]
                g = gy[n, t, c]
                ep = np.exp(kt + pp)
                gv[n, t, c] += ep * ps
                gk[n, t, c] += ep * (vt * ps - pr)
                pp, e1, e2 = _merge(pp - lc, -ld, one)
                e2 = e2 * g
                st[4, c] = e1 * ps + e2
                st[5, c] = e1 * pr + e2 * yt
                st[7, c] = pp
                if causal:
                    continue
                gw[c] -= scale * g * np.exp(pb - ld) * (db - yt * dd)
                pb, e1, e2 = _merge(pb - lc, kt, one)
                st[2, c] = e1 * (db + b)
                st[3, c] = e1 * (dd + d)
                st[0, c] = e1 * b + e2 * vt
                st[1, c] = e1 * d + e2
                st[6, c] = pb


# --------------------------------------------------------------------------
# numpy kernels: same recurrences, vectorised over (N, C), looped over T


def _forward_np(k, v, lam, u, safe, causal, flip):
    N, T, C = k.shape
    dt = k.dtype
    ninf = dt.type(-np.inf)
    la = -lam if flip else lam
    fb = np.zeros((T, N, C), dt)
    fd = np.zeros((T, N, C), dt)
    fp = np.zeros((T, N, C), dt)
    b = np.zeros((N, C), dt)
    d = np.zeros((N, C), dt)
    p = np.full((N, C), ninf if safe else 0, dt)
    kT = k.transpose(1, 0, 2)
    vT = v.transpose(1, 0, 2)
    if causal:
        fp[:] = p
    else:
        decay = np.exp(-lam)
        for t in range(T - 1, -1, -1):
            fb[t], fd[t], fp[t] = b, d, p
            kt = kT[t]
            if safe:
                q = np.maximum(p - lam, kt)
                e1 = np.exp(p - lam - q)
                e2 = np.exp(kt - q)
                p = q
            else:
                e1 = decay
                e2 = np.exp(kt)
            b = e1 * b + e2 * vT[t]
            d = e1 * d + e2
    y = np.empty((T, N, C), dt)
    logd = np.empty((T, N, C), dt)
    a = np.zeros((N, C), dt)
    cc = np.zeros((N, C), dt)
    p = np.full((N, C), ninf if safe else 0, dt)
    decay = np.exp(-la)
    for t in range(T):
        kt = kT[t]
        vt = vT[t]
        s = u + kt
        if safe:
            m = np.maximum(np.maximum(p, fp[t]), s)
            ea = np.exp(p - m)
            eb = np.exp(fp[t] - m)
            es = np.exp(s - m)
        else:
            m = 0
            ea = eb = 1
            es = np.exp(s)
        num = a * ea + fb[t] * eb + es * vt
        den = cc * ea + fd[t] * eb + es
        y[t] = num / den
        logd[t] = m + np.log(den)
        if safe:
            q = np.maximum(p - la, kt)
            e1 = np.exp(p - la - q)
            e2 = np.exp(kt - q)
            p = q
        else:
            e1 = decay
            e2 = np.exp(kt)
        a = e1 * a + e2 * vt
        cc = e1 * cc + e2
    return y.transpose(1, 0, 2), logd.transpose(1, 0, 2)


def _backward_np(k, v, lam, u, y, logd, gy, scale, causal):
    N, T, C = k.shape
    dt = k.dtype
    ninf = dt.type(-np.inf)
    kT, vT, yT, lT, gT = (x.transpose(1, 0, 2) for x in (k, v, y, logd, gy))
    gk = np.empty((T, N, C), dt)
    gv = np.empty((T, N, C), dt)
    gw = np.zeros((N, C), dt)
    gu = np.zeros((N, C), dt)

    def zeros():
        return np.zeros((N, C), dt)

    a, cc, da, dc, qs, qr = (zeros() for _ in range(6))
    pa = np.full((N, C), ninf, dt)
    pq = np.full((N, C), ninf, dt)
    for t in range(T):
        kt, vt, yt, ld, g = kT[t], vT[t], yT[t], lT[t], gT[t]
        gs = g * np.exp(u + kt - ld)
        gvt = gs
        gkt = gs * (vt - yt)
        gu += gkt
        gw -= scale * g * np.exp(pa - ld) * (da - yt * dc)
        if not causal:
            eq = np.exp(kt + pq)
            gvt = gvt + eq * qs
            gkt = gkt + eq * (vt * qs - qr)
        gk[t] = gkt
        gv[t] = gvt
        q = np.maximum(pa - lam, kt)
        e1 = np.exp(pa - lam - q)
        e2 = np.exp(kt - q)
        da = e1 * (da + a)
        dc = e1 * (dc + cc)
        a = e1 * a + e2 * vt
        cc = e1 * cc + e2
        pa = q
        if not causal:
            q = np.maximum(pq - lam, -ld)
            e1 = np.exp(pq - lam - q)
            e2 = np.exp(-ld - q) * g
            qs = e1 * qs + e2
            qr = e1 * qr + e2 * yt
            pq = q

    b, d, db, dd, ps, pr = (zeros() for _ in range(6))
    pb = np.full((N, C), ninf, dt)
    pp = np.full((N, C), ninf, dt)
    for t in range(T - 1, -1, -1):
        kt, vt, yt, ld, g = kT[t], vT[t], yT[t], lT[t], gT[t]
        ep = np.exp(kt + pp)
        gv[t] += ep * ps
        gk[t] += ep * (vt * ps - pr)
        q = np.maximum(pp - lam, -ld)
        e1 = np.exp(pp - lam - q)
        e2 = np.exp(-ld - q) * g
        ps = e1 * ps + e2
        pr = e1 * pr + e2 * yt
        pp = q
        if causal:
            continue
        gw -= scale * g * np.exp(pb - ld) * (db - yt * dd)
        q = np.maximum(pb - lam, kt)
        e1 = np.exp(pb - lam - q)
        e2 = np.exp(kt - q)
        db = e1 * (db + b)
        dd = e1 * (dd + d)
        b = e1 * b + e2 * vt
        d = e1 * d + e2
        pb = q
    return gw.sum(0), gu.sum(0), gk.transpose(1, 0, 2), gv.transpose(1, 0, 2)


# --------------------------------------------------------------------------
# public entry points


def biwkv_forward(k, v, w, u, *, bounded=True, safe=True, causal=False,
                  backend=None, dtype=None, _flip_decay=False):
    """O(T C) recurrent Bi-WKV.

    Returns ``(wkv, ctx)`` where ``ctx`` feeds :func:`biwkv_backward`.

    ``safe=False`` disables max-exponent tracking and ``bounded=False``
    drops the ``/T`` distance scaling; both exist for the overflow
    ablation and may return inf/nan. ``_flip_decay`` flips the sign of the
    past-state decay, a deliberate bug used as a negative control.
    """
    k, v, w, u, squeeze = _prepare(k, v, w, u, dtype=dtype)
    T = k.shape[1]
    lam = (w / T if bounded else w).astype(k.dtype)
    if resolve_backend(backend) == "numba":
        y = np.empty_like(k)
        logd = np.empty_like(k)
        _forward_nb(k, v, lam, u, k.dtype.type(-np.inf), k.dtype.type(0),
                    safe, causal, _flip_decay, y, logd)
    else:
        with np.errstate(over="ignore", invalid="ignore"):
            y, logd = _forward_np(k, v, lam, u, safe, causal, _flip_decay)
        y = np.ascontiguousarray(y)
        logd = np.ascontiguousarray(logd)
    if safe and not np.all(np.isfinite(y)):
        raise RecurrenceError("safe Bi-WKV recurrence produced non-finite output")
    ctx = WkvContext(k, v, w, u, y, logd, bounded, causal, squeeze)
    return (y[0] if squeeze else y), ctx


def biwkv_backward(ctx, gy, *, backend=None):
    """Gradients of ``sum(gy * wkv)`` with respect to w, u, K and V.

    Two O(T C) sweeps. The forward sweep rebuilds the past states and their
    w-derivatives; the reverse sweep does the same for the future states.
    Only O(C) recurrence state is live at any time.
    """
    gy = np.asarray(gy, dtype=ctx.k.dtype)
    if ctx.squeeze:
        gy = gy[None]
    if gy.shape != ctx.k.shape:
        raise ValueError(f"gy shape {gy.shape} does not match forward shape {ctx.k.shape}")
    if not np.all(np.isfinite(gy)):
        raise NonFiniteInputError("upstream gradient contains non-finite entries")
    gy = np.ascontiguousarray(gy)
    T = ctx.k.shape[1]
    lam = (ctx.w / T if ctx.bounded else ctx.w).astype(ctx.k.dtype)
    scale = 1.0 / T if ctx.bounded else 1.0
    dt = ctx.k.dtype
    if resolve_backend(backend) == "numba":
        gk = np.empty_like(ctx.k)
        gv = np.empty_like(ctx.k)
        gw = np.zeros(ctx.k.shape[2], dt)
        gu = np.zeros(ctx.k.shape[2], dt)
        _backward_nb(ctx.k, ctx.v, lam, ctx.u, ctx.y, ctx.logd, gy,
                     dt.type(-np.inf), dt.type(0), dt.type(scale), ctx.causal,
                     gk, gv, gw, gu)
    else:
        gw, gu, gk, gv = _backward_np(ctx.k, ctx.v, lam, ctx.u, ctx.y, ctx.logd,
                                      gy, dt.type(scale), ctx.causal)
        gk = np.ascontiguousarray(gk)
        gv = np.ascontiguousarray(gv)
    if ctx.squeeze:
        gk, gv = gk[0], gv[0]
    return WkvGradients(gw=gw, gu=gu, gk=gk, gv=gv)


def biwkv(k, v, w, u, **kwargs):
    """Forward only."""
    return biwkv_forward(k, v, w, u, **kwargs)[0]


def flops_estimate(T, C):
    """Analytic forward cost of Bi-WKV: ``13 * T * C``."""
    T = int(T)
    C = int(C)
    if T < 1 or C < 1:
        raise ValueError(f"T and C must be positive, got T={T}, C={C}")
    flops = FLOPS_PER_TOKEN_CHANNEL * T * C
    if flops > _INT64_MAX:
        raise OverflowError(f"FLOPs count 13*{T}*{C} does not fit in 64 bits")
    return flops
