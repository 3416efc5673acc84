"""Runtime scaling of Bi-WKV against dense softmax attention, and ERF maps."""

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from vrwkv.kernel import biwkv_forward
from vrwkv.model import features_backward, forward_features

log = logging.getLogger(__name__)

CSV_HEADER = ["mechanism", "T", "C", "reps", "median_seconds", "activation_bytes"]
MECHANISMS = ("biwkv", "biwkv-numpy", "quadratic")


@dataclass
class BenchRecord:
    mechanism: str
    T: int
    C: int
    reps: int
    median_seconds: float
    activation_bytes: int
    flagged: bool = False  # timing too close to the clock resolution to trust


def quadratic_attention(q, k, v):
    """Dense ``softmax(Q K^T / sqrt(C)) V``. O(T^2 C) time, O(T^2) memory."""
    q, k, v = (np.asarray(a) for a in (q, k, v))
    if not (q.shape == k.shape == v.shape) or q.ndim != 2:
        raise ValueError(f"Q, K, V must share a (T, C) shape, got {q.shape}, {k.shape}, {v.shape}")
    for name, a in (("Q", q), ("K", k), ("V", v)):
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name} contains non-finite entries")
    scores = q @ k.T
    scores *= 1.0 / np.sqrt(q.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=1, keepdims=True)
    return scores @ v


def activation_bytes(mechanism, T, C, itemsize=4):
    """Bytes of the working buffers each implementation declares.

    Bi-WKV: output and log-denominator (2*T*C), three length-C recurrence
    state vectors, and the w/u vectors (2*C).
    Quadratic: the T*T score matrix plus the T*C output.
    """
    if mechanism.startswith("biwkv"):
        return itemsize * (2 * T * C + 5 * C)
    if mechanism == "quadratic":
        return itemsize * (T * T + T * C)
    raise ValueError(f"unknown mechanism {mechanism!r}")


def _runner(mechanism, T, C, dtype, rng):
    k = rng.standard_normal((T, C)).astype(dtype)
    v = rng.standard_normal((T, C)).astype(dtype)
    if mechanism == "quadratic":
        q = rng.standard_normal((T, C)).astype(dtype)
        return lambda: quadratic_attention(q, k, v)
    w = rng.uniform(-1, 1, C).astype(dtype)
    u = rng.uniform(-1, 1, C).astype(dtype)
    backend = "numpy" if mechanism == "biwkv-numpy" else "numba"
    return lambda: biwkv_forward(k, v, w, u, backend=backend)


def bench_scaling(mechanism, Ts, C, reps=5, warmup=1, dtype=np.float32, seed=0):
    """Median wall time of ``reps`` warm runs per T. ``Ts`` must be ascending.

    Sizes are timed round-robin (one run of every T per round) so slow drift
    in machine load hits all sizes alike instead of skewing the ratios.
    """
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mechanism!r}; choose from {MECHANISMS}")
    Ts = [int(t) for t in Ts]
    if Ts != sorted(Ts):
        raise ValueError("T list must be sorted ascending")
    if reps < 5:
        raise ValueError("need at least 5 timed repetitions")
    floor = max(1000 * time.get_clock_info("perf_counter").resolution, 1e-5)
    rng = np.random.default_rng(seed)
    itemsize = np.dtype(dtype).itemsize
    fns = [_runner(mechanism, T, C, dtype, rng) for T in Ts]
    for fn in fns:
        for _ in range(warmup):
            fn()
    times = [[] for _ in Ts]
    for _ in range(reps):
        for fn, ts in zip(fns, times):
            t0 = time.perf_counter()
            fn()
            ts.append(time.perf_counter() - t0)
    records = []
    for T, ts in zip(Ts, times):
        med = float(np.median(ts))
        rec = BenchRecord(mechanism, T, C, reps, med, activation_bytes(mechanism, T, C, itemsize))
        if med < floor:
            rec.flagged = True
            log.warning("%s T=%d: median %.3g s is below the reliable timing floor %.3g s",
                        mechanism, T, med, floor)
        records.append(rec)
    return records


def doubling_ratios(records, min_T=0):
    """Time ratios between consecutive records where T doubles and T >= min_T."""
    out = []
    for a, b in zip(records, records[1:]):
        if b.T == 2 * a.T and a.T >= min_T:
            out.append((a.T, b.median_seconds / a.median_seconds))
    return out


def write_bench_csv(records, path):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(CSV_HEADER)
        for r in records:
            wr.writerow([r.mechanism, r.T, r.C, r.reps, repr(r.median_seconds), r.activation_bytes])


def read_bench_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [BenchRecord(r["mechanism"], int(r["T"]), int(r["C"]), int(r["reps"]),
                        float(r["median_seconds"]), int(r["activation_bytes"])) for r in rows]


# --------------------------------------------------------------------------
# effective receptive field


def erf_map(params, cfg, image_size, seed=0, batch=1, backend=None):
    """Input-gradient magnitude of the centre output token, per grid cell.

    A unit gradient is placed on every channel of the centre token of the
    last encoder layer; the image gradient is reduced with an L1 norm over
    each patch's pixels and channels, then scaled to max 1.
    """
    H, W = (image_size, image_size) if np.isscalar(image_size) else image_size
    rng = np.random.default_rng(seed)
    dtype = params["pos_embed"].dtype
    image = rng.uniform(0, 1, (batch, H, W, cfg.image_channels)).astype(dtype)
    x, cache = forward_features(image, params, cfg, backend)
    B, Hp, Wp, C = x.shape
    g = np.zeros_like(x)
    g[:, Hp // 2, Wp // 2, :] = 1.0
    _, g_image = features_backward(g, cache, params, cfg, backend=backend)
    p = cfg.patch_size
    m = np.abs(g_image).reshape(B, Hp, p, Wp, p, -1).sum(axis=(0, 2, 4, 5))
    top = m.max()
    return m / top if top > 0 else m


def write_erf_csv(erf, path):
    np.savetxt(path, erf, delimiter=",", fmt="%.9g")


def erf_svg(erf, cell=12):
    """Grayscale heatmap: black is 0, white is the maximum."""
    Hp, Wp = erf.shape
    top = erf.max() if erf.max() > 0 else 1.0
    rects = []
    for i in range(Hp):
        for j in range(Wp):
            g = int(round(255 * float(erf[i, j]) / top))
            rects.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({g},{g},{g})"/>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{Wp * cell}" height="{Hp * cell}" '
            f'viewBox="0 0 {Wp * cell} {Hp * cell}">\n' + "\n".join(rects) + "\n</svg>\n")


def write_erf_svg(erf, path, cell=12):
    with open(path, "w") as f:
        f.write(erf_svg(erf, cell))
