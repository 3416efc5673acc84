"""Finite-difference checks for the hand-written backward passes.

Relative error is ``|a - n| / max(|a|, |n|, 1e-8)`` per element; each check
reports the worst value per parameter class.
"""

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from vrwkv.kernel import biwkv_backward, biwkv_forward, biwkv_oracle
from vrwkv.model import ModelConfig, init_params, model_backward, model_forward
from vrwkv.shift import token_shift, token_shift_backward

REL_FLOOR = 1e-8

log = logging.getLogger(__name__)


@dataclass
class GradcheckResult:
    worst: dict = field(default_factory=dict)
    max_analytic: float = 0.0
    max_numeric: float = 0.0

    def add(self, name, analytic, numeric):
        a = np.asarray(analytic, dtype=np.float64).ravel()
        n = np.asarray(numeric, dtype=np.float64).ravel()
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
        err = float(rel.max()) if rel.size else 0.0
        self.worst[name] = max(self.worst.get(name, 0.0), err)
        if a.size:
            self.max_analytic = max(self.max_analytic, float(np.abs(a).max()))
            self.max_numeric = max(self.max_numeric, float(np.abs(n).max()))


def relative_error(analytic, numeric):
    r = GradcheckResult()
    r.add("x", analytic, numeric)
    return r.worst["x"]


def numeric_grad(f, x, eps=1e-5, order=2):
    """Central differences of scalar ``f`` with respect to ``x`` (perturbed in place).

    ``order=2`` is the three-point stencil, ``order=4`` the five-point one.
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        if order == 2:
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            gflat[i] = (fp - fm) / (2 * eps)
        else:
            vals = []
            for h in (2, 1, -1, -2):
                flat[i] = old + h * eps
                vals.append(f())
            # differences first: equal samples must give exactly 0
            gflat[i] = (8 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12 * eps)
        flat[i] = old
    return g


def check_kernel(T=16, C=8, seeds=range(10), zero_gy=False, eps=1e-5,
                 modes=((True, False), (True, True))):
    """Recurrent backward vs central differences of the direct-sum oracle.

    ``modes`` lists ``(bounded, causal)`` pairs; the default covers the
    bidirectional and causal kernels with distance scaling.
    """
    res = GradcheckResult()
    for seed in seeds:
        rng = np.random.default_rng(seed)
        k, v = rng.uniform(-1, 1, (2, T, C))
        w, u = rng.uniform(-1, 1, (2, C))
        gy = np.zeros((T, C)) if zero_gy else rng.standard_normal((T, C))
        for bounded, causal in modes:
            tag = ("causal" if causal else "bi") + ("" if bounded else "-unbounded")
            _, ctx = biwkv_forward(k, v, w, u, bounded=bounded, causal=causal)
            g = biwkv_backward(ctx, gy)

            def f():
                y = biwkv_oracle(k, v, w, u, bounded=bounded, causal=causal)
                return math.fsum((gy * y).ravel())

            for name, x, a in (("w", w, g.gw), ("u", u, g.gu), ("k", k, g.gk), ("v", v, g.gv)):
                res.add(f"{tag}.{name}", a, numeric_grad(f, x, eps))
    return res


def check_shift(seeds=range(3), zero_gy=False, grid=(4, 4), C=8, eps_x=1.0, eps_mu=1e-2,
                modes=("quad", "causal", "bidirectional"), literal=(False, True)):
    """Token-shift adjoint vs central differences, input and mu.

    The shift is linear in ``x`` and, separately, in ``mu``, so central
    differences carry no truncation error and large steps only cut roundoff.
    ``eps_mu`` keeps ``mu +- eps`` inside the clamp range.
    """
    res = GradcheckResult()
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, *grid, C))
        mu = rng.uniform(0.05, 0.95, C)
        gout = np.zeros_like(x) if zero_gy else rng.standard_normal(x.shape)
        for mode in modes:
            for lit in literal:
                tag = mode + (".literal" if lit else "")
                gx, gmu = token_shift_backward(gout, x, mu, mode, lit)

                def f():
                    return math.fsum((gout * token_shift(x, mu, mode, lit)).ravel())

                res.add(f"{tag}.x", gx, numeric_grad(f, x, eps_x))
                res.add(f"{tag}.mu", gmu, numeric_grad(f, mu, eps_mu))
    return res


TINY = dict(embed_dim=8, hidden_dim=32, depth=1, patch_size=2, num_classes=4, image_size=6)


def _perturb(params, rng):
    # move off the init point so gates, layer scales and norms are all non-trivial
    out = {}
    for name, p in params.items():
        if name.endswith(("mu_r", "mu_k", "mu_v")):
            out[name] = rng.uniform(0.1, 0.9, p.shape)
        else:
            out[name] = p + 0.3 * rng.standard_normal(p.shape)
    return out


def param_class(name):
    return re.sub(r"^blocks\.\d+\.", "", name)


def _kink_distance(cache):
    # smallest |input| of any SquaredReLU
    return min((float(np.abs(layer[5][3]).min()) for layer in cache["layers"]), default=np.inf)


def _smooth_point(cfg, seed, batch, margin, tries=200):
    """Draw params and images until every SquaredReLU input is at least ``margin`` from 0.

    SquaredReLU is not twice differentiable at 0; a stencil straddling it
    reports errors that say nothing about the backward pass.
    """
    rng = np.random.default_rng(seed)
    base = init_params(cfg, seed)
    for _ in range(tries):
        params = _perturb(base, rng)
        image = rng.uniform(0, 1, (batch, cfg.image_size, cfg.image_size, cfg.image_channels))
        logits, cache = model_forward(image, params, cfg, save=True)
        if _kink_distance(cache) > margin:
            return rng, params, image, logits, cache
    raise RuntimeError(f"no kink-free sample in {tries} draws for seed {seed}")


# The difference quotient loses ~eps(f) / step to roundoff. In float64 that
# swamps gradient entries below ~1e-6 under the 1e-8 relative floor, so the
# model reference is evaluated in extended precision where the platform has it.
REFERENCE_DTYPE = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps \
    else np.float64


def check_model(seeds=range(2), zero_gy=False, cfg=None, eps=1e-4, batch=2, margin=2e-3,
                ref_dtype=None):
    """Every parameter of a small model vs a five-point difference stencil.

    The analytic gradients are float64; the stencil evaluates the forward
    pass in ``ref_dtype`` (extended precision by default) on the numpy backend.
    """
    cfg = cfg or ModelConfig(**TINY, extra_norm=True)
    ref = REFERENCE_DTYPE if ref_dtype is None else ref_dtype
    if ref is np.float64 and ref_dtype is None:
        log.warning("no extended precision available; model gradcheck reference is float64")
    res = GradcheckResult()
    for seed in seeds:
        rng, params, image, logits, cache = _smooth_point(cfg, seed, batch, margin)
        gl = np.zeros_like(logits) if zero_gy else rng.standard_normal(logits.shape)
        grads = model_backward(cache, gl, params, cfg)
        P = {k: v.astype(ref) for k, v in params.items()}
        img, glr = image.astype(ref), gl.astype(ref)

        def f():
            return (glr * model_forward(img, P, cfg, backend="numpy")[0]).sum()

        for name, p in P.items():
            res.add(param_class(name), grads[name], numeric_grad(f, p, eps, order=4))
    return res
