"""VRWKV encoder in numpy with hand-derived backward passes.

Parameters live in a flat ``dict`` of arrays keyed by dotted names, in
declaration order (see :func:`param_shapes`). Activations are token grids of
shape ``(B, Hp, Wp, C)``; the Bi-WKV kernel sees them flattened in raster
order as ``(B, Hp*Wp, C)``.

One encoder layer::

    X1 = X  + gamma_s * spatial_mix(LN1(X))
    X2 = X1 + gamma_c * channel_mix(LN2(X1))

    spatial_mix(h) = [LN]( (sigmoid(shift_r(h) Wr) * BiWKV(shift_k(h) Wk, shift_v(h) Wv)) Wo )
    channel_mix(h) = sigmoid(shift_r(h) Wr) * ([LN](sqrelu(shift_k(h) Wk)) Wv)

The bracketed norms exist only when ``extra_norm`` is set.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from vrwkv import layers as L
from vrwkv.kernel import biwkv_backward, biwkv_forward
from vrwkv.shift import MODES, token_shift, token_shift_backward


@dataclass
class ModelConfig:
    embed_dim: int = 192
    hidden_dim: int = 768
    depth: int = 12
    patch_size: int = 16
    num_classes: int = 1000
    image_size: int = 224
    image_channels: int = 3
    extra_norm: bool = False
    layer_scale_init: float = 1.0
    shift_mode: str = "quad"
    shift_literal: bool = False
    attention: str = "bi"
    channel_out_proj: bool = False

    def __post_init__(self):
        if self.embed_dim % 4:
            raise ValueError(f"embed_dim must be divisible by 4, got {self.embed_dim}")
        if self.hidden_dim < self.embed_dim:
            raise ValueError("hidden_dim must be >= embed_dim")
        if self.depth < 0 or self.patch_size < 1 or self.num_classes < 0:
            raise ValueError("depth >= 0, patch_size >= 1 and num_classes >= 0 required")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.layer_scale_init < 0:
            raise ValueError("layer_scale_init must be >= 0")
        if self.shift_mode not in MODES:
            raise ValueError(f"shift_mode must be one of {MODES}")
        if self.attention not in ("bi", "causal"):
            raise ValueError("attention must be 'bi' or 'causal'")

    @property
    def base_grid(self):
        return self.image_size // self.patch_size

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PRESETS = {
    "vrwkv-t": dict(embed_dim=192, hidden_dim=768, depth=12),
    "vrwkv-s": dict(embed_dim=384, hidden_dim=1536, depth=12),
    "vrwkv-b": dict(embed_dim=768, hidden_dim=3072, depth=12),
    "vrwkv-l": dict(embed_dim=1024, hidden_dim=4096, depth=24, extra_norm=True, image_size=384),
}


def preset(name, **overrides):
    return ModelConfig(**{**PRESETS[name.lower()], **overrides})


def _is_decayed(name):
    """Projection matrices get weight decay; norms, biases, gamma, w, u, mu, pos do not."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("W_") or name in ("patch_embed.weight", "head.weight")


def param_shapes(cfg):
    """Ordered ``name -> shape`` for every learnable tensor."""
    C, H, p = cfg.embed_dim, cfg.hidden_dim, cfg.patch_size
    g = cfg.base_grid
    shapes = {
        "patch_embed.weight": (p * p * cfg.image_channels, C),
        "patch_embed.bias": (C,),
        "pos_embed": (g, g, C),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes[b + "ln1.weight"] = (C,)
        shapes[b + "ln1.bias"] = (C,)
        for m in ("mu_r", "mu_k", "mu_v"):
            shapes[b + "att." + m] = (C,)
        for m in ("W_r", "W_k", "W_v", "W_o"):
            shapes[b + "att." + m] = (C, C)
        shapes[b + "att.decay"] = (C,)
        shapes[b + "att.bonus"] = (C,)
        if cfg.extra_norm:
            shapes[b + "att.ln_out.weight"] = (C,)
            shapes[b + "att.ln_out.bias"] = (C,)
        shapes[b + "att.gamma"] = (C,)
        shapes[b + "ln2.weight"] = (C,)
        shapes[b + "ln2.bias"] = (C,)
        shapes[b + "ffn.mu_r"] = (C,)
        shapes[b + "ffn.mu_k"] = (C,)
        shapes[b + "ffn.W_r"] = (C, C)
        shapes[b + "ffn.W_k"] = (C, H)
        shapes[b + "ffn.W_v"] = (H, C)
        if cfg.channel_out_proj:
            shapes[b + "ffn.W_o"] = (C, C)
        if cfg.extra_norm:
            shapes[b + "ffn.ln_hidden.weight"] = (H,)
            shapes[b + "ffn.ln_hidden.bias"] = (H,)
        shapes[b + "ffn.gamma"] = (C,)
    shapes["ln_final.weight"] = (C,)
    shapes["ln_final.bias"] = (C,)
    shapes["head.weight"] = (C, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def count_params(cfg):
    return int(sum(np.prod(s, dtype=np.int64) for s in param_shapes(cfg).values()))


def param_breakdown(cfg):
    """Scalar counts grouped by component (embed / blocks / head)."""
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("blocks."):
            key = "blocks." + name.split(".")[2]
        elif name.startswith(("patch_embed", "pos_embed")):
            key = "embed"
        else:
            key = name.split(".")[0]
        out[key] = out.get(key, 0) + int(np.prod(shape, dtype=np.int64))
    return out


def _trunc_normal(rng, shape, std, bound=3.0):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return x * std


def init_params(cfg, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("W_") or name in ("patch_embed.weight", "head.weight", "pos_embed"):
            val = _trunc_normal(rng, shape, 0.02)
        elif leaf == "decay":
            val = np.linspace(-1.0, 1.0, shape[0]) if shape[0] > 1 else np.zeros(shape)
        elif leaf.startswith("mu_"):
            val = np.full(shape, 0.5)
        elif leaf == "gamma":
            val = np.full(shape, cfg.layer_scale_init)
        elif leaf == "weight":  # layer norms
            val = np.ones(shape)
        else:  # biases, bonus
            val = np.zeros(shape)
        params[name] = np.asarray(val, dtype=dtype)
    return params


# --------------------------------------------------------------------------
# forward


def _check_image(image, cfg):
    if image.ndim != 4 or image.shape[3] != cfg.image_channels:
        raise ValueError(f"expected (B, H, W, {cfg.image_channels}) image, got {image.shape}")
    B, H, W, _ = image.shape
    p = cfg.patch_size
    if H % p or W % p:
        raise ValueError(f"image size {H}x{W} not divisible by patch size {p}")
    return B, H // p, W // p


def patchify(image, p):
    B, H, W, ic = image.shape
    x = image.reshape(B, H // p, p, W // p, p, ic).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H // p, W // p, p * p * ic)


def unpatchify(patches, p, ic):
    B, Hp, Wp, _ = patches.shape
    x = patches.reshape(B, Hp, Wp, p, p, ic).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, Hp * p, Wp * p, ic)


def resized_pos_embed(pos, Hp, Wp):
    g0, g1 = pos.shape[:2]
    if (Hp, Wp) == (g0, g1):
        return pos, None
    Mh = L.resize_matrix(Hp, g0, pos.dtype)
    Mw = L.resize_matrix(Wp, g1, pos.dtype)
    return np.einsum("hi,wj,ijc->hwc", Mh, Mw, pos), (Mh, Mw)


def patch_embed(image, params, cfg):
    B, Hp, Wp = _check_image(image, cfg)
    patches = patchify(image, cfg.patch_size)
    pos, mats = resized_pos_embed(params["pos_embed"], Hp, Wp)
    x = patches @ params["patch_embed.weight"] + params["patch_embed.bias"] + pos
    return x, (patches, mats)


def _shift(x, params, key, cfg):
    return token_shift(x, params[key], cfg.shift_mode, cfg.shift_literal)


def spatial_mix(h, params, pre, cfg, backend=None):
    B, Hp, Wp, C = h.shape
    xr = _shift(h, params, pre + "mu_r", cfg)
    xk = _shift(h, params, pre + "mu_k", cfg)
    xv = _shift(h, params, pre + "mu_v", cfg)
    r = xr @ params[pre + "W_r"]
    k = xk @ params[pre + "W_k"]
    v = xv @ params[pre + "W_v"]
    wkv, ctx = biwkv_forward(k.reshape(B, -1, C), v.reshape(B, -1, C),
                             params[pre + "decay"], params[pre + "bonus"],
                             causal=cfg.attention == "causal", backend=backend,
                             dtype=h.dtype)
    wkv = wkv.reshape(h.shape)
    sr = L.sigmoid(r)
    z = sr * wkv
    o = z @ params[pre + "W_o"]
    ln = None
    if cfg.extra_norm:
        o, ln = L.layer_norm(o, params[pre + "ln_out.weight"], params[pre + "ln_out.bias"])
    return o, (h, xr, xk, xv, ctx, wkv, sr, z, ln)


def channel_mix(h, params, pre, cfg):
    xr = _shift(h, params, pre + "mu_r", cfg)
    xk = _shift(h, params, pre + "mu_k", cfg)
    r = xr @ params[pre + "W_r"]
    kc = xk @ params[pre + "W_k"]
    a = L.squared_relu(kc)
    ln = None
    if cfg.extra_norm:
        a, ln = L.layer_norm(a, params[pre + "ln_hidden.weight"], params[pre + "ln_hidden.bias"])
    vc = a @ params[pre + "W_v"]
    sr = L.sigmoid(r)
    out = sr * vc
    z = None
    if cfg.channel_out_proj:
        z = out
        out = z @ params[pre + "W_o"]
    return out, (h, xr, xk, kc, a, ln, vc, sr, z)


def encoder_layer(x, params, i, cfg, backend=None):
    b = f"blocks.{i}."
    h1, ln1 = L.layer_norm(x, params[b + "ln1.weight"], params[b + "ln1.bias"])
    s, sc = spatial_mix(h1, params, b + "att.", cfg, backend)
    x1 = x + params[b + "att.gamma"] * s
    h2, ln2 = L.layer_norm(x1, params[b + "ln2.weight"], params[b + "ln2.bias"])
    c, cc = channel_mix(h2, params, b + "ffn.", cfg)
    x2 = x1 + params[b + "ffn.gamma"] * c
    return x2, (ln1, s, sc, ln2, c, cc)


def forward_features(image, params, cfg, backend=None):
    """Patch embedding followed by all encoder layers. Returns ``(tokens, cache)``."""
    dtype = params["pos_embed"].dtype
    image = np.asarray(image, dtype=dtype)
    x, emb = patch_embed(image, params, cfg)
    layer_caches = []
    for i in range(cfg.depth):
        x, c = encoder_layer(x, params, i, cfg, backend)
        layer_caches.append(c)
    return x, {"embed": emb, "layers": layer_caches, "image_shape": image.shape}


def model_forward(image, params, cfg, save=False, backend=None):
    """Logits of shape ``(B, num_classes)``; with ``save`` also the cache for backward."""
    x, cache = forward_features(image, params, cfg, backend)
    xn, lnf = L.layer_norm(x, params["ln_final.weight"], params["ln_final.bias"])
    pooled = xn.mean(axis=(1, 2))
    logits = pooled @ params["head.weight"] + params["head.bias"]
    if not save:
        return logits, None
    cache.update(lnf=lnf, pooled=pooled, grid=x.shape)
    return logits, cache


# --------------------------------------------------------------------------
# backward


def _shift_back(g, x, params, key, cfg, grads):
    gx, gmu = token_shift_backward(g, x, params[key], cfg.shift_mode, cfg.shift_literal)
    grads[key] = grads.get(key, 0) + gmu
    return gx


def spatial_mix_backward(go, cache, params, pre, cfg, grads, backend=None):
    h, xr, xk, xv, ctx, wkv, sr, z, ln = cache
    B, Hp, Wp, C = h.shape
    if ln is not None:
        go, grads[pre + "ln_out.weight"], grads[pre + "ln_out.bias"] = L.layer_norm_backward(go, ln)
    gz, grads[pre + "W_o"] = L.matmul_backward(go, z, params[pre + "W_o"])
    gwkv = gz * sr
    gr = gz * wkv * sr * (1 - sr)
    kg = biwkv_backward(ctx, gwkv.reshape(B, -1, C), backend=backend)
    grads[pre + "decay"] = kg.gw
    grads[pre + "bonus"] = kg.gu
    gxr, grads[pre + "W_r"] = L.matmul_backward(gr, xr, params[pre + "W_r"])
    gxk, grads[pre + "W_k"] = L.matmul_backward(kg.gk.reshape(h.shape), xk, params[pre + "W_k"])
    gxv, grads[pre + "W_v"] = L.matmul_backward(kg.gv.reshape(h.shape), xv, params[pre + "W_v"])
    gh = _shift_back(gxr, h, params, pre + "mu_r", cfg, grads)
    gh += _shift_back(gxk, h, params, pre + "mu_k", cfg, grads)
    gh += _shift_back(gxv, h, params, pre + "mu_v", cfg, grads)
    return gh


def channel_mix_backward(go, cache, params, pre, cfg, grads):
    h, xr, xk, kc, a, ln, vc, sr, z = cache
    if z is not None:
        go, grads[pre + "W_o"] = L.matmul_backward(go, z, params[pre + "W_o"])
    gvc = go * sr
    gr = go * vc * sr * (1 - sr)
    ga, grads[pre + "W_v"] = L.matmul_backward(gvc, a, params[pre + "W_v"])
    if ln is not None:
        ga, grads[pre + "ln_hidden.weight"], grads[pre + "ln_hidden.bias"] = L.layer_norm_backward(ga, ln)
    gkc = ga * 2 * np.maximum(kc, 0)
    gxr, grads[pre + "W_r"] = L.matmul_backward(gr, xr, params[pre + "W_r"])
    gxk, grads[pre + "W_k"] = L.matmul_backward(gkc, xk, params[pre + "W_k"])
    gh = _shift_back(gxr, h, params, pre + "mu_r", cfg, grads)
    gh += _shift_back(gxk, h, params, pre + "mu_k", cfg, grads)
    return gh


def encoder_layer_backward(gx2, cache, params, i, cfg, grads, backend=None):
    b = f"blocks.{i}."
    ln1, s, sc, ln2, c, cc = cache
    axes = (0, 1, 2)
    grads[b + "ffn.gamma"] = (gx2 * c).sum(axis=axes)
    gh2 = channel_mix_backward(gx2 * params[b + "ffn.gamma"], cc, params, b + "ffn.", cfg, grads)
    gx1_ln, grads[b + "ln2.weight"], grads[b + "ln2.bias"] = L.layer_norm_backward(gh2, ln2)
    gx1 = gx2 + gx1_ln
    grads[b + "att.gamma"] = (gx1 * s).sum(axis=axes)
    gh1 = spatial_mix_backward(gx1 * params[b + "att.gamma"], sc, params, b + "att.", cfg, grads, backend)
    gx_ln, grads[b + "ln1.weight"], grads[b + "ln1.bias"] = L.layer_norm_backward(gh1, ln1)
    return gx1 + gx_ln


def features_backward(gx, cache, params, cfg, grads=None, backend=None):
    """Backpropagate a gradient on the last-layer tokens.

    Returns ``(grads, g_image)``; ``grads`` holds every parameter except the
    final norm and head.
    """
    if cache is None or "layers" not in cache:
        raise ValueError("no saved activations; run the forward pass with save=True")
    grads = {} if grads is None else grads
    for i in reversed(range(cfg.depth)):
        gx = encoder_layer_backward(gx, cache["layers"][i], params, i, cfg, grads, backend)
    patches, mats = cache["embed"]
    gpos = gx.sum(axis=0)
    if mats is not None:
        Mh, Mw = mats
        gpos = np.einsum("hi,wj,hwc->ijc", Mh, Mw, gpos)
    grads["pos_embed"] = gpos
    grads["patch_embed.bias"] = gx.sum(axis=(0, 1, 2))
    gpatch, grads["patch_embed.weight"] = L.matmul_backward(gx, patches, params["patch_embed.weight"])
    g_image = unpatchify(gpatch, cfg.patch_size, cfg.image_channels)
    return grads, g_image


def model_backward(cache, g_logits, params, cfg, backend=None):
    """Gradients of ``sum(g_logits * logits)`` for every parameter, in declaration order."""
    if cache is None or "lnf" not in cache:
        raise ValueError("no saved activations; run model_forward with save=True")
    grads = {}
    grads["head.bias"] = g_logits.sum(axis=0)
    gpool, grads["head.weight"] = L.matmul_backward(g_logits, cache["pooled"], params["head.weight"])
    B, Hp, Wp, C = cache["grid"]
    gxn = np.broadcast_to(gpool[:, None, None, :] / (Hp * Wp), (B, Hp, Wp, C))
    gx, grads["ln_final.weight"], grads["ln_final.bias"] = L.layer_norm_backward(gxn, cache["lnf"])
    features_backward(gx, cache, params, cfg, grads, backend)
    return {name: np.asarray(grads[name], dtype=params[name].dtype) for name in params}
