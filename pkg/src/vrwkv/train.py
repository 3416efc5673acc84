"""Toy-scale supervised training on a synthetic image task."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from vrwkv import checkpoint
from vrwkv.kernel import NonFiniteInputError, RecurrenceError
from vrwkv.layers import softmax_cross_entropy
from vrwkv.model import _is_decayed, init_params, model_backward, model_forward

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergence(RuntimeError):
    """Training aborted. ``kind`` is "kernel_overflow" or "optimizer_blowup"."""

    def __init__(self, kind, step, message):
        super().__init__(f"[{kind}] step {step}: {message}")
        self.kind = kind
        self.step = step


# --------------------------------------------------------------------------
# data


@dataclass
class SyntheticTask:
    """Oriented stripes (local cue) plus a bright blob (global cue).

    Class ``c`` fixes the stripe angle ``(c % n_orient) * pi / n_orient`` and
    whether the blob sits in the top or bottom half (``c // n_orient``),
    with ``n_orient = ceil(num_classes / 2)``. Phase, stripe period (4 to 7 px),
    tint, blob position and pixel noise are random per image.
    """
    seed: int = 0
    num_classes: int = 10
    image_size: int = 32
    noise: float = 0.1
    blob_radius: float = 3.0


def make_dataset(task, n):
    """Return ``(images (n, S, S, 3) in [0, 1], labels (n,))``, balanced within one."""
    if task.num_classes < 1 or task.image_size < 4:
        raise ValueError("need num_classes >= 1 and image_size >= 4")
    if n < task.num_classes:
        raise ValueError(f"n={n} must be at least num_classes={task.num_classes}")
    rng = np.random.default_rng(task.seed)
    S = task.image_size
    n_orient = (task.num_classes + 1) // 2
    labels = rng.permutation(np.arange(n) % task.num_classes)
    orient = labels % n_orient
    half = labels // n_orient
    yy, xx = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
    theta = orient * math.pi / n_orient
    freq = 1.0 / rng.uniform(4.0, 7.0, n)
    phase = rng.uniform(0, 2 * math.pi, n)
    proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
    stripes = 0.5 + 0.5 * np.sin(2 * math.pi * freq[:, None, None] * proj + phase[:, None, None])
    tint = rng.uniform(0.5, 1.0, (n, 1, 1, 3))
    by = rng.uniform(0.5, S / 2 - 0.5, n) + half * S / 2
    bx = rng.uniform(0.5, S - 0.5, n)
    d2 = (yy[None] - by[:, None, None]) ** 2 + (xx[None] - bx[:, None, None]) ** 2
    blob = np.exp(-d2 / (2 * task.blob_radius ** 2))
    img = 0.6 * stripes[..., None] * tint + 0.6 * blob[..., None]
    img = img + task.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0), labels.astype(np.int64)


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y, num_classes):
    """Pixel-space nearest-centroid baseline."""
    a = train_x.reshape(len(train_x), -1)
    b = test_x.reshape(len(test_x), -1)
    cents = np.stack([a[train_y == c].mean(0) for c in range(num_classes)])
    d = ((b[:, None, :] - cents[None]) ** 2).sum(-1)
    return float((d.argmin(1) == test_y).mean())


# --------------------------------------------------------------------------
# optimisation


def cosine_lr(step, total_steps, base_lr, warmup_steps=0):
    """Linear warmup to ``base_lr`` at ``warmup_steps``, cosine decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * (step + 1) / (warmup_steps + 1)
    span = total_steps - warmup_steps
    if span <= 0:
        return 0.0
    frac = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    base_lr: float = 5e-4
    weight_decay: float = 0.05
    total_steps: int = 1
    warmup_steps: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "cosine"

    @classmethod
    def create(cls, params, **kw):
        m = {k: np.zeros_like(p) for k, p in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(m=m, v=v, **kw)

    def lr(self):
        if self.schedule == "constant":
            return self.base_lr
        return cosine_lr(self.step, self.total_steps, self.base_lr, self.warmup_steps)


def optimizer_step(params, grads, state):
    """AdamW with decoupled weight decay (matrices only). Returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r} at step {state.step}")
    lr = state.lr()
    b1, b2 = state.betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        if _is_decayed(name) and state.weight_decay:
            p = p * (1.0 - lr * state.weight_decay)
        new[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return new, state


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainBudget:
    steps: int = 2000
    batch_size: int = 32
    n_train: int = 1000
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_steps: int = 100
    log_every: int = 1


@dataclass
class TrainResult:
    params: dict
    log: list = field(default_factory=list)
    final_loss: float = float("nan")
    final_accuracy: float = float("nan")


def evaluate(params, cfg, images, labels, batch_size=250):
    losses, correct = 0.0, 0
    for s in range(0, len(images), batch_size):
        logits, _ = model_forward(images[s:s + batch_size], params, cfg)
        loss, _ = softmax_cross_entropy(logits, labels[s:s + batch_size])
        losses += loss * len(logits)
        correct += int((logits.argmax(1) == labels[s:s + batch_size]).sum())
    return float(losses) / len(images), correct / len(images)


def _batches(n, batch_size, seed):
    epoch = 0
    while True:
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        for s in range(0, n - batch_size + 1, batch_size):
            yield epoch, perm[s:s + batch_size]
        epoch += 1


def train(cfg, task, budget, seed=0, dtype=np.float64, log_path=None, checkpoint_path=None,
          params=None):
    """Train ``cfg`` on ``task`` for ``budget.steps`` minibatch steps.

    Fully deterministic per ``(cfg, task, budget, seed)``. Writes a JSONL log
    and an atomic checkpoint when paths are given.
    """
    images, labels = make_dataset(task, budget.n_train)
    images = images.astype(dtype)
    if params is None:
        params = init_params(cfg, seed, dtype)
    state = OptimState.create(params, base_lr=budget.lr, weight_decay=budget.weight_decay,
                              total_steps=budget.steps, warmup_steps=budget.warmup_steps)
    bs = min(budget.batch_size, budget.n_train)
    result = TrainResult(params=params)
    logf = open(log_path, "w") if log_path else None
    try:
        batches = _batches(budget.n_train, bs, seed)
        for step in range(budget.steps):
            epoch, idx = next(batches)
            lr = state.lr()
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    logits, cache = model_forward(images[idx], params, cfg, save=True)
            except RecurrenceError as e:
                raise TrainingDivergence("kernel_overflow", step, str(e)) from e
            except NonFiniteInputError as e:
                # parameters already blew up upstream of the kernel
                raise TrainingDivergence("optimizer_blowup", step, str(e)) from e
            with np.errstate(over="ignore", invalid="ignore"):
                loss, glogits = softmax_cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                # the safe kernel raises on its own overflow, so anything reaching here
                # comes from parameters that have grown out of range
                raise TrainingDivergence("optimizer_blowup", step, f"loss is {loss}")
            grads = model_backward(cache, glogits, params, cfg)
            try:
                params, state = optimizer_step(params, grads, state)
            except NonFiniteGradientError as e:
                raise TrainingDivergence("optimizer_blowup", step, str(e)) from e
            bad = [k for k, p in params.items() if not np.all(np.isfinite(p))]
            if bad:
                raise TrainingDivergence("optimizer_blowup", step, f"non-finite parameter {bad[0]!r}")
            acc = float((logits.argmax(1) == labels[idx]).mean())
            if step % budget.log_every == 0 or step == budget.steps - 1:
                rec = {"step": step, "epoch": epoch, "lr": lr, "loss": float(loss), "accuracy": acc}
                result.log.append(rec)
                if logf:
                    logf.write(json.dumps(rec) + "\n")
        loss, acc = evaluate(params, cfg, images, labels)
        rec = {"step": budget.steps, "lr": state.lr(), "loss": loss, "accuracy": acc,
               "split": "train_eval"}
        result.log.append(rec)
        if logf:
            logf.write(json.dumps(rec) + "\n")
    finally:
        if logf:
            logf.close()
    result.params = params
    result.final_loss, result.final_accuracy = loss, acc
    if checkpoint_path:
        meta = {"model": cfg.to_dict(), "task": asdict(task), "budget": asdict(budget), "seed": seed}
        checkpoint.save(checkpoint_path, meta, params)
    log.info("trained %d steps: loss %.4f accuracy %.3f", budget.steps, loss, acc)
    return result
