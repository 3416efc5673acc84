import json
import math

import numpy as np
import pytest

from vrwkv import checkpoint, model
from vrwkv.kernel import RecurrenceError
from vrwkv.model import ModelConfig, init_params
from vrwkv.train import (
    NonFiniteGradientError,
    OptimState,
    SyntheticTask,
    TrainBudget,
    TrainingDivergence,
    cosine_lr,
    evaluate,
    make_dataset,
    nearest_centroid_accuracy,
    optimizer_step,
    train,
)

SMALL = ModelConfig(embed_dim=8, hidden_dim=16, depth=1, patch_size=4, num_classes=4, image_size=16)
SMALL_TASK = SyntheticTask(seed=3, num_classes=4, image_size=16)


# --------------------------------------------------------------------------
# dataset


def test_dataset_deterministic():
    a = make_dataset(SyntheticTask(seed=5), 40)
    b = make_dataset(SyntheticTask(seed=5), 40)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    c = make_dataset(SyntheticTask(seed=6), 40)
    assert c[0].tobytes() != a[0].tobytes()


@pytest.mark.parametrize("n", [10, 37, 1000])
def test_dataset_balanced_and_in_range(n):
    x, y = make_dataset(SyntheticTask(seed=1), n)
    assert x.shape == (n, 32, 32, 3)
    assert x.min() >= 0.0 and x.max() <= 1.0
    counts = np.bincount(y, minlength=10)
    assert len(counts) == 10 and counts.max() - counts.min() <= 1


def test_dataset_one_per_class():
    _, y = make_dataset(SyntheticTask(seed=2, num_classes=7), 7)
    assert sorted(y) == list(range(7))


def test_dataset_errors():
    with pytest.raises(ValueError):
        make_dataset(SyntheticTask(), 9)
    with pytest.raises(ValueError):
        make_dataset(SyntheticTask(num_classes=0), 10)
    with pytest.raises(ValueError):
        make_dataset(SyntheticTask(image_size=2), 10)


def test_dataset_is_separable():
    x, y = make_dataset(SyntheticTask(seed=0), 1000)
    tx, ty = make_dataset(SyntheticTask(seed=1), 1000)
    acc = nearest_centroid_accuracy(x, y, tx, ty, 10)
    assert acc > 0.1 + 0.05, acc


# --------------------------------------------------------------------------
# schedule


def test_cosine_warmup_end_is_base():
    assert cosine_lr(10, 100, 3e-4, 10) == 3e-4


def test_cosine_end_is_zero():
    assert abs(cosine_lr(100, 100, 3e-4, 10)) < 1e-12


def test_cosine_midpoint_is_half():
    assert cosine_lr(55, 100, 2e-3, 10) == pytest.approx(1e-3, abs=1e-15)


def test_warmup_is_linear_and_increasing():
    lrs = [cosine_lr(s, 100, 1.0, 4) for s in range(5)]
    assert lrs == pytest.approx([0.2, 0.4, 0.6, 0.8, 1.0])


def test_no_warmup_starts_at_base():
    assert cosine_lr(0, 50, 0.1) == 0.1


# --------------------------------------------------------------------------
# optimizer


def _state(params, **kw):
    kw = {"schedule": "constant", "weight_decay": 0.0, **kw}
    return OptimState.create(params, **kw)


def test_adamw_first_step_golden():
    # hand computation: m_hat = g, v_hat = g^2, step = lr * 0.5 / (0.5 + 1e-8)
    params = {"W_x": np.array([1.0])}
    new, st = optimizer_step(params, {"W_x": np.array([0.5])}, _state(params, base_lr=1e-3))
    assert new["W_x"][0] == pytest.approx(0.99900000002, abs=1e-15)
    assert st.step == 1


def test_zero_grads_no_decay_unchanged():
    params = init_params(SMALL, 0)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    new, st = optimizer_step(params, grads, _state(params, base_lr=1e-2))
    for k in params:
        np.testing.assert_array_equal(new[k], params[k])
    assert st.step == 1


def test_decay_only_shrinks_matrices():
    params = init_params(SMALL, 0)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    lr, wd = 1e-2, 0.05
    new, _ = optimizer_step(params, grads, _state(params, base_lr=lr, weight_decay=wd))
    for k in params:
        if model._is_decayed(k):
            np.testing.assert_allclose(new[k], params[k] * (1 - lr * wd), rtol=1e-15)
        else:
            np.testing.assert_array_equal(new[k], params[k])


def test_decay_exemptions():
    exempt = [k for k in init_params(SMALL, 0) if not model._is_decayed(k)]
    leaves = {k.rsplit(".", 1)[-1] for k in exempt}
    assert {"decay", "bonus", "mu_r", "gamma", "bias", "weight"} <= leaves
    assert "pos_embed" in exempt
    assert all(not k.rsplit(".", 1)[-1].startswith("W_") for k in exempt)


def test_moment_shapes_mirror_params():
    params = init_params(SMALL, 0)
    st = OptimState.create(params)
    assert all(st.m[k].shape == p.shape == st.v[k].shape for k, p in params.items())


def test_non_finite_gradient_rejected():
    params = {"W_x": np.ones(3)}
    st = _state(params)
    with pytest.raises(NonFiniteGradientError, match="W_x"):
        optimizer_step(params, {"W_x": np.array([0.0, np.nan, 0.0])}, st)
    assert st.step == 0


# --------------------------------------------------------------------------
# training loop


def _budget(**kw):
    return TrainBudget(**{**dict(steps=30, batch_size=8, n_train=32, lr=5e-3, warmup_steps=5), **kw})


def test_lr_zero_keeps_params_and_loss(tmp_path):
    init = init_params(SMALL, 4)
    budget = _budget(lr=0.0, batch_size=32, steps=6)
    res = train(SMALL, SMALL_TASK, budget, seed=4, log_path=tmp_path / "log.jsonl")
    for k in init:
        np.testing.assert_array_equal(res.params[k], init[k])
    losses = [json.loads(line)["loss"] for line in open(tmp_path / "log.jsonl")]
    # full-batch steps see the same samples in a different order
    assert max(losses) - min(losses) < 1e-12


def test_log_records(tmp_path):
    res = train(SMALL, SMALL_TASK, _budget(steps=10, log_every=3), log_path=tmp_path / "l.jsonl")
    lines = [json.loads(line) for line in open(tmp_path / "l.jsonl")]
    assert [r["step"] for r in lines] == [0, 3, 6, 9, 10]
    assert all({"step", "lr", "loss", "accuracy"} <= set(r) for r in lines)
    assert lines[-1]["split"] == "train_eval"
    assert res.log == lines
    assert all(math.isfinite(r["loss"]) for r in lines)


def test_deterministic_checkpoint_bytes(tmp_path):
    for name in ("a", "b"):
        train(SMALL, SMALL_TASK, _budget(steps=8), seed=2, dtype=np.float32,
              checkpoint_path=tmp_path / f"{name}.vrwk")
    assert (tmp_path / "a.vrwk").read_bytes() == (tmp_path / "b.vrwk").read_bytes()


def test_checkpoint_reloads_to_same_accuracy(tmp_path):
    res = train(SMALL, SMALL_TASK, _budget(steps=10), seed=1, dtype=np.float32,
                checkpoint_path=tmp_path / "c.vrwk")
    meta, params = checkpoint.load(tmp_path / "c.vrwk")
    cfg = ModelConfig.from_dict(meta["model"])
    assert cfg == SMALL and meta["seed"] == 1
    x, y = make_dataset(SyntheticTask(**meta["task"]), meta["budget"]["n_train"])
    loss, acc = evaluate(params, cfg, x.astype(np.float32), y)
    assert acc == res.final_accuracy
    assert loss == pytest.approx(res.final_loss, rel=1e-6)


def test_loss_decreases():
    res = train(SMALL, SMALL_TASK, _budget(steps=200, n_train=128, batch_size=16, lr=1e-2),
                seed=0, dtype=np.float32)
    losses = [r["loss"] for r in res.log if "split" not in r]
    k = len(losses) // 10
    assert np.median(losses[-k:]) < np.median(losses[:k])


def test_optimizer_blowup_detected():
    with pytest.raises(TrainingDivergence) as e:
        train(SMALL, SMALL_TASK, _budget(lr=1e6, warmup_steps=0, steps=50))
    assert e.value.kind == "optimizer_blowup"


def test_kernel_overflow_detected(monkeypatch):
    def overflow(*a, **kw):
        raise RecurrenceError("overflow")

    monkeypatch.setattr(model, "biwkv_forward", overflow)
    with pytest.raises(TrainingDivergence) as e:
        train(SMALL, SMALL_TASK, _budget())
    assert e.value.kind == "kernel_overflow" and e.value.step == 0
