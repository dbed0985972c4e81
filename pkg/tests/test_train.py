import numpy as np
import pytest

from pimlp.data import HyperConfig, patch_windows
from pimlp.errors import ConfigError, DataError, NonFiniteGradientError
from pimlp.model import TRUNK, init_params
from pimlp.numerics import Rng
from pimlp.objective import draw_masks, ssl_forward_backward
from pimlp.train import (
    OptimizerState,
    TrainConfig,
    adam_step,
    evaluate,
    finetune,
    lr_grid,
    lr_range_test,
    per_class_recall,
    pretrain,
    softmax_cross_entropy,
    stratified_split,
)

SMALL = HyperConfig(input_len=64, patch_len=16, stride=8, channels=2, hidden_dim=8)


def toy_task(n_per_class=12, seed=0):
    """Two trivially separable classes: slow vs fast sinusoids."""
    g = np.random.default_rng(seed)
    t = np.arange(SMALL.input_len)
    xs, ys = [], []
    for label, f in enumerate((0.02, 0.2)):
        for _ in range(n_per_class):
            ph = g.uniform(0, 2 * np.pi)
            x = np.stack([np.cos(2 * np.pi * f * t + ph), np.sin(2 * np.pi * f * t + ph)])
            xs.append(x + 0.1 * g.standard_normal(x.shape))
            ys.append(label)
    return np.asarray(xs, np.float32), np.asarray(ys)


def params_equal(a, b):
    ta, tb = a.tensors(), b.tensors()
    return ta.keys() == tb.keys() and all(ta[k].tobytes() == tb[k].tobytes() for k in ta)


# adam ---------------------------------------------------------------------

def _scalar_params(value):
    p = init_params(SMALL, rng=Rng(0), dtype=np.float64)
    g = p.copy()
    for k, v in g.tensors().items():
        v[...] = value
    return p, g


def test_adam_first_step_closed_form():
    p, g = _scalar_params(1.0)
    new, state = adam_step(p, g, OptimizerState.zeros_like(p), 1e-3)
    np.testing.assert_allclose(new.enc_W1 - p.enc_W1, -1e-3 / (1 + 1e-8), rtol=1e-9)
    assert state.t == 1


def test_adam_zero_grad_and_zero_lr():
    p, g = _scalar_params(0.0)
    new, state = adam_step(p, g, OptimizerState.zeros_like(p), 1e-3)
    assert params_equal(new, p) and state.t == 1
    p, g = _scalar_params(0.7)
    new, _ = adam_step(p, g, OptimizerState.zeros_like(p), 0.0)
    assert params_equal(new, p)


def test_adam_deterministic_and_pure():
    p, g = _scalar_params(0.3)
    s = OptimizerState.zeros_like(p)
    before = p.copy()
    a = adam_step(p, g, s, 1e-2)
    b = adam_step(p, g, s, 1e-2)
    assert params_equal(a[0], b[0]) and params_equal(p, before)
    assert s.t == 0 and not s.m["enc_W1"].any()


def test_adam_rejects_nonfinite():
    p, g = _scalar_params(0.1)
    g.enc_W2[0, 0] = np.nan
    with pytest.raises(NonFiniteGradientError, match="enc_W2"):
        adam_step(p, g, OptimizerState.zeros_like(p), 1e-3)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(strategy="XX")
    with pytest.raises(ConfigError):
        TrainConfig(lp_epochs=-1)
    X, y = toy_task(2)
    with pytest.raises(ConfigError):
        finetune(init_params(SMALL, rng=Rng(0)), (X, y), SMALL, TrainConfig(epochs=5, lp_epochs=6))


# pre-training -------------------------------------------------------------

def test_one_epoch_one_batch_is_one_adam_step():
    X, _ = toy_task(2)
    tcfg = TrainConfig(epochs=1, batch_size=16, lr=1e-3, seed=3)
    res = pretrain(X, SMALL, tcfg)
    # replay by hand with the same random streams
    root = Rng(3)
    p0 = init_params(SMALL, rng=root.child(1))
    perm = root.child(2, 0).gen.permutation(len(X))
    masks = draw_masks(len(X), SMALL.num_patches, root.child(3, 0))
    lb, grads = ssl_forward_backward(patch_windows(X[np.sort(perm)], SMALL), p0, masks)
    expect, _ = adam_step(p0, grads, OptimizerState.zeros_like(p0), 1e-3)
    assert params_equal(res.params, expect)
    assert res.losses == [lb.total] and res.state.t == 1


def test_pretrain_deterministic_and_learns():
    X, _ = toy_task(8)
    tcfg = TrainConfig(epochs=6, batch_size=8, lr=3e-3, seed=1)
    a, b = pretrain(X, SMALL, tcfg), pretrain(X, SMALL, tcfg)
    assert np.asarray(a.losses).tobytes() == np.asarray(b.losses).tobytes()
    assert params_equal(a.params, b.params)
    assert a.losses[-1] < a.losses[0]
    assert set(a.history[0]) == {"epoch", "loss", "recon", "cl"}


def test_pretrain_resume_matches_straight_run():
    X, _ = toy_task(6)
    full = pretrain(X, SMALL, TrainConfig(epochs=4, batch_size=5, seed=2))
    head = pretrain(X, SMALL, TrainConfig(epochs=2, batch_size=5, seed=2))
    tail = pretrain(X, SMALL, TrainConfig(epochs=4, batch_size=5, seed=2), resume=head)
    assert tail.losses == full.losses
    assert params_equal(tail.params, full.params)


def test_pretrain_empty_corpus():
    with pytest.raises(ValueError):
        pretrain(np.zeros((0, 2, 64), np.float32), SMALL, TrainConfig(epochs=1))


# fine-tuning --------------------------------------------------------------

def test_softmax_cross_entropy():
    loss, d = softmax_cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
    assert abs(loss - np.log(4)) < 1e-12
    np.testing.assert_allclose(d[0], [-0.375, 0.125, 0.125, 0.125])


def test_stratified_split():
    labels = np.repeat([0, 1, 2], 10)
    tr, va = stratified_split(labels, 0.8, Rng(0))
    assert len(tr) == 24 and len(va) == 6
    assert np.bincount(labels[va]).tolist() == [2, 2, 2]
    assert not set(tr) & set(va)


def test_lp_freezes_trunk():
    X, y = toy_task()
    trunk = init_params(SMALL, rng=Rng(0))
    res = finetune(trunk, (X, y), SMALL, TrainConfig(epochs=3, batch_size=8, lr=1e-2), strategy="LP")
    for name in TRUNK:
        assert getattr(res.params, name).tobytes() == getattr(trunk, name).tobytes()
    assert res.params.has_head and len(res.history) == 3
    assert all(h["stage"] == "LP" for h in res.history)


def test_fn_updates_encoder_not_recon():
    X, y = toy_task()
    trunk = init_params(SMALL, rng=Rng(0))
    res = finetune(trunk, (X, y), SMALL, TrainConfig(epochs=2, batch_size=8), strategy="FN")
    assert res.params.enc_W1.tobytes() != trunk.enc_W1.tobytes()
    assert res.params.recon_W.tobytes() == trunk.recon_W.tobytes()


def test_lp_fn_with_all_lp_epochs_equals_lp():
    X, y = toy_task()
    trunk = init_params(SMALL, rng=Rng(0))
    tcfg = TrainConfig(epochs=3, batch_size=8, lp_epochs=3, lr=1e-2, seed=4)
    a = finetune(trunk, (X, y), SMALL, tcfg, strategy="LP_FN")
    b = finetune(trunk, (X, y), SMALL, tcfg, strategy="LP")
    assert params_equal(a.params, b.params)
    assert [h["accuracy"] for h in a.history] == [h["accuracy"] for h in b.history]


def test_lp_fn_switches_stage_and_is_deterministic():
    X, y = toy_task()
    trunk = init_params(SMALL, rng=Rng(0))
    tcfg = TrainConfig(epochs=4, batch_size=8, lp_epochs=2, lr=1e-2, seed=5)
    a = finetune(trunk, (X, y), SMALL, tcfg)
    b = finetune(trunk, (X, y), SMALL, tcfg)
    assert [h["stage"] for h in a.history] == ["LP", "LP", "FN", "FN"]
    assert params_equal(a.params, b.params)
    assert a.final_accuracy == a.history[-1]["accuracy"]
    assert a.best_accuracy >= a.final_accuracy


def test_finetune_learns_separable_task():
    X, y = toy_task(20)
    trunk = init_params(SMALL, rng=Rng(0))
    res = finetune(trunk, (X, y), SMALL, TrainConfig(epochs=30, batch_size=8, lr=1e-2, lp_epochs=10))
    assert res.final_accuracy >= 0.9


def test_finetune_needs_labels(tmp_path):
    from pimlp.data import SignalRecord

    recs = [SignalRecord(np.ones((2, 64)) * i) for i in range(4)]
    with pytest.raises(DataError):
        finetune(init_params(SMALL, rng=Rng(0)), recs, SMALL, TrainConfig(epochs=1, strategy="FN"))


# evaluation ---------------------------------------------------------------

def _const_head(k, winner):
    p = init_params(SMALL, k, Rng(0))
    p.cls_W[:] = 0
    p.cls_b[:] = 0
    p.cls_b[winner] = 1
    return p


def test_evaluate_constant_predictor():
    X = np.random.default_rng(0).standard_normal((8, 2, 64)).astype(np.float32)
    y = np.repeat(np.arange(4), 2)
    acc, conf = evaluate(_const_head(4, 2), (X, y), SMALL)
    assert acc == 0.25
    assert conf.sum(axis=1).tolist() == [2, 2, 2, 2]
    assert conf[:, 2].tolist() == [2, 2, 2, 2]
    assert conf.dtype.kind == "i" and conf.sum() == 8


def test_evaluate_ties_go_to_lowest_class_and_perfect_case():
    X = np.zeros((3, 2, 64), np.float32)
    acc, conf = evaluate(_const_head(3, 0), (X, np.array([0, 0, 0])), SMALL)
    assert acc == 1.0 and conf[0, 0] == 3 and np.trace(conf) == 3
    p = _const_head(3, 0)
    p.cls_b[:] = 0  # all logits equal
    acc, _ = evaluate(p, (X, np.array([0, 0, 0])), SMALL)
    assert acc == 1.0


def test_evaluate_empty_is_error():
    with pytest.raises(ValueError):
        evaluate(_const_head(2, 0), [], SMALL)
    with pytest.raises(ValueError):
        evaluate(_const_head(2, 0), (np.zeros((0, 2, 64), np.float32), np.zeros(0)), SMALL)


def test_per_class_recall():
    np.testing.assert_allclose(per_class_recall(np.array([[3, 1], [0, 2]])), [0.75, 1.0])


# lr finder ----------------------------------------------------------------

def test_lr_grid():
    assert lr_grid(1e-6, 1.0, 2).tolist() == [1e-6, 1.0]
    g = lr_grid(1e-5, 1e-1, 5)
    assert g[0] == 1e-5 and g[-1] == 1e-1
    np.testing.assert_allclose(np.diff(np.log10(g)), 1.0)
    with pytest.raises(ConfigError):
        lr_grid(1.0, 0.1, 10)
    with pytest.raises(ConfigError):
        lr_grid(1e-3, 1e-1, 1)


def test_lr_range_test_suggestion_interior():
    X, _ = toy_task(8)
    res = lr_range_test(SMALL, X, lr_min=1e-5, lr_max=1.0, steps=40, batch_size=8)
    assert res.lrs[0] == 1e-5
    assert 1e-5 < res.suggestion < 1.0
    assert len(res.losses) == len(res.smoothed) == len(res.lrs)
    again = lr_range_test(SMALL, X, lr_min=1e-5, lr_max=1.0, steps=40, batch_size=8)
    assert again.losses == res.losses


def test_lr_range_test_finetune_objective():
    X, y = toy_task(8)
    res = lr_range_test(SMALL, X, 1e-4, 1.0, steps=20, objective="finetune", labels=y, batch_size=8)
    assert len(res.lrs) >= 2
    with pytest.raises(DataError):
        lr_range_test(SMALL, X, 1e-4, 1.0, steps=5, objective="finetune")
