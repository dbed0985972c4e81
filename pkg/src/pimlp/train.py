"""Optimization: Adam, self-supervised pre-training, LP / FN / LP-FN fine-tuning,
learning-rate range test, evaluation.

All randomness is drawn from ``Rng(seed)`` children keyed by purpose and epoch,
so a run can be resumed at any epoch boundary with identical results.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .data import HyperConfig, SignalRecord, labels_of, patch_windows, prepare_signals
from .errors import ConfigError, DataError, NonFiniteGradientError
from .kernels import backend as _k
from .model import (
    DROPOUT_P, HEAD, TRUNK, ModelParams, attach_head, classify_forward, encode,
    encoder_backward, head_backward, init_params,
)
from .numerics import Rng
from .objective import draw_masks, ssl_forward_backward

log = logging.getLogger(__name__)

STRATEGIES = ("LP", "FN", "LP_FN")
ENCODER = ("enc_W1", "enc_b1", "enc_W2", "enc_b2")

# Rng child keys
_INIT, _SHUFFLE, _MASKS, _HEAD, _DROPOUT, _SPLIT, _LRFIND = range(1, 8)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    strategy: str = "LP_FN"
    lp_epochs: int = 10
    seed: int = 0
    eval_every: int = 1
    dropout: float = DROPOUT_P
    include_level0: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs, batch_size and eval_every must be >= 1")
        if self.lp_epochs < 0:
            raise ConfigError(f"lp_epochs must be >= 0, got {self.lp_epochs}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        t = params.tensors()
        return cls({k: np.zeros_like(a) for k, a in t.items()}, {k: np.zeros_like(a) for k, a in t.items()}, **kw)

    def copy(self):
        return OptimizerState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()},
                              self.t, self.beta1, self.beta2, self.eps)

    def config(self):
        return {"name": "adam", "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def adam_step(params, grads, state, lr, names=None):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are untouched.

    ``names`` restricts the update to a subset of tensors; the rest are copied through.
    """
    if lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")
    names = list(names) if names is not None else list(grads.tensors())
    for name in names:
        g = getattr(grads, name)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in tensor {name!r}")
    new_params = params.copy()
    new_state = state.copy()
    t = state.t + 1
    new_state.t = t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in names:
        g = getattr(grads, name)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_state.m[name] = m
        new_state.v[name] = v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        setattr(new_params, name, getattr(params, name) - step.astype(params.dtype, copy=False))
    return new_params, new_state


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class PretrainResult:
    params: ModelParams
    state: OptimizerState
    history: List[dict] = field(default_factory=list)  # one dict per epoch

    @property
    def losses(self):
        return [h["loss"] for h in self.history]


def _as_signals(data, cfg):
    if isinstance(data, np.ndarray):
        if data.ndim != 3 or data.shape[1:] != (cfg.channels, cfg.input_len):
            raise DataError(f"signal array must be [U, {cfg.channels}, {cfg.input_len}], got {data.shape}")
        return data
    return prepare_signals(list(data), cfg)


def _batches(n, batch_size, perm):
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def pretrain(corpus, cfg, tcfg, resume=None, on_epoch=None):
    """Self-supervised training on unlabeled data.

    ``corpus`` is a list of records or an already prepared [U, C, L] array.
    ``resume`` is a ``PretrainResult`` (or checkpoint contents) to continue from;
    ``on_epoch(result)`` is called after every epoch.
    """
    cfg.require_trainable()
    signals = _as_signals(corpus, cfg)
    n = signals.shape[0]
    if n == 0:
        raise ValueError("pretrain: empty corpus")
    root = Rng(tcfg.seed)
    if resume is None:
        params = init_params(cfg, rng=root.child(_INIT))
        result = PretrainResult(params, OptimizerState.zeros_like(params), [])
    else:
        result = PretrainResult(resume.params.without_head(), resume.state.copy(), list(resume.history))
    N = cfg.num_patches

    for epoch in range(len(result.history), tcfg.epochs):
        perm = root.child(_SHUFFLE, epoch).gen.permutation(n)
        mask_rng = root.child(_MASKS, epoch)
        tot = rec = cl = 0.0
        for idx in _batches(n, tcfg.batch_size, perm):
            X = patch_windows(signals[np.sort(idx)], cfg)
            masks = draw_masks(len(idx), N, mask_rng)
            lb, grads = ssl_forward_backward(X, result.params, masks, include_level0=tcfg.include_level0)
            result.params, result.state = adam_step(result.params, grads, result.state, tcfg.lr)
            w = len(idx)
            tot += lb.total * w
            rec += lb.recon * w
            cl += lb.cl_total * w
        result.history.append({"epoch": epoch + 1, "loss": tot / n, "recon": rec / n, "cl": cl / n})
        log.info("pretrain epoch %d loss %.6g", epoch + 1, tot / n)
        if on_epoch is not None:
            on_epoch(result)
    return result


# ---------------------------------------------------------------------------
# fine-tuning


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    p = _k.softmax_rows(np.ascontiguousarray(logits))
    b = logits.shape[0]
    picked = p[np.arange(b), labels].astype(np.float64)
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    d = p.copy()
    d[np.arange(b), labels] -= 1
    return loss, d / logits.dtype.type(b)


def stratified_split(labels, frac_train, rng):
    """Seeded per-class shuffle; the first ``frac_train`` of each class goes to train."""
    train, held = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.gen.permutation(len(idx))]
        k = int(round(frac_train * len(idx)))
        train.extend(idx[:k])
        held.extend(idx[k:])
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(held, dtype=np.int64))


def predict_logits(signals, params, cfg, batch_size=256):
    out = []
    for start in range(0, signals.shape[0], batch_size):
        X = patch_windows(signals[start:start + batch_size], cfg)
        acts = encode(X, params)
        logits, _ = classify_forward(acts.z2, params, training=False)
        out.append(logits)
    return np.concatenate(out) if out else np.zeros((0, params.cls_b.shape[0]), dtype=params.dtype)


def _pooled_features(signals, params, cfg, batch_size=256):
    """Max-pooled z2 features [U, C*D] under a frozen trunk."""
    feats = []
    for start in range(0, signals.shape[0], batch_size):
        X = patch_windows(signals[start:start + batch_size], cfg)
        z2 = encode(X, params).z2
        B, C, N, D = z2.shape
        pooled, _ = _k.global_maxpool(np.ascontiguousarray(z2).reshape(B * C, N, D))
        feats.append(pooled.reshape(B, C * D))
    return np.concatenate(feats)


@dataclass
class FinetuneResult:
    params: ModelParams
    history: List[dict]
    num_classes: int

    @property
    def final_accuracy(self):
        accs = [h["accuracy"] for h in self.history if h.get("accuracy") is not None]
        return accs[-1] if accs else None

    @property
    def best_accuracy(self):
        accs = [h["accuracy"] for h in self.history if h.get("accuracy") is not None]
        return max(accs) if accs else None


def finetune(trunk, dataset, cfg, tcfg, strategy=None, num_classes=None, val=None, on_epoch=None):
    """Attach a classification head to ``trunk`` and train it.

    LP trains the head only, FN trains head and encoder, LP_FN runs ``lp_epochs`` of
    LP followed by FN for the remaining epochs. The optimizer restarts at the stage
    switch. ``val`` is a ``(signals, labels)`` pair or list of records; when absent a
    seeded 80/20 stratified split of ``dataset`` provides it.
    """
    strategy = strategy or tcfg.strategy
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if strategy == "LP_FN" and tcfg.lp_epochs > tcfg.epochs:
        raise ConfigError(f"lp_epochs={tcfg.lp_epochs} exceeds epochs={tcfg.epochs}")
    records = list(dataset) if not isinstance(dataset, tuple) else None
    if records is not None:
        labels = labels_of(records)
        signals = prepare_signals(records, cfg)
    else:
        signals, labels = dataset
        signals = _as_signals(signals, cfg)
        labels = np.asarray(labels, dtype=np.int64)
    if signals.shape[0] == 0:
        raise DataError("finetune: empty dataset")
    k = int(num_classes if num_classes is not None else labels.max() + 1)
    if k < 2:
        raise DataError(f"finetune needs >= 2 classes, got {k}")

    root = Rng(tcfg.seed)
    if val is None:
        tr, va = stratified_split(labels, 0.8, root.child(_SPLIT))
        val_signals, val_labels = signals[va], labels[va]
        signals, labels = signals[tr], labels[tr]
    elif isinstance(val, tuple):
        val_signals, val_labels = _as_signals(val[0], cfg), np.asarray(val[1], dtype=np.int64)
    else:
        val_signals, val_labels = prepare_signals(list(val), cfg), labels_of(val)

    params = attach_head(trunk, cfg, k, root.child(_HEAD))
    lp_epochs = {"LP": tcfg.epochs, "FN": 0, "LP_FN": tcfg.lp_epochs}[strategy]
    n = signals.shape[0]
    history = []
    state = None
    stage = None
    cached = None
    for epoch in range(tcfg.epochs):
        new_stage = "LP" if epoch < lp_epochs else "FN"
        if new_stage != stage:
            stage = new_stage
            names = HEAD if stage == "LP" else HEAD + ENCODER
            state = OptimizerState.zeros_like(params)
            cached = _pooled_features(signals, params, cfg) if stage == "LP" else None
        perm = root.child(_SHUFFLE, epoch).gen.permutation(n)
        drop_rng = root.child(_DROPOUT, epoch)
        tot = 0.0
        for idx in _batches(n, tcfg.batch_size, perm):
            y = labels[idx]
            if stage == "LP":
                loss, grads = _head_step(cached[idx], y, params, tcfg.dropout, drop_rng)
            else:
                loss, grads = _full_step(patch_windows(signals[idx], cfg), y, params, tcfg.dropout, drop_rng)
            params, state = adam_step(params, grads, state, tcfg.lr, names=names)
            tot += loss * len(idx)
        entry = {"epoch": epoch + 1, "stage": stage, "loss": tot / n, "accuracy": None}
        if (epoch + 1) % tcfg.eval_every == 0 or epoch + 1 == tcfg.epochs:
            acc, _ = evaluate(params, (val_signals, val_labels), cfg, num_classes=k)
            entry["accuracy"] = acc
        history.append(entry)
        log.info("finetune epoch %d [%s] loss %.5g acc %s", epoch + 1, stage, entry["loss"], entry["accuracy"])
        if on_epoch is not None:
            on_epoch(entry)
    return FinetuneResult(params, history, k)


def _head_step(feats, y, params, dropout_p, rng):
    if dropout_p > 0:
        keep = (rng.gen.random(feats.shape) >= dropout_p).astype(feats.dtype) / feats.dtype.type(1 - dropout_p)
        x = feats * keep
    else:
        x = feats
    logits = x @ params.cls_W.T + params.cls_b
    loss, dlogits = softmax_cross_entropy(logits, y)
    grads = _zero_grads(params)
    grads.cls_W = dlogits.T @ x
    grads.cls_b = dlogits.sum(axis=0)
    return loss, grads


def _full_step(X, y, params, dropout_p, rng):
    acts = encode(X, params)
    logits, cache = classify_forward(acts.z2, params, dropout_p, rng, training=True)
    loss, dlogits = softmax_cross_entropy(logits, y)
    head, dz2 = head_backward(dlogits, cache, params, acts.z2.shape)
    enc, _ = encoder_backward(acts, params, dz2=dz2)
    grads = _zero_grads(params)
    for name, g in {**head, **enc}.items():
        setattr(grads, name, g.astype(params.dtype, copy=False))
    return loss, grads


def _zero_grads(params):
    return ModelParams(**{k: np.zeros_like(v) for k, v in params.tensors().items()})


# ---------------------------------------------------------------------------
# evaluation


def evaluate(params, dataset, cfg, num_classes=None):
    """Accuracy and confusion matrix (rows = true class, columns = predicted)."""
    if isinstance(dataset, tuple):
        signals, labels = _as_signals(dataset[0], cfg), np.asarray(dataset[1], dtype=np.int64)
    else:
        records = list(dataset)
        if not records:
            raise ValueError("evaluate: empty dataset")
        labels = labels_of(records)
        signals = prepare_signals(records, cfg)
    if signals.shape[0] == 0:
        raise ValueError("evaluate: empty dataset")
    k = int(num_classes if num_classes is not None else params.cls_b.shape[0])
    pred = np.argmax(predict_logits(signals, params, cfg), axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return float(np.trace(confusion) / labels.shape[0]), confusion


def per_class_recall(confusion):
    rows = confusion.sum(axis=1)
    return np.where(rows > 0, np.diag(confusion) / np.maximum(rows, 1), np.nan)


# ---------------------------------------------------------------------------
# learning-rate range test


@dataclass
class LRFinderResult:
    lrs: List[float]
    losses: List[float]
    smoothed: List[float]
    suggestion: Optional[float]
    stopped_early: bool
    lr_min: float
    lr_max: float


def lr_grid(lr_min, lr_max, steps):
    if not (0 < lr_min < lr_max):
        raise ConfigError(f"need 0 < lr_min < lr_max, got {lr_min}, {lr_max}")
    if steps < 2:
        raise ConfigError(f"need steps >= 2, got {steps}")
    k = np.arange(steps)
    lrs = lr_min * (lr_max / lr_min) ** (k / (steps - 1))
    lrs[0], lrs[-1] = lr_min, lr_max
    return lrs


def lr_range_test(cfg, signals, lr_min=1e-7, lr_max=1.0, steps=100, objective="pretrain", labels=None,
                  params=None, batch_size=64, seed=0, smoothing=0.98, divergence=4.0):
    """Exponential learning-rate sweep with one optimizer step per learning rate.

    ``objective="pretrain"`` uses the self-supervised loss, ``"finetune"`` the
    cross-entropy of a full fine-tune (labels required). The model starts from
    ``params`` (copied) or a fresh initialisation.
    """
    lrs = lr_grid(lr_min, lr_max, steps)
    signals = _as_signals(signals, cfg)
    root = Rng(seed).child(_LRFIND)
    n = signals.shape[0]
    if objective == "finetune":
        if labels is None:
            raise DataError("finetune range test needs labels")
        labels = np.asarray(labels, dtype=np.int64)
        if params is None:
            params = init_params(cfg, rng=root.child(_INIT))
        if not params.has_head:
            params = attach_head(params, cfg, int(labels.max() + 1), root.child(_HEAD))
    elif objective == "pretrain":
        cfg.require_trainable()
        params = init_params(cfg, rng=root.child(_INIT)) if params is None else params.without_head()
    else:
        raise ConfigError(f"unknown objective {objective!r}")
    params = params.copy()
    state = OptimizerState.zeros_like(params)
    names = list(params.tensors()) if objective == "pretrain" else list(HEAD + ENCODER)

    order = root.child(_SHUFFLE).gen.permutation(n)
    mask_rng = root.child(_MASKS)
    drop_rng = root.child(_DROPOUT)
    raw, smooth = [], []
    avg, best = 0.0, np.inf
    stopped = False
    for step, lr in enumerate(lrs):
        start = (step * batch_size) % n
        idx = np.sort(np.take(order, np.arange(start, start + min(batch_size, n)), mode="wrap"))
        X = patch_windows(signals[idx], cfg)
        if objective == "pretrain":
            lb, grads = ssl_forward_backward(X, params, draw_masks(len(idx), cfg.num_patches, mask_rng))
            loss = lb.total
        else:
            loss, grads = _full_step(X, labels[idx], params, DROPOUT_P, drop_rng)
        if not np.isfinite(loss):
            stopped = True
            break
        raw.append(loss)
        avg = smoothing * avg + (1 - smoothing) * loss
        s = avg / (1 - smoothing ** (step + 1))
        smooth.append(s)
        best = min(best, s)
        if step > 0 and s > divergence * best:
            stopped = True
            break
        try:
            params, state = adam_step(params, grads, state, float(lr), names=names)
        except FloatingPointError:
            stopped = True
            break
    used = [float(x) for x in lrs[: len(raw)]]
    return LRFinderResult(used, raw, smooth, _suggest(used, smooth), stopped, float(lr_min), float(lr_max))


def _suggest(lrs, smooth):
    """Learning rate at the steepest descent of the smoothed loss, interior points only."""
    if len(smooth) < 3:
        return lrs[int(np.argmin(smooth))] if smooth else None
    slope = np.gradient(np.asarray(smooth), np.log(np.asarray(lrs)))
    interior = np.arange(1, len(smooth) - 1)
    return float(lrs[int(interior[np.argmin(slope[interior])])])
