"""Model parameters and forward passes.

One two-layer MLP encodes every patch of every channel with the same weights.
``z1`` (post-ReLU first layer) feeds the contrastive objective, ``z2`` (second
layer, linear) feeds the reconstruction and classification heads.
"""
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .kernels import backend as _k

INIT_SCHEME = "glorot-uniform/zero-bias"
DROPOUT_P = 0.2
TRUNK = ("enc_W1", "enc_b1", "enc_W2", "enc_b2", "recon_W")
HEAD = ("cls_W", "cls_b")


@dataclass
class ModelParams:
    enc_W1: np.ndarray
    enc_b1: np.ndarray
    enc_W2: np.ndarray
    enc_b2: np.ndarray
    recon_W: np.ndarray
    cls_W: Optional[np.ndarray] = None
    cls_b: Optional[np.ndarray] = None

    @property
    def has_head(self):
        return self.cls_W is not None

    @property
    def dtype(self):
        return self.enc_W1.dtype

    def tensors(self):
        """Ordered ``{name: array}`` of every stored tensor."""
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def copy(self):
        return ModelParams(**{k: v.copy() for k, v in self.tensors().items()})

    def astype(self, dtype):
        return ModelParams(**{k: v.astype(dtype) for k, v in self.tensors().items()})

    def size(self):
        return sum(int(v.size) for v in self.tensors().values())

    def without_head(self):
        return ModelParams(**{k: getattr(self, k).copy() for k in TRUNK})


@dataclass
class EncoderActivations:
    patches: np.ndarray
    h1: np.ndarray  # first-layer pre-activation
    z1: np.ndarray
    z2: np.ndarray


def _glorot(rng, out_dim, in_dim, dtype):
    a = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.gen.uniform(-a, a, size=(out_dim, in_dim)).astype(dtype)


def init_params(cfg, num_classes=None, rng=None, dtype=np.float32):
    if rng is None:
        raise ConfigError("init_params needs an Rng")
    P, D = cfg.patch_len, cfg.hidden_dim
    params = ModelParams(
        enc_W1=_glorot(rng.child(1), D, P, dtype),
        enc_b1=np.zeros(D, dtype=dtype),
        enc_W2=_glorot(rng.child(2), D, D, dtype),
        enc_b2=np.zeros(D, dtype=dtype),
        recon_W=_glorot(rng.child(3), P, D, dtype),
    )
    if num_classes is not None:
        params = attach_head(params, cfg, num_classes, rng.child(4))
    return params


def attach_head(params, cfg, num_classes, rng):
    """Return a copy of ``params`` with a freshly initialised classification head."""
    if num_classes < 2:
        raise ConfigError(f"classification head needs >= 2 classes, got {num_classes}")
    out = params.without_head()
    dtype = params.dtype
    out.cls_W = _glorot(rng, num_classes, cfg.channels * cfg.hidden_dim, dtype)
    out.cls_b = np.zeros(num_classes, dtype=dtype)
    return out


def encode(patches, params):
    """Encode a [..., N, P] patch stack; each patch row is mapped independently."""
    P = params.enc_W1.shape[1]
    if patches.shape[-1] != P:
        raise DimensionError(f"encode: patch length {patches.shape[-1]} != encoder input {P}")
    h1 = patches @ params.enc_W1.T + params.enc_b1
    z1 = _k.relu(h1)
    z2 = z1 @ params.enc_W2.T + params.enc_b2
    return EncoderActivations(patches, h1, z1, z2)


def reconstruct(z2, params):
    if z2.shape[-1] != params.recon_W.shape[1]:
        raise DimensionError(f"reconstruct: z2 width {z2.shape[-1]} != recon_W {params.recon_W.shape}")
    return z2 @ params.recon_W.T


@dataclass
class HeadCache:
    pooled: np.ndarray  # [B, C*D] after max-pool, before dropout
    argmax: np.ndarray  # [B*C, D]
    keep: Optional[np.ndarray]  # dropout scale mask, None when inactive
    n_patches: int


def classify_forward(z2, params, dropout_p=DROPOUT_P, rng=None, training=False):
    """Batched head: z2 [B, C, N, D] -> logits [B, K], plus a cache for backprop."""
    if not params.has_head:
        raise ConfigError("model has no classification head")
    B, C, N, D = z2.shape
    if params.cls_W.shape[1] != C * D:
        raise DimensionError(f"classify: head expects {params.cls_W.shape[1]} features, got C*D={C * D}")
    pooled, argmax = _k.global_maxpool(np.ascontiguousarray(z2).reshape(B * C, N, D))
    pooled = pooled.reshape(B, C * D)
    keep = None
    feats = pooled
    if training and dropout_p > 0:
        if rng is None:
            raise ConfigError("training-mode dropout needs an Rng")
        keep = (rng.gen.random(pooled.shape) >= dropout_p).astype(pooled.dtype) / pooled.dtype.type(1 - dropout_p)
        feats = pooled * keep
    logits = feats @ params.cls_W.T + params.cls_b
    return logits, HeadCache(pooled, argmax, keep, N)


def classify(z2, params, dropout_p=DROPOUT_P, rng=None, training=False):
    """Logits for one sample (z2 [C, N, D]) or a batch (z2 [B, C, N, D])."""
    single = z2.ndim == 3
    logits, _ = classify_forward(z2[None] if single else z2, params, dropout_p, rng, training)
    return logits[0] if single else logits


def param_count(cfg, include_cls=False, num_classes=0):
    P, D = cfg.patch_len, cfg.hidden_dim
    n = P * D + D + D * D + D + D * P
    if include_cls:
        n += cfg.channels * D * num_classes + num_classes
    return n


def _flat(a, width):
    return a.reshape(-1, width)


def encoder_backward(acts, params, dz2=None, dz1=None):
    """Gradients of the encoder weights given upstream gradients on z2 and/or z1.

    Returns ``(grads, dz1_total)``; ``grads`` holds enc_W1, enc_b1, enc_W2, enc_b2.
    """
    P = params.enc_W1.shape[1]
    D = params.enc_W1.shape[0]
    grads = {}
    total = np.zeros_like(acts.z1) if dz1 is None else dz1.copy()
    if dz2 is not None:
        g2 = _flat(dz2, D)
        grads["enc_W2"] = g2.T @ _flat(acts.z1, D)
        grads["enc_b2"] = g2.sum(axis=0)
        total += dz2 @ params.enc_W2
    else:
        grads["enc_W2"] = np.zeros_like(params.enc_W2)
        grads["enc_b2"] = np.zeros_like(params.enc_b2)
    dh1 = _k.relu_backward(total, acts.h1)
    g1 = _flat(dh1, D)
    grads["enc_W1"] = g1.T @ _flat(acts.patches, P)
    grads["enc_b1"] = g1.sum(axis=0)
    return grads, total


def head_backward(dlogits, cache, params, z2_shape):
    """Backprop through linear -> dropout -> max-pool. Returns ``(head_grads, dz2)``."""
    B, C, N, D = z2_shape
    feats = cache.pooled if cache.keep is None else cache.pooled * cache.keep
    grads = {"cls_W": dlogits.T @ feats, "cls_b": dlogits.sum(axis=0)}
    dfeat = dlogits @ params.cls_W
    if cache.keep is not None:
        dfeat = dfeat * cache.keep
    dz2 = _k.global_maxpool_backward(np.ascontiguousarray(dfeat.reshape(B * C, D)), cache.argmax, N)
    return grads, dz2.reshape(B, C, N, D)
