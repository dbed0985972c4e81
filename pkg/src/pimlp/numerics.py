"""Primitive math on dense real arrays.

Arrays are plain ``numpy.ndarray``. Training runs in float32; the same kernels
accept float64 for gradient checking.
"""
import numpy as np

from .errors import DimensionError
from .kernels import backend as _k

RNG_ALGORITHM = "numpy-philox4x64/seedsequence-v1"


class Rng:
    """Seedable, splittable random stream.

    ``Rng(seed, stream)`` always produces the same draws. ``child(key)`` derives an
    independent stream keyed by ``key`` without consuming draws from the parent.
    """

    def __init__(self, seed, stream=0, _path=None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self._path = tuple(_path) if _path is not None else (self.stream,)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys):
        return Rng(self.seed, self.stream, _path=self._path + tuple(int(k) for k in keys))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self._path})"


def _as_float(x):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


def affine(x, W, b=None):
    """``x @ W.T + b`` batched over the leading dimensions of ``x``."""
    x = np.asarray(x)
    W = np.asarray(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: x has shape {x.shape}, W has shape {W.shape}")
    y = x @ W.T
    if b is not None:
        b = np.asarray(b)
        if b.shape != (W.shape[0],):
            raise DimensionError(f"affine: bias shape {b.shape} does not match W shape {W.shape}")
        y = y + b
    return y


def relu(x):
    return _k.relu(_as_float(x))


def stable_softmax_row(scores):
    s = _as_float(scores)
    if s.ndim != 1 or s.shape[0] == 0:
        raise DimensionError(f"stable_softmax_row: need a non-empty vector, got shape {s.shape}")
    return _k.softmax_rows(s[None, :])[0]


def maxpool_pairs(x):
    """Elementwise max of rows ``2j`` and ``2j+1`` of an [N, D] array; an odd last row passes through."""
    x = _as_float(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"maxpool_pairs: need [N>=1, D], got {x.shape}")
    out, _ = _k.maxpool_pairs(x[None])
    return out[0]


def global_maxpool(x):
    x = _as_float(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"global_maxpool: need [N>=1, D], got {x.shape}")
    out, _ = _k.global_maxpool(x[None])
    return out[0]
