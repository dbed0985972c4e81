"""Kernel backend selection.

The compiled extension ``pimlp._ckernels`` is used when it imports; otherwise the
pure-numpy versions in ``pimlp._kernels_py`` are used. ``PIMLP_KERNELS=python``
forces the fallback, ``PIMLP_KERNELS=c`` makes a missing extension an error.

Both backends expose the same functions (see ``_kernels_py`` for the contracts).
"""
import os
from types import SimpleNamespace

import numpy as np

from . import _kernels_py

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _c_relu(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _ckernels._relu_flat(x.reshape(-1), out.reshape(-1))
    return out


def _c_relu_backward(grad, pre):
    grad = np.ascontiguousarray(grad)
    pre = np.ascontiguousarray(pre, dtype=grad.dtype)
    out = np.empty_like(grad)
    _ckernels._relu_backward_flat(grad.reshape(-1), pre.reshape(-1), out.reshape(-1))
    return out


def _c_maxpool_pairs(x):
    x = np.ascontiguousarray(x)
    r, n, d = x.shape
    n_out = (n + 1) // 2
    out = np.empty((r, n_out, d), dtype=x.dtype)
    idx = np.empty((r, n_out, d), dtype=np.int64)
    _ckernels._maxpool_pairs(x, out, idx)
    return out, idx


def _c_maxpool_pairs_backward(gout, idx, n_in):
    gout = np.ascontiguousarray(gout)
    gin = np.zeros((gout.shape[0], n_in, gout.shape[2]), dtype=gout.dtype)
    _ckernels._pool_scatter(gout, np.ascontiguousarray(idx), gin)
    return gin


def _c_global_maxpool(x):
    x = np.ascontiguousarray(x)
    r, _, d = x.shape
    out = np.empty((r, d), dtype=x.dtype)
    idx = np.empty((r, d), dtype=np.int64)
    _ckernels._global_maxpool(x, out, idx)
    return out, idx


def _c_global_maxpool_backward(gout, idx, n_in):
    gout = np.ascontiguousarray(gout)
    gin = np.zeros((gout.shape[0], n_in, gout.shape[1]), dtype=gout.dtype)
    _ckernels._global_scatter(gout, np.ascontiguousarray(idx), gin)
    return gin


def _c_softmax_rows(s):
    s = np.ascontiguousarray(s)
    flat = s.reshape(-1, s.shape[-1])
    out = np.empty_like(flat)
    _ckernels._softmax_rows(flat, out)
    return out.reshape(s.shape)


def _c_contrastive_nll(sim, half):
    sim = np.ascontiguousarray(sim)
    loss = np.empty(sim.shape[0], dtype=sim.dtype)
    dsim = np.empty_like(sim)
    _ckernels._contrastive_nll(sim, half, loss, dsim)
    return loss, dsim


def _c_instance_norm(x, eps):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _ckernels._instance_norm(x, float(eps), out)
    return out


def _c_upsample_linear(x, length):
    x = np.ascontiguousarray(x)
    if length == 1:
        return x[:, :1].copy()
    out = np.empty((x.shape[0], length), dtype=x.dtype)
    _ckernels._upsample_linear(x, out)
    return out


_NAMES = (
    "relu", "relu_backward", "maxpool_pairs", "maxpool_pairs_backward",
    "global_maxpool", "global_maxpool_backward", "softmax_rows",
    "contrastive_nll", "instance_norm", "upsample_linear",
)

python_backend = SimpleNamespace(name="python", **{n: getattr(_kernels_py, n) for n in _NAMES})

if _ckernels is not None:
    c_backend = SimpleNamespace(name="c", **{n: globals()["_c_" + n] for n in _NAMES})
else:
    c_backend = None


def _select():
    choice = os.environ.get("PIMLP_KERNELS", "auto").lower()
    if choice == "python":
        return python_backend
    if choice == "c" and c_backend is None:
        raise ImportError("PIMLP_KERNELS=c but pimlp._ckernels is not built")
    return c_backend or python_backend


backend = _select()
BACKEND = backend.name


def available_backends():
    return [b for b in (c_backend, python_backend) if b is not None]
