"""Pure-numpy reference implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
Inputs are C-contiguous float32 or float64 arrays; outputs keep the input dtype.
"""
import numpy as np


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad, pre):
    return np.where(pre > 0, grad, 0).astype(grad.dtype, copy=False)


def maxpool_pairs(x):
    """Pool rows pairwise along axis 1 of a [R, N, D] array.

    Returns ``(out, idx)`` where ``idx`` holds the source row chosen for every
    output element. Ties go to the lower index; an odd trailing row passes through.
    """
    r, n, d = x.shape
    half = n // 2
    n_out = (n + 1) // 2
    out = np.empty((r, n_out, d), dtype=x.dtype)
    idx = np.empty((r, n_out, d), dtype=np.int64)
    even = x[:, 0:2 * half:2]
    odd = x[:, 1:2 * half:2]
    take_odd = odd > even
    out[:, :half] = np.where(take_odd, odd, even)
    base = 2 * np.arange(half, dtype=np.int64)[None, :, None]
    idx[:, :half] = base + take_odd
    if n % 2:
        out[:, half] = x[:, n - 1]
        idx[:, half] = n - 1
    return out, idx


def maxpool_pairs_backward(gout, idx, n_in):
    r, n_out, d = gout.shape
    gin = np.zeros((r, n_in, d), dtype=gout.dtype)
    rows = np.arange(r)[:, None, None]
    cols = np.arange(d)[None, None, :]
    # each input row receives from at most one output row, so plain assignment is exact
    gin[rows, idx, cols] = gout
    return gin


def global_maxpool(x):
    """Max over axis 1 of a [R, N, D] array with argmax (first occurrence)."""
    idx = np.argmax(x, axis=1)
    out = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
    return out, idx.astype(np.int64)


def global_maxpool_backward(gout, idx, n_in):
    r, d = gout.shape
    gin = np.zeros((r, n_in, d), dtype=gout.dtype)
    np.put_along_axis(gin, idx[:, None, :], gout[:, None, :], axis=1)
    return gin


def softmax_rows(s):
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def contrastive_nll(sim, half):
    """Positive-pair negative log-likelihood over a [R, M, M] similarity stack.

    Row ``n`` is scored by a softmax over all columns except ``n`` itself; its
    positive partner is ``n + half`` (mod M). Returns ``(loss, dsim)`` with
    ``loss[r]`` the summed NLL over the M rows of slab ``r`` and ``dsim`` the
    gradient of that sum with respect to ``sim``.
    """
    r, m, _ = sim.shape
    eye = np.eye(m, dtype=bool)
    masked = np.where(eye, -np.inf, sim)
    mx = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - mx)
    tot = e.sum(axis=-1, keepdims=True)
    p = e / tot
    partner = (np.arange(m) + half) % m
    rows = np.arange(m)
    logp = (masked - mx - np.log(tot))[:, rows, partner]
    loss = -logp.sum(axis=1)
    dsim = p
    dsim[:, rows, partner] -= 1
    return loss.astype(sim.dtype), dsim.astype(sim.dtype, copy=False)


def instance_norm(x, eps):
    """Per-row (x - mean) / sqrt(var + eps) on a [R, L] array, population variance."""
    # statistics in float64, matching the compiled kernel
    xd = x.astype(np.float64, copy=False)
    mean = xd.mean(axis=1, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    scale = np.sqrt(var + eps)
    safe = np.where(scale > 0, scale, 1)
    return np.where(scale > 0, centered / safe, 0).astype(x.dtype, copy=False)


def upsample_linear(x, length):
    """Endpoint-preserving linear interpolation of each row of [R, L_raw] onto ``length`` points."""
    r, n = x.shape
    if length == 1:
        return x[:, :1].copy()
    j = np.arange(length, dtype=np.float64)
    pos = j * (n - 1) / (length - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = pos - lo
    a = x[:, lo].astype(np.float64)
    b = x[:, lo + 1].astype(np.float64)
    out = a * (1.0 - frac) + b * frac
    return out.astype(x.dtype)
