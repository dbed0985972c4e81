"""Self-supervised objective: complementary masking, reconstruction and
hierarchical contrastive losses, their analytic gradients, and a
finite-difference gradient checker.

Masks act on whole patches (indices over N), after patch extraction. Each patch
is reconstructed from the view in which it is visible, so every patch enters
the reconstruction sum exactly once.
"""
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .data import HyperConfig, patch_windows
from .errors import ConfigError, DimensionError
from .kernels import backend as _k
from .model import ModelParams, encode, encoder_backward, init_params, reconstruct
from .numerics import Rng


@dataclass(frozen=True)
class MaskPair:
    m: np.ndarray  # bool [N], True = visible in view 1

    @property
    def complement(self):
        return ~self.m

    def __len__(self):
        return self.m.shape[0]


@dataclass
class LossBreakdown:
    recon: float
    cl_per_level: List[float] = field(default_factory=list)

    @property
    def cl_total(self):
        return float(np.mean(self.cl_per_level)) if self.cl_per_level else 0.0

    @property
    def total(self):
        return self.recon + self.cl_total


def complementary_masks(n, rng):
    """Uniformly random split of ``n`` patch indices; floor(n/2) visible in view 1."""
    if n < 2:
        raise ConfigError(f"complementary masks need N >= 2, got {n}")
    m = np.zeros(n, dtype=bool)
    m[rng.gen.permutation(n)[: n // 2]] = True
    return MaskPair(m)


def draw_masks(batch_size, n, rng):
    return np.stack([complementary_masks(n, rng).m for _ in range(batch_size)])


def apply_mask(patches, m):
    """Zero every patch whose mask entry is False. Works on [..., N, P]."""
    m = np.asarray(m.m if isinstance(m, MaskPair) else m, dtype=bool)
    if patches.shape[-2] != m.shape[-1]:
        raise DimensionError(f"mask length {m.shape[-1]} != number of patches {patches.shape[-2]}")
    return np.where(m[..., :, None], patches, patches.dtype.type(0))


def recon_loss(x, xhat_view1, xhat_view2, masks):
    """Squared error of one sample's patches, each taken from the view where it is visible."""
    if not (x.shape == xhat_view1.shape == xhat_view2.shape):
        raise DimensionError(f"recon_loss: shapes {x.shape}, {xhat_view1.shape}, {xhat_view2.shape}")
    m = masks.m if isinstance(masks, MaskPair) else np.asarray(masks, dtype=bool)
    if m.shape[0] != x.shape[-2]:
        raise DimensionError(f"mask length {m.shape[0]} != number of patches {x.shape[-2]}")
    r1 = np.where(m[:, None], x - xhat_view1, 0)
    r2 = np.where(~m[:, None], x - xhat_view2, 0)
    return float(np.sum(r1.astype(np.float64) ** 2) + np.sum(r2.astype(np.float64) ** 2))


def contrastive_probs(z1_cat, c, n, n_prime):
    """Softmax weight of partner ``n_prime`` among all rows except ``n``, for channel ``c``."""
    if n == n_prime:
        raise ValueError("contrastive_probs: n and n' must differ")
    z = np.asarray(z1_cat[c], dtype=np.float64)
    scores = z @ z[n]
    others = np.delete(np.arange(z.shape[0]), n)
    s = scores[others]
    mx = s.max()
    return float(np.exp(scores[n_prime] - mx) / np.exp(s - mx).sum())


def contrastive_loss_level(z1_cat):
    """Mean positive-pair NLL over [C, M, D] with rows n and n + M/2 forming pairs."""
    C, M, D = z1_cat.shape
    if M % 2 or M < 4:
        raise DimensionError(f"contrastive level needs even M >= 4, got {M}")
    z = np.ascontiguousarray(z1_cat)
    sim = z @ z.transpose(0, 2, 1)
    loss, _ = _k.contrastive_nll(np.ascontiguousarray(sim), M // 2)
    return float(np.sum(loss, dtype=np.float64) / (C * M))


def level_lengths(n):
    """Patch counts of the evaluated hierarchy levels, e.g. 125 -> [125, 63, 32, 16, 8, 4, 2]."""
    out = []
    while n >= 2:
        out.append(n)
        n = (n + 1) // 2
    return out


def hierarchical_cl(z1_view1, z1_view2, include_level0=True):
    """Per-level contrastive losses for one sample's [C, N, D] views."""
    out = []
    a, b = np.ascontiguousarray(z1_view1), np.ascontiguousarray(z1_view2)
    level = 0
    while a.shape[1] >= 2:
        if include_level0 or level > 0:
            out.append(contrastive_loss_level(np.concatenate([a, b], axis=1)))
        a, _ = _k.maxpool_pairs(a)
        b, _ = _k.maxpool_pairs(b)
        level += 1
    return out


def _as_patch_array(batch):
    if isinstance(batch, np.ndarray):
        arr = batch
    else:
        if len(batch) == 0:
            raise ValueError("empty batch")
        arr = np.stack([np.asarray(p) for p in batch])
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ValueError(f"batch must be a non-empty [B, C, N, P] stack, got shape {arr.shape}")
    return arr


def ssl_forward_backward(patches, params, masks, need_grad=True, include_level0=True):
    """Loss of a [B, C, N, P] batch under fixed [B, N] masks, and optionally its gradient.

    Every term is averaged over the batch. Returns ``(LossBreakdown, grads)`` with
    ``grads`` a ``ModelParams`` holding only trunk tensors (or None).
    """
    X = np.asarray(patches, dtype=params.dtype)
    B, C, N, P = X.shape
    D = params.enc_W1.shape[0]
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != (B, N):
        raise DimensionError(f"masks shape {masks.shape} != (B, N) = {(B, N)}")
    vis = masks[:, None, :, None]
    zero = X.dtype.type(0)
    views = np.stack([np.where(vis, X, zero), np.where(vis, zero, X)])  # [2, B, C, N, P]

    acts = encode(views, params)
    xhat = reconstruct(acts.z2, params)
    r = np.stack([np.where(vis, X - xhat[0], zero), np.where(vis, zero, X - xhat[1])])
    recon = float(np.sum(r.astype(np.float64) ** 2) / B)

    # hierarchical contrastive levels on z1, rows are (sample, channel) pairs
    za = np.ascontiguousarray(acts.z1[0]).reshape(B * C, N, D)
    zb = np.ascontiguousarray(acts.z1[1]).reshape(B * C, N, D)
    pyramid = []  # (n_l, idx_a, idx_b); idx maps pooled rows back to the level below
    per_level = []
    level_grads = []
    n_levels = len(level_lengths(N)) - (0 if include_level0 else 1)
    scale_base = 1.0 / max(n_levels, 1)
    level = 0
    while za.shape[1] >= 2:
        n_l = za.shape[1]
        if include_level0 or level > 0:
            zc = np.concatenate([za, zb], axis=1)
            sim = np.ascontiguousarray(zc @ zc.transpose(0, 2, 1))
            loss, dsim = _k.contrastive_nll(sim, n_l)
            denom = B * C * 2 * n_l
            per_level.append(float(np.sum(loss, dtype=np.float64) / denom))
            if need_grad:
                dsim *= X.dtype.type(scale_base / denom)
                dzc = (dsim + dsim.transpose(0, 2, 1)) @ zc
                level_grads.append((dzc[:, :n_l], dzc[:, n_l:]))
            else:
                level_grads.append(None)
        else:
            level_grads.append(None)
        pa, ia = _k.maxpool_pairs(za)
        pb, ib = _k.maxpool_pairs(zb)
        pyramid.append((n_l, ia, ib))
        za, zb = pa, pb
        level += 1

    breakdown = LossBreakdown(recon, per_level)
    if not need_grad:
        return breakdown, None

    # walk the pyramid top-down, folding each level's gradient into the one below
    ga = gb = None
    for lvl in range(len(pyramid) - 1, -1, -1):
        n_l, ia, ib = pyramid[lvl]
        if ga is not None:
            ga = _k.maxpool_pairs_backward(ga, ia, n_l)
            gb = _k.maxpool_pairs_backward(gb, ib, n_l)
        if level_grads[lvl] is not None:
            da, db = level_grads[lvl]
            ga = da if ga is None else ga + da
            gb = db if gb is None else gb + db
    if ga is None:
        dz1 = np.zeros_like(acts.z1)
    else:
        dz1 = np.stack([ga.reshape(B, C, N, D), gb.reshape(B, C, N, D)])

    dxhat = r * X.dtype.type(-2.0 / B)
    grads = {"recon_W": dxhat.reshape(-1, P).T @ acts.z2.reshape(-1, D)}
    dz2 = dxhat @ params.recon_W
    enc, _ = encoder_backward(acts, params, dz2=dz2, dz1=dz1)
    grads.update(enc)
    return breakdown, ModelParams(**{k: grads[k].astype(params.dtype, copy=False) for k in
                                     ("enc_W1", "enc_b1", "enc_W2", "enc_b2", "recon_W")})


def total_loss(batch, params, rng, include_level0=True):
    X = _as_patch_array(batch)
    masks = draw_masks(X.shape[0], X.shape[2], rng)
    loss, _ = ssl_forward_backward(X, params, masks, need_grad=False, include_level0=include_level0)
    return loss


def backward(batch, params, rng, include_level0=True):
    """Gradient of :func:`total_loss` for the same ``rng`` state."""
    X = _as_patch_array(batch)
    masks = draw_masks(X.shape[0], X.shape[2], rng)
    _, grads = ssl_forward_backward(X, params, masks, need_grad=True, include_level0=include_level0)
    return grads


# ---------------------------------------------------------------------------
# gradient checking

GRAD_CHECK_CFG = HyperConfig(input_len=64, patch_len=16, stride=8, channels=2, hidden_dim=8)
REL_FLOOR = 1e-4


def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), REL_FLOOR)


def grad_check(cfg_small=GRAD_CHECK_CFG, seed=0, batch_size=2, coords_per_tensor=50, h=1e-5,
               mode="full", corrupt=None):
    """Max relative error between analytic and central-difference gradients (float64).

    ``mode="full"`` checks the whole objective; ``mode="recon"`` checks the
    reconstruction head alone with the encoder frozen. ``corrupt=(name, scale)``
    perturbs one analytic gradient entry to exercise the checker itself.
    Coordinates whose half-step and full-step differences disagree are treated
    as kinks (ReLU zero or max-pool tie) and resampled.
    """
    rng = Rng(seed, stream=0xC4EC)
    params = init_params(cfg_small, rng=rng.child(0), dtype=np.float64)
    # nonzero biases keep ReLU inputs of masked (all-zero) patches away from the kink
    params.enc_b1 = rng.child(1).gen.normal(0, 0.5, size=params.enc_b1.shape)
    params.enc_b2 = rng.child(2).gen.normal(0, 0.5, size=params.enc_b2.shape)
    signals = rng.child(3).gen.normal(size=(batch_size, cfg_small.channels, cfg_small.input_len))
    X = np.ascontiguousarray(patch_windows(signals, cfg_small))
    masks = draw_masks(batch_size, X.shape[2], rng.child(4))

    def loss_of(p):
        lb, _ = ssl_forward_backward(X, p, masks, need_grad=False)
        return lb.recon if mode == "recon" else lb.total

    _, grads = ssl_forward_backward(X, params, masks, need_grad=True)
    names = ["recon_W"] if mode == "recon" else list(params.tensors())
    pick = rng.child(5).gen
    worst = 0.0
    for name in names:
        tensor = getattr(params, name)
        analytic = getattr(grads, name).copy()
        if corrupt is not None and corrupt[0] == name:
            flat_idx = int(np.argmax(np.abs(analytic)))
            analytic.flat[flat_idx] *= 1.0 + corrupt[1]
            candidates = [flat_idx]
        else:
            candidates = []
        checked = 0
        attempts = 0
        while checked < min(coords_per_tensor, tensor.size) and attempts < 20 * coords_per_tensor:
            attempts += 1
            i = candidates.pop() if candidates else int(pick.integers(tensor.size))
            fd = _central_diff(loss_of, params, name, i, h)
            fd_half = _central_diff(loss_of, params, name, i, h / 2)
            if _rel_err(fd, fd_half) > 1e-3:
                continue  # non-differentiable point
            worst = max(worst, _rel_err(float(analytic.flat[i]), fd))
            checked += 1
    return worst


def _central_diff(loss_of, params, name, i, h):
    t = getattr(params, name)
    old = t.flat[i]
    t.flat[i] = old + h
    up = loss_of(params)
    t.flat[i] = old - h
    down = loss_of(params)
    t.flat[i] = old
    return (up - down) / (2 * h)
