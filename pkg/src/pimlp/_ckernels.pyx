# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_kernels_py``.

Same signatures and semantics; float32 and float64 share one fused
implementation. Reductions accumulate in double.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, log, sqrt, floor

cnp.import_array()


cdef extern from "_fastexp.h":
    float pimlp_expf_neg(float x) nogil


cdef inline double _exp(floating x) noexcept nogil:
    # x <= 0 here (max-shifted); float32 uses the vectorizable polynomial
    if floating is float:
        return pimlp_expf_neg(x)
    else:
        return exp(x)


def _relu_flat(floating[::1] x, floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        out[i] = x[i] if x[i] > 0 else 0


def _relu_backward_flat(floating[::1] g, floating[::1] pre, floating[::1] out):
    cdef Py_ssize_t i, n = g.shape[0]
    for i in range(n):
        out[i] = g[i] if pre[i] > 0 else 0


def _maxpool_pairs(floating[:, :, ::1] x, floating[:, :, ::1] out, cnp.int64_t[:, :, ::1] idx):
    cdef Py_ssize_t r, j, k
    cdef Py_ssize_t R = x.shape[0], N = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t half = N // 2
    cdef floating a, b
    for r in range(R):
        for j in range(half):
            for k in range(D):
                a = x[r, 2 * j, k]
                b = x[r, 2 * j + 1, k]
                if b > a:
                    out[r, j, k] = b
                    idx[r, j, k] = 2 * j + 1
                else:
                    out[r, j, k] = a
                    idx[r, j, k] = 2 * j
        if N % 2:
            for k in range(D):
                out[r, half, k] = x[r, N - 1, k]
                idx[r, half, k] = N - 1


def _pool_scatter(floating[:, :, ::1] gout, cnp.int64_t[:, :, ::1] idx, floating[:, :, ::1] gin):
    cdef Py_ssize_t r, j, k
    cdef Py_ssize_t R = gout.shape[0], M = gout.shape[1], D = gout.shape[2]
    for r in range(R):
        for j in range(M):
            for k in range(D):
                gin[r, idx[r, j, k], k] += gout[r, j, k]


def _global_maxpool(floating[:, :, ::1] x, floating[:, ::1] out, cnp.int64_t[:, ::1] idx):
    cdef Py_ssize_t r, n, k
    cdef Py_ssize_t R = x.shape[0], N = x.shape[1], D = x.shape[2]
    for r in range(R):
        for k in range(D):
            out[r, k] = x[r, 0, k]
            idx[r, k] = 0
        for n in range(1, N):
            for k in range(D):
                if x[r, n, k] > out[r, k]:
                    out[r, k] = x[r, n, k]
                    idx[r, k] = n


def _global_scatter(floating[:, ::1] gout, cnp.int64_t[:, ::1] idx, floating[:, :, ::1] gin):
    cdef Py_ssize_t r, k
    cdef Py_ssize_t R = gout.shape[0], D = gout.shape[1]
    for r in range(R):
        for k in range(D):
            gin[r, idx[r, k], k] += gout[r, k]


def _softmax_rows(floating[:, ::1] s, floating[:, ::1] out):
    cdef Py_ssize_t r, k
    cdef Py_ssize_t R = s.shape[0], K = s.shape[1]
    cdef floating mx
    cdef double tot, inv
    cdef floating* row
    cdef floating* o
    for r in range(R):
        row = &s[r, 0]
        o = &out[r, 0]
        mx = row[0]
        for k in range(1, K):
            if row[k] > mx:
                mx = row[k]
        for k in range(K):
            o[k] = <floating>_exp(<floating>(row[k] - mx))
        tot = 0.0
        for k in range(K):
            tot += o[k]
        inv = 1.0 / tot
        for k in range(K):
            o[k] = <floating>(o[k] * inv)


def _contrastive_nll(floating[:, :, ::1] sim, Py_ssize_t half, floating[::1] loss, floating[:, :, ::1] dsim):
    cdef Py_ssize_t r, n, s, partner
    cdef Py_ssize_t R = sim.shape[0], M = sim.shape[1]
    cdef double acc, lse, inv
    cdef floating mx, tot
    cdef floating* row
    cdef floating* out
    for r in range(R):
        acc = 0.0
        for n in range(M):
            partner = (n + half) % M
            row = &sim[r, n, 0]
            out = &dsim[r, n, 0]
            mx = row[1] if n == 0 else row[0]
            for s in range(M):
                if s != n and row[s] > mx:
                    mx = row[s]
            for s in range(M):
                out[s] = <floating>_exp(<floating>(row[s] - mx))
            out[n] = 0
            tot = 0
            for s in range(M):
                tot = tot + out[s]
            lse = mx + log(<double>tot)
            acc += lse - row[partner]
            inv = 1.0 / tot
            for s in range(M):
                out[s] = <floating>(out[s] * inv)
            out[partner] -= 1
        loss[r] = <floating>acc


def _instance_norm(floating[:, ::1] x, double eps, floating[:, ::1] out):
    cdef Py_ssize_t r, t
    cdef Py_ssize_t R = x.shape[0], L = x.shape[1]
    cdef double mean, var, d, scale
    for r in range(R):
        mean = 0.0
        for t in range(L):
            mean += x[r, t]
        mean /= L
        var = 0.0
        for t in range(L):
            d = x[r, t] - mean
            var += d * d
        var /= L
        scale = sqrt(var + eps)
        for t in range(L):
            if scale > 0:
                out[r, t] = <floating>((x[r, t] - mean) / scale)
            else:
                out[r, t] = 0


def _upsample_linear(floating[:, ::1] x, floating[:, ::1] out):
    cdef Py_ssize_t r, j, lo
    cdef Py_ssize_t R = x.shape[0], N = x.shape[1], L = out.shape[1]
    cdef double pos, frac
    for j in range(L):
        pos = j * <double>(N - 1) / <double>(L - 1)
        lo = <Py_ssize_t>floor(pos)
        if lo > N - 2:
            lo = N - 2
        frac = pos - lo
        for r in range(R):
            out[r, j] = <floating>(x[r, lo] * (1.0 - frac) + x[r, lo + 1] * frac)
