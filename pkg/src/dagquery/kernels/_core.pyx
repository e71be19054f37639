# cython: cdivision=True, initializedcheck=False
"""Compiled implementations of the hot kernels.

Same signatures and math as `np_backend`; float32 and float64 supported
via fused types.  Loops are serial, so results are deterministic for a
fixed input regardless of machine load.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, expf, log, logf, sqrt, sqrtf, tanh, tanhf

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_A = 0.044715


def _as2d(arr, dtype):
    a = np.ascontiguousarray(arr, dtype=dtype)
    return a.reshape(-1, a.shape[-1])


def _check_dtype(arr):
    if arr.dtype not in (np.float32, np.float64):
        raise TypeError(f"expected float32 or float64, got {arr.dtype}")
    return arr.dtype


@cython.boundscheck(False)
@cython.wraparound(False)
def _masked_softmax_impl(real[:, ::1] s, const unsigned char[:, ::1] allowed,
                         real[:, ::1] out):
    cdef Py_ssize_t n = s.shape[0], c = s.shape[1]
    cdef Py_ssize_t i, j
    cdef double m, z, e, inv
    cdef float mf, zf, ef, invf
    with nogil:
        if real is float:
            for i in range(n):
                mf = <float> -3e38
                for j in range(c):
                    if allowed[i, j] and s[i, j] > mf:
                        mf = s[i, j]
                zf = 0.0
                for j in range(c):
                    if allowed[i, j]:
                        ef = expf(s[i, j] - mf)
                        zf += ef
                        out[i, j] = ef
                    else:
                        out[i, j] = 0.0
                if zf == 0.0:
                    continue  # fully-masked row stays all zero
                invf = <float> 1.0 / zf
                for j in range(c):
                    out[i, j] = out[i, j] * invf
        else:
            for i in range(n):
                m = -1e300
                for j in range(c):
                    if allowed[i, j] and s[i, j] > m:
                        m = s[i, j]
                z = 0.0
                for j in range(c):
                    if allowed[i, j]:
                        e = exp(<double> s[i, j] - m)
                        z += e
                        out[i, j] = <real> e
                    else:
                        out[i, j] = 0.0
                if z == 0.0:
                    continue  # fully-masked row stays all zero
                inv = 1.0 / z
                for j in range(c):
                    out[i, j] = <real> (<double> out[i, j] * inv)


def masked_softmax(scores, allowed):
    scores = np.ascontiguousarray(scores)
    dtype = _check_dtype(scores)
    allowed_b = np.ascontiguousarray(
        np.broadcast_to(allowed, scores.shape), dtype=np.uint8
    )
    s2 = scores.reshape(-1, scores.shape[-1])
    a2 = allowed_b.reshape(-1, scores.shape[-1])
    out = np.empty_like(s2)
    _masked_softmax_impl(s2, a2, out)
    return out.reshape(scores.shape)


@cython.boundscheck(False)
@cython.wraparound(False)
def _softmax_grad_impl(real[:, ::1] p, real[:, ::1] dp, real[:, ::1] out):
    cdef Py_ssize_t n = p.shape[0], c = p.shape[1]
    cdef Py_ssize_t i, j
    cdef double inner
    with nogil:
        for i in range(n):
            inner = 0.0
            for j in range(c):
                inner += <double> p[i, j] * <double> dp[i, j]
            for j in range(c):
                out[i, j] = <real> (<double> p[i, j] * (<double> dp[i, j] - inner))


def softmax_grad(probs, dprobs):
    probs = np.ascontiguousarray(probs)
    dtype = _check_dtype(probs)
    p2 = probs.reshape(-1, probs.shape[-1])
    d2 = _as2d(dprobs, dtype)
    out = np.empty_like(p2)
    _softmax_grad_impl(p2, d2, out)
    return out.reshape(probs.shape)


@cython.boundscheck(False)
@cython.wraparound(False)
def _layer_norm_impl(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps,
                     real[:, ::1] y, real[:, ::1] xhat, real[::1] rstd):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mean, var, diff, r
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                diff = <double> x[i, j] - mean
                var += diff * diff
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real> r
            for j in range(d):
                xhat[i, j] = <real> ((<double> x[i, j] - mean) * r)
                y[i, j] = <real> (<double> xhat[i, j] * <double> gain[j] + <double> bias[j])


def layer_norm(x, gain, bias, eps):
    x = np.ascontiguousarray(x)
    dtype = _check_dtype(x)
    x2 = x.reshape(-1, x.shape[-1])
    gain = np.ascontiguousarray(gain, dtype=dtype)
    bias = np.ascontiguousarray(bias, dtype=dtype)
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    rstd = np.empty(x2.shape[0], dtype=dtype)
    _layer_norm_impl(x2, gain, bias, float(eps), y, xhat, rstd)
    return (
        y.reshape(x.shape),
        xhat.reshape(x.shape),
        rstd.reshape(x.shape[:-1]),
    )


@cython.boundscheck(False)
@cython.wraparound(False)
def _layer_norm_grad_impl(real[:, ::1] dy, real[:, ::1] xhat, real[::1] rstd,
                          real[::1] gain, real[:, ::1] dx,
                          double[::1] dgain, double[::1] dbias):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1]
    cdef Py_ssize_t i, j
    cdef double mean_dxhat, mean_dxhat_xhat, dxh
    with nogil:
        for i in range(n):
            mean_dxhat = 0.0
            mean_dxhat_xhat = 0.0
            for j in range(d):
                dxh = <double> dy[i, j] * <double> gain[j]
                mean_dxhat += dxh
                mean_dxhat_xhat += dxh * <double> xhat[i, j]
                dgain[j] += <double> dy[i, j] * <double> xhat[i, j]
                dbias[j] += <double> dy[i, j]
            mean_dxhat /= d
            mean_dxhat_xhat /= d
            for j in range(d):
                dxh = <double> dy[i, j] * <double> gain[j]
                dx[i, j] = <real> ((dxh - mean_dxhat
                                    - <double> xhat[i, j] * mean_dxhat_xhat)
                                   * <double> rstd[i])


def layer_norm_grad(dy, xhat, rstd, gain):
    dy = np.ascontiguousarray(dy)
    dtype = _check_dtype(dy)
    dy2 = dy.reshape(-1, dy.shape[-1])
    xhat2 = _as2d(xhat, dtype)
    rstd1 = np.ascontiguousarray(rstd, dtype=dtype).reshape(-1)
    gain = np.ascontiguousarray(gain, dtype=dtype)
    dx = np.empty_like(dy2)
    dgain = np.zeros(dy2.shape[1], dtype=np.float64)
    dbias = np.zeros(dy2.shape[1], dtype=np.float64)
    _layer_norm_grad_impl(dy2, xhat2, rstd1, gain, dx, dgain, dbias)
    return dx.reshape(dy.shape), dgain.astype(dtype), dbias.astype(dtype)


@cython.boundscheck(False)
@cython.wraparound(False)
def _gelu_impl(real[::1] x, real[::1] y):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i
    cdef double v
    cdef float vf, cf = <float> GELU_C, af = <float> GELU_A
    with nogil:
        if real is float:
            for i in range(n):
                vf = x[i]
                y[i] = <float> 0.5 * vf * (<float> 1.0 + tanhf(cf * (vf + af * vf * vf * vf)))
        else:
            for i in range(n):
                v = <double> x[i]
                y[i] = <real> (0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v))))


def gelu(x):
    x = np.ascontiguousarray(x)
    _check_dtype(x)
    flat = x.reshape(-1)
    y = np.empty_like(flat)
    _gelu_impl(flat, y)
    return y.reshape(x.shape)


@cython.boundscheck(False)
@cython.wraparound(False)
def _gelu_grad_impl(real[::1] x, real[::1] dy, real[::1] dx):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i
    cdef double v, t, dt
    cdef float vf, tf, dtf, cf = <float> GELU_C, af = <float> GELU_A
    with nogil:
        if real is float:
            for i in range(n):
                vf = x[i]
                tf = tanhf(cf * (vf + af * vf * vf * vf))
                dtf = (<float> 1.0 - tf * tf) * cf * (<float> 1.0 + <float> 3.0 * af * vf * vf)
                dx[i] = dy[i] * (<float> 0.5 * (<float> 1.0 + tf) + <float> 0.5 * vf * dtf)
        else:
            for i in range(n):
                v = <double> x[i]
                t = tanh(GELU_C * (v + GELU_A * v * v * v))
                dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
                dx[i] = <real> (<double> dy[i] * (0.5 * (1.0 + t) + 0.5 * v * dt))


def gelu_grad(x, dy):
    x = np.ascontiguousarray(x)
    dtype = _check_dtype(x)
    flat = x.reshape(-1)
    dyf = np.ascontiguousarray(dy, dtype=dtype).reshape(-1)
    dx = np.empty_like(flat)
    _gelu_grad_impl(flat, dyf, dx)
    return dx.reshape(x.shape)


@cython.boundscheck(False)
@cython.wraparound(False)
def _softmax_xent_impl(real[:, ::1] logits, const cnp.int64_t[::1] labels,
                       real[::1] losses, real[:, ::1] dlogits):
    cdef Py_ssize_t n = logits.shape[0], c = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef cnp.int64_t lab
    cdef double m, z, inv, e
    cdef float mf, zf, ef, invf
    with nogil:
        if real is float:
            for i in range(n):
                lab = labels[i]
                mf = <float> -3e38
                for j in range(c):
                    if logits[i, j] > mf:
                        mf = logits[i, j]
                zf = 0.0
                for j in range(c):
                    ef = expf(logits[i, j] - mf)
                    zf += ef
                    dlogits[i, j] = ef
                losses[i] = -(logits[i, lab] - mf - logf(zf))
                invf = <float> 1.0 / zf
                for j in range(c):
                    dlogits[i, j] = dlogits[i, j] * invf
                dlogits[i, lab] -= <real> 1.0
        else:
            for i in range(n):
                lab = labels[i]
                m = -1e300
                for j in range(c):
                    if logits[i, j] > m:
                        m = logits[i, j]
                z = 0.0
                for j in range(c):
                    e = exp(<double> logits[i, j] - m)
                    z += e
                    dlogits[i, j] = <real> e
                losses[i] = <real> (-(<double> logits[i, lab] - m - log(z)))
                inv = 1.0 / z
                for j in range(c):
                    dlogits[i, j] = <real> (<double> dlogits[i, j] * inv)
                dlogits[i, lab] -= <real> 1.0


def softmax_xent(logits, labels):
    logits = np.ascontiguousarray(logits)
    dtype = _check_dtype(logits)
    labels64 = np.ascontiguousarray(labels, dtype=np.int64)
    if labels64.shape[0] != logits.shape[0]:
        raise ValueError("labels length does not match logits rows")
    if labels64.size and (labels64.min() < 0 or labels64.max() >= logits.shape[1]):
        raise ValueError("label outside logit range")
    losses = np.empty(logits.shape[0], dtype=dtype)
    dlogits = np.empty_like(logits)
    _softmax_xent_impl(logits, labels64, losses, dlogits)
    return losses, dlogits


@cython.boundscheck(False)
@cython.wraparound(False)
def _adam_impl(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
               double c1, double c2, double lr, double beta1, double beta2,
               double eps):
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef double mi, vi
    cdef float mif, vif
    cdef float b1f = <float> beta1, b2f = <float> beta2, lrf = <float> lr
    cdef float c1f = <float> c1, c2f = <float> c2, epsf = <float> eps
    cdef float o1f = <float> (1.0 - beta1), o2f = <float> (1.0 - beta2)
    with nogil:
        if real is float:
            for i in range(n):
                mif = b1f * m[i] + o1f * g[i]
                vif = b2f * v[i] + o2f * g[i] * g[i]
                m[i] = mif
                v[i] = vif
                p[i] = p[i] - lrf * (mif / c1f) / (sqrtf(vif / c2f) + epsf)
        else:
            for i in range(n):
                mi = beta1 * <double> m[i] + (1.0 - beta1) * <double> g[i]
                vi = beta2 * <double> v[i] + (1.0 - beta2) * <double> g[i] * <double> g[i]
                m[i] = <real> mi
                v[i] = <real> vi
                p[i] = <real> (<double> p[i] - lr * (mi / c1) / (sqrt(vi / c2) + eps))


def adam_update(param, grad, m, v, step, lr, beta1, beta2, eps):
    dtype = _check_dtype(param)
    if not param.flags["C_CONTIGUOUS"]:
        raise ValueError("param must be C-contiguous for in-place update")
    g = np.ascontiguousarray(grad, dtype=dtype)
    c1 = 1.0 - beta1 ** int(step)
    c2 = 1.0 - beta2 ** int(step)
    _adam_impl(param.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
               c1, c2, float(lr), float(beta1), float(beta2), float(eps))


@cython.boundscheck(False)
@cython.wraparound(False)
def _add_rows_impl(real[:, ::1] acc, const cnp.int64_t[::1] idx, real[:, ::1] rows):
    cdef Py_ssize_t n = idx.shape[0], d = acc.shape[1]
    cdef Py_ssize_t i, j
    cdef cnp.int64_t r
    with nogil:
        for i in range(n):
            r = idx[i]
            for j in range(d):
                acc[r, j] += rows[i, j]


def add_rows(acc, idx, rows):
    dtype = _check_dtype(acc)
    if not acc.flags["C_CONTIGUOUS"]:
        raise ValueError("acc must be C-contiguous for in-place accumulation")
    idx64 = np.ascontiguousarray(idx, dtype=np.int64)
    rows_c = np.ascontiguousarray(rows, dtype=dtype)
    if idx64.size and (idx64.min() < 0 or idx64.max() >= acc.shape[0]):
        raise ValueError("row index out of range")
    _add_rows_impl(acc, idx64, rows_c.reshape(idx64.shape[0], -1))
