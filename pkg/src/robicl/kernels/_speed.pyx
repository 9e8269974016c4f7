# Fused batched kernels for the in-context margin/loss/gradient hot loops.
# Mirrors kernels._reference exactly; u arrays are the label products y*x.

import numpy as np

cimport numpy as cnp

cnp.import_array()


def gram_times_vec(const double[:, :, ::1] u_demos, vec):
    B = u_demos.shape[0]
    d = u_demos.shape[2]
    v = np.broadcast_to(np.asarray(vec, dtype=np.float64), (B, d + 1))
    out = np.zeros((B, d + 1))
    _gram_times_vec(u_demos, np.ascontiguousarray(v), out)
    return out


cdef void _gram_times_vec(const double[:, :, ::1] u, const double[:, ::1] vec,
                          double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t B = u.shape[0], N = u.shape[1], d = u.shape[2]
    cdef Py_ssize_t b, n, k
    cdef double s
    for b in range(B):
        for n in range(N):
            s = vec[b, d]
            for k in range(d):
                s += u[b, n, k] * vec[b, k]
            for k in range(d):
                out[b, k] += u[b, n, k] * s
            out[b, d] += s
        for k in range(d + 1):
            out[b, k] /= N


def attack_coefficients(const double[:, :, ::1] u_demos, const double[::1] b, const double[:, ::1] a):
    cdef Py_ssize_t B = u_demos.shape[0], d = u_demos.shape[2]
    t = np.zeros((B, d + 1))
    bb = np.ascontiguousarray(np.broadcast_to(np.asarray(b), (B, d + 1)))
    _gram_times_vec(u_demos, bb, t)
    return t @ np.asarray(a)


def batch_margins(u_demos, u_queries, b, a, double eps):
    u_demos = np.ascontiguousarray(u_demos, dtype=np.float64)
    squeeze = u_queries.ndim == 2
    if squeeze:
        u_queries = u_queries[:, None, :]
    w = attack_coefficients(u_demos, np.ascontiguousarray(b, dtype=np.float64),
                            np.ascontiguousarray(a, dtype=np.float64))
    clean = np.einsum("btd,bd->bt", u_queries, w)
    attacked = clean - eps * np.abs(w).sum(axis=1, keepdims=True)
    if squeeze:
        return clean[:, 0], attacked[:, 0]
    return clean, attacked


def attacked_loss(u_demos, u_query, b, a, eps):
    clean, attacked = batch_margins(u_demos, u_query, b, a, eps)
    return -attacked


def attacked_loss_grad(u_demos, u_query, b, a, double eps):
    u_demos = np.ascontiguousarray(u_demos, dtype=np.float64)
    u_query = np.ascontiguousarray(u_query, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t B = u_demos.shape[0], d = u_demos.shape[2]
    grad_b = np.zeros(d + 1)
    grad_a = np.zeros((d + 1, d))
    loss = _loss_grad(u_demos, u_query, b, a, eps, grad_b, grad_a)
    return loss, grad_b, grad_a


cdef double _loss_grad(const double[:, :, ::1] u, const double[:, ::1] uq,
                       const double[::1] bvec, const double[:, ::1] a, double eps,
                       double[::1] grad_b, double[:, ::1] grad_a) noexcept nogil:
    cdef Py_ssize_t B = u.shape[0], N = u.shape[1], d = u.shape[2]
    cdef Py_ssize_t b, n, i, k
    cdef double s, loss = 0.0, wk, vk, avl
    cdef double[::1] t, av, v
    with gil:
        t = np.empty(d + 1)
        av = np.empty(d + 1)
        v = np.empty(d)
    for b in range(B):
        # t = G bvec
        for i in range(d + 1):
            t[i] = 0.0
        for n in range(N):
            s = bvec[d]
            for k in range(d):
                s += u[b, n, k] * bvec[k]
            for k in range(d):
                t[k] += u[b, n, k] * s
            t[d] += s
        for i in range(d + 1):
            t[i] /= N
        # w = a^T t, frozen attack sign, v = u_q - eps*sgn(w)
        for k in range(d):
            wk = 0.0
            for i in range(d + 1):
                wk += t[i] * a[i, k]
            vk = uq[b, k] - (eps if wk >= 0.0 else -eps)
            v[k] = vk
            for i in range(d + 1):
                grad_a[i, k] -= t[i] * vk
        # av = A v; loss contribution -t.av
        for i in range(d + 1):
            avl = 0.0
            for k in range(d):
                avl += a[i, k] * v[k]
            av[i] = avl
            loss -= t[i] * avl
        # grad_b -= G av
        for n in range(N):
            s = av[d]
            for k in range(d):
                s += u[b, n, k] * av[k]
            for k in range(d):
                grad_b[k] -= u[b, n, k] * s / N
            grad_b[d] -= s / N
    for i in range(d + 1):
        grad_b[i] /= B
        for k in range(d):
            grad_a[i, k] /= B
    return loss / B
