# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Blocked evaluation of compiled expression programs.

Programs are postfix node arrays (children precede parents, root last).
Pixels are processed in blocks of ``BLOCK``: the forward sweep runs node by
node over the whole block (recording local partials when derivatives are
wanted), and the derivative kernels follow with a reverse sweep over the
same node-major buffers. Per-pixel arithmetic is identical to the numpy
backend; only the loop order differs.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef enum:
    OP_VAR = 0
    OP_CONST = 1
    OP_ADD = 2
    OP_SUB = 3
    OP_MUL = 4
    OP_DIV = 5
    OP_EXP = 6
    OP_LOG = 7
    BLOCK = 256


cdef inline void _forward(
    const int* ops, const int* args, const int* left, const int* right, int n,
    const double* X, Py_ssize_t npix, Py_ssize_t p0, int m, const double* consts,
    double* vals, double* dl, double* dr, bint partials,
    double eps_div, double eps_log, double exp_max, double value_max,
) noexcept nogil:
    cdef int i, j, op
    cdef double a, b, v, den, da, db
    cdef double* out
    cdef const double* xa
    cdef const double* xb
    cdef const double* src
    for i in range(n):
        op = ops[i]
        out = vals + i * BLOCK
        if op == OP_VAR:
            src = X + args[i] * npix + p0
            for j in range(m):
                out[j] = src[j]
            if partials:
                for j in range(m):
                    dl[i * BLOCK + j] = 0.0
                    dr[i * BLOCK + j] = 0.0
            continue
        if op == OP_CONST:
            v = consts[args[i]]
            for j in range(m):
                out[j] = v
            if partials:
                for j in range(m):
                    dl[i * BLOCK + j] = 0.0
                    dr[i * BLOCK + j] = 0.0
            continue
        xa = vals + left[i] * BLOCK
        xb = vals + right[i] * BLOCK if right[i] >= 0 else xa
        for j in range(m):
            a = xa[j]
            da = 0.0
            db = 0.0
            if op == OP_ADD:
                v = a + xb[j]
                da = 1.0
                db = 1.0
            elif op == OP_SUB:
                v = a - xb[j]
                da = 1.0
                db = -1.0
            elif op == OP_MUL:
                b = xb[j]
                v = a * b
                da = b
                db = a
            elif op == OP_DIV:
                b = xb[j]
                if fabs(b) > eps_div:
                    den = b
                    db = -a / (b * b)
                elif b >= 0.0:
                    den = eps_div
                else:
                    den = -eps_div
                v = a / den
                da = 1.0 / den
            elif op == OP_EXP:
                if a > exp_max:
                    v = exp(exp_max)
                elif a < -exp_max:
                    v = exp(-exp_max)
                else:
                    v = exp(a)
                    da = v
            else:  # OP_LOG
                if fabs(a) > eps_log:
                    v = log(fabs(a))
                    da = 1.0 / a
                else:
                    v = log(eps_log)
            if v > value_max:
                v = value_max
                da = 0.0
                db = 0.0
            elif v < -value_max:
                v = -value_max
                da = 0.0
                db = 0.0
            out[j] = v
            if partials:
                dl[i * BLOCK + j] = da
                dr[i * BLOCK + j] = db


cdef inline void _reverse(
    const int* ops, const int* left, const int* right, int n, int m,
    const double* dl, const double* dr, double* adj, const double* seed,
) noexcept nogil:
    cdef int i, j, op
    cdef double* ai
    cdef double* al
    cdef double* ar
    for i in range(n * BLOCK):
        adj[i] = 0.0
    ai = adj + (n - 1) * BLOCK
    for j in range(m):
        ai[j] = seed[j] if seed != NULL else 1.0
    for i in range(n - 1, -1, -1):
        op = ops[i]
        if op < OP_ADD:
            continue
        ai = adj + i * BLOCK
        al = adj + left[i] * BLOCK
        for j in range(m):
            al[j] += ai[j] * dl[i * BLOCK + j]
        if op <= OP_DIV:
            ar = adj + right[i] * BLOCK
            for j in range(m):
                ar[j] += ai[j] * dr[i * BLOCK + j]


cdef double* _alloc(int n, int arrays) except NULL:
    cdef double* buf = <double*> malloc(arrays * n * BLOCK * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    return buf


def evaluate(int[::1] ops, int[::1] args, int[::1] left, int[::1] right,
             double[:, ::1] X, double[::1] consts,
             double eps_div, double eps_log, double exp_max, double value_max):
    cdef int n = ops.shape[0], j, m
    cdef Py_ssize_t npix = X.shape[1], p0 = 0
    cdef const double* cp = &consts[0] if consts.shape[0] > 0 else NULL
    out = np.empty(npix, dtype=np.float64)
    cdef double[::1] out_v = out
    cdef double* vals = _alloc(n, 1)
    cdef double* root = vals + (n - 1) * BLOCK
    try:
        with nogil:
            while p0 < npix:
                m = <int> min(<Py_ssize_t> BLOCK, npix - p0)
                _forward(&ops[0], &args[0], &left[0], &right[0], n, &X[0, 0], npix, p0, m, cp,
                         vals, NULL, NULL, False, eps_div, eps_log, exp_max, value_max)
                for j in range(m):
                    out_v[p0 + j] = root[j]
                p0 += m
    finally:
        free(vals)
    return out


def vjp(int[::1] ops, int[::1] args, int[::1] left, int[::1] right,
        double[:, ::1] X, double[::1] consts, double[::1] weights,
        double eps_div, double eps_log, double exp_max, double value_max):
    """Return sum_p weights[p] * d pred[p] / d consts."""
    cdef int n = ops.shape[0], i, j, m
    cdef Py_ssize_t npix = X.shape[1], p0 = 0
    cdef const double* cp = &consts[0] if consts.shape[0] > 0 else NULL
    grad = np.zeros(consts.shape[0], dtype=np.float64)
    cdef double[::1] g = grad
    cdef double* buf = _alloc(n, 4)
    cdef double* vals = buf
    cdef double* dl = buf + n * BLOCK
    cdef double* dr = buf + 2 * n * BLOCK
    cdef double* adj = buf + 3 * n * BLOCK
    try:
        with nogil:
            while p0 < npix:
                m = <int> min(<Py_ssize_t> BLOCK, npix - p0)
                _forward(&ops[0], &args[0], &left[0], &right[0], n, &X[0, 0], npix, p0, m, cp,
                         vals, dl, dr, True, eps_div, eps_log, exp_max, value_max)
                _reverse(&ops[0], &left[0], &right[0], n, m, dl, dr, adj, &weights[p0])
                for i in range(n):
                    if ops[i] == OP_CONST:
                        for j in range(m):
                            g[args[i]] += adj[i * BLOCK + j]
                p0 += m
    finally:
        free(buf)
    return grad


def jacobian(int[::1] ops, int[::1] args, int[::1] left, int[::1] right,
             double[:, ::1] X, double[::1] consts,
             double eps_div, double eps_log, double exp_max, double value_max):
    """Return (pred, J) with J[p, k] = d pred[p] / d consts[k]."""
    cdef int n = ops.shape[0], i, j, m
    cdef Py_ssize_t npix = X.shape[1], p0 = 0
    cdef const double* cp = &consts[0] if consts.shape[0] > 0 else NULL
    pred = np.empty(npix, dtype=np.float64)
    jac = np.zeros((npix, consts.shape[0]), dtype=np.float64)
    cdef double[::1] pv = pred
    cdef double[:, ::1] J = jac
    cdef double* buf = _alloc(n, 4)
    cdef double* vals = buf
    cdef double* dl = buf + n * BLOCK
    cdef double* dr = buf + 2 * n * BLOCK
    cdef double* adj = buf + 3 * n * BLOCK
    cdef double* root = vals + (n - 1) * BLOCK
    try:
        with nogil:
            while p0 < npix:
                m = <int> min(<Py_ssize_t> BLOCK, npix - p0)
                _forward(&ops[0], &args[0], &left[0], &right[0], n, &X[0, 0], npix, p0, m, cp,
                         vals, dl, dr, True, eps_div, eps_log, exp_max, value_max)
                _reverse(&ops[0], &left[0], &right[0], n, m, dl, dr, adj, NULL)
                for j in range(m):
                    pv[p0 + j] = root[j]
                for i in range(n):
                    if ops[i] == OP_CONST:
                        for j in range(m):
                            J[p0 + j, args[i]] += adj[i * BLOCK + j]
                p0 += m
    finally:
        free(buf)
    return pred, jac
