# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled recurrence kernels; same contract as ``_ref``.

Per-step matrix products go through BLAS dgemm; gate arithmetic runs in
plain C loops, which removes the per-step interpreter overhead that
dominates at the small hidden sizes used here.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sig(double a) nogil:
    cdef double e
    if a >= 0:
        return 1.0 / (1.0 + exp(-a))
    e = exp(a)
    return e / (1.0 + e)


cdef inline double _tanh(double a) nogil:
    # one exp instead of libm tanh, which is several times slower
    cdef double e
    if a >= 0:
        e = exp(-2.0 * a)
        return (1.0 - e) / (1.0 + e)
    e = exp(2.0 * a)
    return (e - 1.0) / (e + 1.0)


cdef void _mm(int N, int K, int M, double* A, int lda, bint ta,
              double* B, int ldb, bint tb, double* C, int ldc, double beta) nogil:
    # row-major C[N, M] = op(A)[N, K] @ op(B)[K, M] + beta * C
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    cdef double one = 1.0
    if N == 0 or M == 0:
        return
    dgemm(&cb, &ca, &M, &N, &K, &one, B, &ldb, A, &lda, &beta, C, &ldc)


def gru_forward(xw_in, U_in, h0_in):
    cdef double[:, :, ::1] xw = np.ascontiguousarray(xw_in, dtype=np.float64)
    cdef double[:, ::1] U = np.ascontiguousarray(U_in, dtype=np.float64)
    cdef int T = xw.shape[0], N = xw.shape[1], H = xw.shape[2] // 3
    hs_a = np.empty((T + 1, N, H))
    z_a = np.empty((T, N, H))
    r_a = np.empty((T, N, H))
    n_a = np.empty((T, N, H))
    cdef double[:, :, ::1] hs = hs_a, z = z_a, r = r_a, nn = n_a
    cdef double[:, ::1] g = np.empty((N, 2 * H)), gn = np.empty((N, H)), rh = np.empty((N, H))
    hs_a[0] = h0_in
    cdef int t, i, j
    cdef double zz, rr, hp, cand
    with nogil:
        for t in range(T):
            if H == 0:
                break
            _mm(N, H, 2 * H, &hs[t, 0, 0], H, False, &U[0, 0], 3 * H, False, &g[0, 0], 2 * H, 0.0)
            for i in range(N):
                for j in range(H):
                    zz = _sig(xw[t, i, j] + g[i, j])
                    rr = _sig(xw[t, i, H + j] + g[i, H + j])
                    z[t, i, j] = zz
                    r[t, i, j] = rr
                    rh[i, j] = rr * hs[t, i, j]
            _mm(N, H, H, &rh[0, 0], H, False, &U[0, 2 * H], 3 * H, False, &gn[0, 0], H, 0.0)
            for i in range(N):
                for j in range(H):
                    cand = _tanh(xw[t, i, 2 * H + j] + gn[i, j])
                    nn[t, i, j] = cand
                    hp = hs[t, i, j]
                    zz = z[t, i, j]
                    hs[t + 1, i, j] = (1.0 - zz) * hp + zz * cand
    return hs_a, z_a, r_a, n_a


def gru_backward(dhs_in, hs_in, z_in, r_in, n_in, U_in):
    cdef double[:, :, ::1] dhs = np.ascontiguousarray(dhs_in, dtype=np.float64)
    cdef double[:, :, ::1] hs = np.ascontiguousarray(hs_in, dtype=np.float64)
    cdef double[:, :, ::1] z = np.ascontiguousarray(z_in, dtype=np.float64)
    cdef double[:, :, ::1] r = np.ascontiguousarray(r_in, dtype=np.float64)
    cdef double[:, :, ::1] nn = np.ascontiguousarray(n_in, dtype=np.float64)
    cdef double[:, ::1] U = np.ascontiguousarray(U_in, dtype=np.float64)
    cdef int T = dhs.shape[0], N = dhs.shape[1], H = dhs.shape[2]
    dxw_a = np.empty((T, N, 3 * H))
    dU_a = np.zeros((H, 3 * H))
    dh_a = np.zeros((N, H))
    cdef double[:, :, ::1] dxw = dxw_a
    cdef double[:, ::1] dU = dU_a, dh = dh_a
    cdef double[:, ::1] dhp = np.empty((N, H)), rh = np.empty((N, H)), drh = np.empty((N, H))
    cdef int t, i, j
    cdef double d, zz, rr, cand, hp, dr
    with nogil:
        for t in range(T - 1, -1, -1):
            if H == 0:
                break
            for i in range(N):
                for j in range(H):
                    d = dh[i, j] + dhs[t, i, j]
                    zz = z[t, i, j]
                    cand = nn[t, i, j]
                    hp = hs[t, i, j]
                    dxw[t, i, 2 * H + j] = d * zz * (1.0 - cand * cand)
                    dxw[t, i, j] = d * (cand - hp) * zz * (1.0 - zz)
                    dhp[i, j] = d * (1.0 - zz)
                    rh[i, j] = r[t, i, j] * hp
            _mm(N, H, H, &dxw[t, 0, 2 * H], 3 * H, False, &U[0, 2 * H], 3 * H, True, &drh[0, 0], H, 0.0)
            _mm(H, N, H, &rh[0, 0], H, True, &dxw[t, 0, 2 * H], 3 * H, False, &dU[0, 2 * H], 3 * H, 1.0)
            for i in range(N):
                for j in range(H):
                    rr = r[t, i, j]
                    dr = drh[i, j] * hs[t, i, j]
                    dhp[i, j] += drh[i, j] * rr
                    dxw[t, i, H + j] = dr * rr * (1.0 - rr)
            _mm(H, N, 2 * H, &hs[t, 0, 0], H, True, &dxw[t, 0, 0], 3 * H, False, &dU[0, 0], 3 * H, 1.0)
            _mm(N, 2 * H, H, &dxw[t, 0, 0], 3 * H, False, &U[0, 0], 3 * H, True, &dhp[0, 0], H, 1.0)
            for i in range(N):
                for j in range(H):
                    dh[i, j] = dhp[i, j]
    return dxw_a, dU_a, dh_a


def lstm_forward(xw_in, U_in, h0_in, c0_in):
    cdef double[:, :, ::1] xw = np.ascontiguousarray(xw_in, dtype=np.float64)
    cdef double[:, ::1] U = np.ascontiguousarray(U_in, dtype=np.float64)
    cdef int T = xw.shape[0], N = xw.shape[1], H = xw.shape[2] // 4
    hs_a = np.empty((T + 1, N, H))
    cs_a = np.empty((T + 1, N, H))
    gates_a = np.empty((T, N, 4 * H))
    cdef double[:, :, ::1] hs = hs_a, cs = cs_a, gates = gates_a
    hs_a[0] = h0_in
    cs_a[0] = c0_in
    cdef int t, i, j
    cdef double gi, gf, gg, go, c
    with nogil:
        for t in range(T):
            if H == 0:
                break
            for i in range(N):
                for j in range(4 * H):
                    gates[t, i, j] = xw[t, i, j]
            _mm(N, H, 4 * H, &hs[t, 0, 0], H, False, &U[0, 0], 4 * H, False, &gates[t, 0, 0], 4 * H, 1.0)
            for i in range(N):
                for j in range(H):
                    gi = _sig(gates[t, i, j])
                    gf = _sig(gates[t, i, H + j])
                    gg = _tanh(gates[t, i, 2 * H + j])
                    go = _sig(gates[t, i, 3 * H + j])
                    gates[t, i, j] = gi
                    gates[t, i, H + j] = gf
                    gates[t, i, 2 * H + j] = gg
                    gates[t, i, 3 * H + j] = go
                    c = gf * cs[t, i, j] + gi * gg
                    cs[t + 1, i, j] = c
                    hs[t + 1, i, j] = go * _tanh(c)
    return hs_a, cs_a, gates_a


def lstm_backward(dhs_in, hs_in, cs_in, gates_in, U_in, dcs_in=None):
    cdef double[:, :, ::1] dhs = np.ascontiguousarray(dhs_in, dtype=np.float64)
    cdef double[:, :, ::1] hs = np.ascontiguousarray(hs_in, dtype=np.float64)
    cdef double[:, :, ::1] cs = np.ascontiguousarray(cs_in, dtype=np.float64)
    cdef double[:, :, ::1] gates = np.ascontiguousarray(gates_in, dtype=np.float64)
    cdef double[:, ::1] U = np.ascontiguousarray(U_in, dtype=np.float64)
    cdef int T = dhs.shape[0], N = dhs.shape[1], H = dhs.shape[2]
    cdef bint has_dcs = dcs_in is not None
    cdef double[:, :, ::1] dcs = np.ascontiguousarray(dcs_in if has_dcs else np.zeros((1, 1, 1)), dtype=np.float64)
    dxw_a = np.empty((T, N, 4 * H))
    dU_a = np.zeros((H, 4 * H))
    dh_a = np.zeros((N, H))
    dc_a = np.zeros((N, H))
    cdef double[:, :, ::1] dxw = dxw_a
    cdef double[:, ::1] dU = dU_a, dh = dh_a, dc = dc_a
    cdef int t, i, j
    cdef double d, gi, gf, gg, go, tc, dcc
    with nogil:
        for t in range(T - 1, -1, -1):
            if H == 0:
                break
            for i in range(N):
                for j in range(H):
                    d = dh[i, j] + dhs[t, i, j]
                    dcc = dc[i, j]
                    if has_dcs:
                        dcc = dcc + dcs[t, i, j]
                    gi = gates[t, i, j]
                    gf = gates[t, i, H + j]
                    gg = gates[t, i, 2 * H + j]
                    go = gates[t, i, 3 * H + j]
                    tc = _tanh(cs[t + 1, i, j])
                    dcc = dcc + d * go * (1.0 - tc * tc)
                    dxw[t, i, j] = dcc * gg * gi * (1.0 - gi)
                    dxw[t, i, H + j] = dcc * cs[t, i, j] * gf * (1.0 - gf)
                    dxw[t, i, 2 * H + j] = dcc * gi * (1.0 - gg * gg)
                    dxw[t, i, 3 * H + j] = d * tc * go * (1.0 - go)
                    dc[i, j] = dcc * gf
            _mm(H, N, 4 * H, &hs[t, 0, 0], H, True, &dxw[t, 0, 0], 4 * H, False, &dU[0, 0], 4 * H, 1.0)
            _mm(N, 4 * H, H, &dxw[t, 0, 0], 4 * H, False, &U[0, 0], 4 * H, True, &dh[0, 0], H, 0.0)
    return dxw_a, dU_a, dh_a, dc_a
