# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled solver kernels: per-ray banded elimination, depth-profile
back-substitutions, and the fused adjoint sweep.

Arithmetic mirrors the NumPy backend expression-for-expression (and the
extension is built with FP contraction off), so the two backends agree to
machine precision. Rays are independent; ``num_threads`` > 1 parallelizes
over rays with OpenMP without changing any per-ray arithmetic.
"""
import numpy as np

cimport cython
cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

name = "compiled"


cdef inline void _eliminate_ray(const double* z, Py_ssize_t S,
                                double* d0, double* dp1, double* dp2,
                                double* L1, double* L2, double* y,
                                double* dm1, double* dm2) noexcept nogil:
    cdef Py_ssize_t N = S - 1
    cdef Py_ssize_t n = 2 * N + 2
    cdef Py_ssize_t i, j, rr
    cdef double s, r, tf, tb, m1, m2
    for j in range(n):
        d0[j] = 1.0
        dm1[j] = 0.0
        dm2[j] = 0.0
        dp1[j] = 0.0
        dp2[j] = 0.0
        L1[j] = 0.0
        L2[j] = 0.0
        y[j] = 0.0
    for i in range(N):
        s = z[i] + z[i + 1]
        r = z[i + 1] - z[i]
        if r < 0.0:
            r = -r
        r = r / s
        tf = 2.0 * z[i + 1] / s
        tb = 2.0 * z[i] / s
        dm1[2 * i + 1] = -r
        dp2[2 * i + 1] = -tb
        dm2[2 * i + 2] = -tf
        dp1[2 * i + 2] = -r
    for j in range(n - 1):
        m1 = dm1[j + 1] / d0[j]
        d0[j + 1] -= m1 * dp1[j]
        dp1[j + 1] -= m1 * dp2[j]
        L1[j + 1] = m1
        if j + 2 < n:
            m2 = dm2[j + 2] / d0[j]
            dm1[j + 2] -= m2 * dp1[j]
            d0[j + 2] -= m2 * dp2[j]
            L2[j + 2] = m2
    y[0] = 1.0
    y[1] = -L1[1]
    for rr in range(2, n):
        y[rr] = -L1[rr] * y[rr - 1] - L2[rr] * y[rr - 2]


cdef inline void _profiles_ray(const double* y, const double* d0,
                               const double* dp1, const double* dp2,
                               Py_ssize_t N, double* out) noexcept nogil:
    cdef Py_ssize_t k, rr
    cdef double x1, x2, xr
    for k in range(1, N + 1):
        x1 = 0.0
        x2 = 0.0
        for rr in range(2 * k, 0, -1):
            xr = (y[rr] - dp1[rr] * x1 - dp2[rr] * x2) / d0[rr]
            x2 = x1
            x1 = xr
        out[k - 1] = x1


def depth_profiles(cnp.ndarray[cnp.float64_t, ndim=2] z2d, int num_threads=1):
    """Echo amplitude at the source per truncation depth, (R, S) -> (R, S-1)."""
    cdef Py_ssize_t R = z2d.shape[0]
    cdef Py_ssize_t S = z2d.shape[1]
    cdef Py_ssize_t N = S - 1
    cdef Py_ssize_t n = 2 * N + 2
    cdef cnp.ndarray[cnp.float64_t, ndim=2] zc = np.ascontiguousarray(z2d)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((R, N))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] work = np.empty((R, 9 * n))
    cdef const double[:, ::1] zv = zc
    cdef double[:, ::1] ov = out
    cdef double[:, ::1] wv = work
    cdef Py_ssize_t rr
    cdef double* w
    cdef int nt = num_threads if num_threads > 0 else 1
    if nt > 1:
        for rr in prange(R, nogil=True, schedule='static', num_threads=nt):
            w = &wv[rr, 0]
            _eliminate_ray(&zv[rr, 0], S, w, w + n, w + 2 * n,
                           w + 3 * n, w + 4 * n, w + 5 * n, w + 6 * n, w + 7 * n)
            _profiles_ray(w + 5 * n, w, w + n, w + 2 * n, N, &ov[rr, 0])
    else:
        with nogil:
            for rr in range(R):
                w = &wv[rr, 0]
                _eliminate_ray(&zv[rr, 0], S, w, w + n, w + 2 * n,
                               w + 3 * n, w + 4 * n, w + 5 * n, w + 6 * n, w + 7 * n)
                _profiles_ray(w + 5 * n, w, w + n, w + 2 * n, N, &ov[rr, 0])
    return out


cdef inline void _adjoint_ray(const double* z, Py_ssize_t S, const double* u,
                              double* d0, double* dp1, double* dp2,
                              double* L1, double* L2, double* y,
                              double* what, double* dz,
                              double* dm1, double* dm2) noexcept nogil:
    cdef Py_ssize_t N = S - 1
    cdef Py_ssize_t n = 2 * N + 2
    cdef Py_ssize_t k, rr, i, m
    cdef double uk, wlast, x1, x2, xr, a1, a2, ar, l1, l2
    cdef double s, sgn, ca, cb, grv, gtfv, gtbv
    # dm1/dm2 are dead after elimination and `what` owns 2n slots, so the
    # coefficient-space gradient accumulators live there without extra memory.
    cdef double* gr = dm1
    cdef double* gtf = dm2
    cdef double* gtb = what + n
    _eliminate_ray(z, S, d0, dp1, dp2, L1, L2, y, dm1, dm2)
    # shared transposed forward solve what = U^{-T} e_1
    what[0] = 0.0
    what[1] = 1.0 / d0[1]
    for rr in range(2, n):
        what[rr] = (-dp1[rr - 1] * what[rr - 1] - dp2[rr - 2] * what[rr - 2]) / d0[rr]
    for i in range(N):
        gr[i] = 0.0
        gtf[i] = 0.0
        gtb[i] = 0.0
    for k in range(1, N + 1):
        uk = u[k - 1]
        if uk == 0.0:
            continue
        m = 2 * k + 1
        wlast = -(dp1[m - 1] * what[m - 1] + dp2[m - 2] * what[m - 2])
        x1 = 0.0
        x2 = 0.0
        a1 = uk * wlast
        a2 = 0.0
        for rr in range(m - 1, 0, -1):
            xr = (y[rr] - dp1[rr] * x1 - dp2[rr] * x2) / d0[rr]
            l1 = L1[rr + 1] if rr + 1 < m else 0.0
            l2 = L2[rr + 2] if rr + 2 < m else 0.0
            ar = uk * what[rr] - l1 * a1 - l2 * a2
            if rr & 1:
                i = (rr - 1) // 2
                gtb[i] += ar * x2
                gr[i] += a1 * x2
                if rr == 1:
                    gr[0] += ar       # times x_0 = 1
                    gtf[0] += a1
            else:
                i = rr // 2
                if i < k:
                    gr[i] += a1 * xr
                    gtf[i] += a2 * xr
            x2 = x1
            x1 = xr
            a2 = a1
            a1 = ar
    for i in range(S):
        dz[i] = 0.0
    for i in range(N):
        s = z[i] + z[i + 1]
        sgn = 0.0
        if z[i + 1] > z[i]:
            sgn = 1.0
        elif z[i + 1] < z[i]:
            sgn = -1.0
        ca = 2.0 * z[i + 1] / (s * s)
        cb = 2.0 * z[i] / (s * s)
        grv = gr[i]
        gtfv = gtf[i]
        gtbv = gtb[i]
        dz[i] += grv * (-sgn * ca) + gtfv * (-ca) + gtbv * ca
        dz[i + 1] += grv * (sgn * cb) + gtfv * cb + gtbv * (-cb)


def depth_adjoint(cnp.ndarray[cnp.float64_t, ndim=2] z2d,
                  cnp.ndarray[cnp.float64_t, ndim=2] u2d, int num_threads=1):
    """Gradient of sum_k u[:, k-1] d0^(k) w.r.t. the samples, (R, S)."""
    cdef Py_ssize_t R = z2d.shape[0]
    cdef Py_ssize_t S = z2d.shape[1]
    cdef Py_ssize_t N = S - 1
    cdef Py_ssize_t n = 2 * N + 2
    if u2d.shape[0] != R or u2d.shape[1] != N:
        raise ValueError("u2d must have shape (n_rays, n_samples - 1)")
    cdef cnp.ndarray[cnp.float64_t, ndim=2] zc = np.ascontiguousarray(z2d)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] uc = np.ascontiguousarray(u2d)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dz = np.empty((R, S))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] work = np.empty((R, 10 * n))
    cdef const double[:, ::1] zv = zc
    cdef const double[:, ::1] uv = uc
    cdef double[:, ::1] gv = dz
    cdef double[:, ::1] wv = work
    cdef Py_ssize_t rr
    cdef double* w
    cdef int nt = num_threads if num_threads > 0 else 1
    if nt > 1:
        for rr in prange(R, nogil=True, schedule='static', num_threads=nt):
            w = &wv[rr, 0]
            _adjoint_ray(&zv[rr, 0], S, &uv[rr, 0], w, w + n, w + 2 * n,
                         w + 3 * n, w + 4 * n, w + 5 * n, w + 6 * n,
                         &gv[rr, 0], w + 8 * n, w + 9 * n)
    else:
        with nogil:
            for rr in range(R):
                w = &wv[rr, 0]
                _adjoint_ray(&zv[rr, 0], S, &uv[rr, 0], w, w + n, w + 2 * n,
                             w + 3 * n, w + 4 * n, w + 5 * n, w + 6 * n,
                             &gv[rr, 0], w + 8 * n, w + 9 * n)
    return dz
