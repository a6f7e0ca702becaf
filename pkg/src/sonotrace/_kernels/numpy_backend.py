"""Vectorized NumPy implementation of the hot solver kernels.

Fallback twin of the compiled core: identical arithmetic, vectorized across
rays (and across truncation depths in the backward sweeps) instead of compiled
loops. ``num_threads`` is accepted for interface parity and ignored; results
do not depend on it.

Wave-system layout per ray (N interfaces, n = 2N+2 unknowns
[g_0, d_0, ..., g_N, d_N]):

* row 0 and row n-1 are identity rows (unit source g_0 = 1, termination
  d_N = 0)
* row 2i+1:  -r[i] at col 2i, 1 on the diagonal, -tb[i] at col 2i+3
* row 2i+2:  -tf[i] at col 2i, 1 on the diagonal, -r[i] at col 2i+3

The matrix has lower/upper bandwidth 2 and factors stably without pivoting
(unit diagonal, off-diagonal magnitudes < 1 in the physical regime). The
truncated system at depth k shares rows 0..2k with the full system, so one
elimination serves every depth: the per-depth solves reuse the shared LU
prefix and differ only in the termination row, which is arithmetically
identical to eliminating each truncated system independently.
"""
from __future__ import annotations

import numpy as np

name = "numpy"


def interface_coefficients(z2d: np.ndarray):
    """Reflection/transmission magnitudes per interface, (R, N) each."""
    z2d = np.asarray(z2d, dtype=np.float64)
    s = z2d[:, :-1] + z2d[:, 1:]
    r = np.abs(z2d[:, 1:] - z2d[:, :-1]) / s
    tf = 2.0 * z2d[:, 1:] / s
    tb = 2.0 * z2d[:, :-1] / s
    return r, tf, tb


def _eliminate(r, tf, tb):
    """Banded LU (no pivoting) of every ray's full system plus the forward
    substitution of the unit-source rhs. Returns U diagonals, L multipliers,
    and y with L y = e_0."""
    R, N = r.shape
    n = 2 * N + 2
    d0 = np.ones((R, n))
    dm1 = np.zeros((R, n))
    dm2 = np.zeros((R, n))
    dp1 = np.zeros((R, n))
    dp2 = np.zeros((R, n))
    dm1[:, 1:2 * N:2] = -r
    dp2[:, 1:2 * N:2] = -tb
    dm2[:, 2:2 * N + 1:2] = -tf
    dp1[:, 2:2 * N + 1:2] = -r
    L1 = np.zeros((R, n))
    L2 = np.zeros((R, n))
    for j in range(n - 1):
        m1 = dm1[:, j + 1] / d0[:, j]
        d0[:, j + 1] -= m1 * dp1[:, j]
        dp1[:, j + 1] -= m1 * dp2[:, j]
        L1[:, j + 1] = m1
        if j + 2 < n:
            m2 = dm2[:, j + 2] / d0[:, j]
            dm1[:, j + 2] -= m2 * dp1[:, j]
            d0[:, j + 2] -= m2 * dp2[:, j]
            L2[:, j + 2] = m2
    y = np.zeros((R, n))
    y[:, 0] = 1.0
    y[:, 1] = -L1[:, 1]
    for rr in range(2, n):
        y[:, rr] = -L1[:, rr] * y[:, rr - 1] - L2[:, rr] * y[:, rr - 2]
    return (d0, dp1, dp2, L1, L2), y


def depth_profiles(z2d: np.ndarray, num_threads: int = 1) -> np.ndarray:
    """Echo amplitude at the source for every truncation depth, (R, N).

    Column k-1 is d_0 of the wave system truncated at sample depth k.
    """
    z2d = np.asarray(z2d, dtype=np.float64)
    R, S = z2d.shape
    N = S - 1
    r, tf, tb = interface_coefficients(z2d)
    (d0, dp1, dp2, L1, L2), y = _eliminate(r, tf, tb)
    # Backward sweep over rows, all truncation depths in flight at once.
    # Column k-1 tracks x^{(k)}; it activates at row 2k with x_{2k+1} = 0.
    X1 = np.zeros((R, N))
    X2 = np.zeros((R, N))
    out = np.empty((R, N))
    for rr in range(2 * N, 0, -1):
        s0 = (rr + 1) // 2 - 1  # first active column
        if rr % 2 == 0:
            X1[:, s0] = 0.0
            X2[:, s0] = 0.0
        xr = (y[:, rr:rr + 1] - dp1[:, rr:rr + 1] * X1[:, s0:]
              - dp2[:, rr:rr + 1] * X2[:, s0:]) / d0[:, rr:rr + 1]
        X2[:, s0:] = X1[:, s0:]
        X1[:, s0:] = xr
        if rr == 1:
            out[:] = X1
    return out


def depth_adjoint(z2d: np.ndarray, u2d: np.ndarray, num_threads: int = 1) -> np.ndarray:
    """Gradient of L = sum_k u[:, k-1] * d0^(k) w.r.t. the impedance samples.

    One transposed solve per truncated system, reusing the shared LU. Costs a
    small constant times one depth-profile pass.
    """
    z2d = np.asarray(z2d, dtype=np.float64)
    u2d = np.asarray(u2d, dtype=np.float64)
    R, S = z2d.shape
    N = S - 1
    if u2d.shape != (R, N):
        raise ValueError(f"u shape {u2d.shape} != {(R, N)}")
    r, tf, tb = interface_coefficients(z2d)
    (d0, dp1, dp2, L1, L2), y = _eliminate(r, tf, tb)
    n = 2 * N + 2
    # Shared transposed forward solve: what = U^{-T} e_1 on the full system.
    what = np.zeros((R, n))
    what[:, 1] = 1.0 / d0[:, 1]
    for rr in range(2, n):
        what[:, rr] = (-dp1[:, rr - 1] * what[:, rr - 1]
                       - dp2[:, rr - 2] * what[:, rr - 2]) / d0[:, rr]
    # Truncated systems replace row m = 2k+1 by an identity row, so only the
    # last entry of each truncated transposed solve differs from `what`.
    ks = np.arange(1, N + 1)
    wlast = -(dp1[:, 2 * ks] * what[:, 2 * ks] + dp2[:, 2 * ks - 1] * what[:, 2 * ks - 1])

    gr = np.zeros((R, N))
    gtf = np.zeros((R, N))
    gtb = np.zeros((R, N))

    nz_cols = np.flatnonzero(np.any(u2d != 0.0, axis=0))
    if nz_cols.size == 0:
        return np.zeros((R, S))
    if nz_cols.size <= 8:
        _adjoint_per_depth(nz_cols + 1, u2d, y, what, wlast,
                           d0, dp1, dp2, L1, L2, gr, gtf, gtb)
    else:
        _adjoint_sweep(u2d, y, what, wlast, d0, dp1, dp2, L1, L2, gr, gtf, gtb)

    # Chain rule through the interface coefficient formulas.
    s = z2d[:, :-1] + z2d[:, 1:]
    sgn = np.sign(z2d[:, 1:] - z2d[:, :-1])  # subgradient 0 at exact ties
    a = 2.0 * z2d[:, 1:] / s ** 2
    b = 2.0 * z2d[:, :-1] / s ** 2
    dz = np.zeros((R, S))
    dz[:, :-1] += gr * (-sgn * a) + gtf * (-a) + gtb * a
    dz[:, 1:] += gr * (sgn * b) + gtf * b + gtb * (-b)
    return dz


def _adjoint_per_depth(ks, u2d, y, what, wlast, d0, dp1, dp2, L1, L2, gr, gtf, gtb):
    """Loop over the few truncation depths with nonzero weight."""
    R = u2d.shape[0]
    for k in ks:
        uk = u2d[:, k - 1]
        m = 2 * k + 1
        x = np.zeros((R, m + 3))
        for rr in range(m - 1, -1, -1):
            x[:, rr] = (y[:, rr] - dp1[:, rr] * x[:, rr + 1]
                        - dp2[:, rr] * x[:, rr + 2]) / d0[:, rr]
        lam = np.zeros((R, m + 3))
        lam[:, m] = uk * wlast[:, k - 1]
        for rr in range(m - 1, 0, -1):
            l1 = L1[:, rr + 1] if rr + 1 < m else 0.0
            l2 = L2[:, rr + 2] if rr + 2 < m else 0.0
            lam[:, rr] = uk * what[:, rr] - l1 * lam[:, rr + 1] - l2 * lam[:, rr + 2]
        for i in range(k):
            gr[:, i] += lam[:, 2 * i + 1] * x[:, 2 * i] + lam[:, 2 * i + 2] * x[:, 2 * i + 3]
            gtf[:, i] += lam[:, 2 * i + 2] * x[:, 2 * i]
            gtb[:, i] += lam[:, 2 * i + 1] * x[:, 2 * i + 3]


def _adjoint_sweep(u2d, y, what, wlast, d0, dp1, dp2, L1, L2, gr, gtf, gtb):
    """All truncation depths in one backward sweep (dense weight case)."""
    R, N = u2d.shape
    X1 = np.zeros((R, N))
    X2 = np.zeros((R, N))
    A1 = np.zeros((R, N))  # lambda at row rr+1
    A2 = np.zeros((R, N))  # lambda at row rr+2
    for rr in range(2 * N, 0, -1):
        s0 = (rr + 1) // 2 - 1
        if rr % 2 == 0:
            # column s0 (truncation k = rr/2) activates: x_{2k+1} = 0,
            # lambda_{2k+1} = u_k * wlast_k
            X1[:, s0] = 0.0
            X2[:, s0] = 0.0
            A1[:, s0] = u2d[:, s0] * wlast[:, s0]
            A2[:, s0] = 0.0
        xr = (y[:, rr:rr + 1] - dp1[:, rr:rr + 1] * X1[:, s0:]
              - dp2[:, rr:rr + 1] * X2[:, s0:]) / d0[:, rr:rr + 1]
        lam = (u2d[:, s0:] * what[:, rr:rr + 1]
               - L1[:, rr + 1:rr + 2] * A1[:, s0:]
               - L2[:, rr + 2:rr + 3] * A2[:, s0:]) if rr + 2 < y.shape[1] else (
            u2d[:, s0:] * what[:, rr:rr + 1] - L1[:, rr + 1:rr + 2] * A1[:, s0:])
        # fix the column whose truncated row m coincides with rr+1 or rr+2
        if rr % 2 == 0:
            # column s0 has m = rr+1: truncated multipliers at row m are zero
            lam[:, 0] = u2d[:, s0] * what[:, rr]
        else:
            # column (rr-1)//2 has m = rr+2
            c = (rr - 1) // 2 - s0
            if 0 <= c < lam.shape[1]:
                lam[:, c] = (u2d[:, s0 + c] * what[:, rr]
                             - L1[:, rr + 1] * A1[:, s0 + c])
        # gathers at this row (active columns are exactly the truncations
        # containing the interfaces in question)
        if rr % 2 == 1:
            i = (rr - 1) // 2
            # rows (2i+1, 2i+3): lambda current, x two rows below
            gtb[:, i] += np.sum(lam * X2[:, s0:], axis=1)
            gr[:, i] += np.sum(A1[:, s0:] * X2[:, s0:], axis=1)
            if rr == 1:
                gr[:, 0] += np.sum(lam, axis=1)       # x_0 = 1 exactly
                gtf[:, 0] += np.sum(A1[:, s0:], axis=1)
        else:
            i = rr // 2
            if i < N:
                # interface i lives in truncations k >= i+1 -> skip column s0
                gr[:, i] += np.sum(A1[:, s0 + 1:] * xr[:, 1:], axis=1)
                gtf[:, i] += np.sum(A2[:, s0 + 1:] * xr[:, 1:], axis=1)
        X2[:, s0:] = X1[:, s0:]
        X1[:, s0:] = xr
        A2[:, s0:] = A1[:, s0:]
        A1[:, s0:] = lam
