"""Layered-medium wave propagation along one ray.

A ray carries N+1 impedance samples; each adjacent pair forms an interface
with reflection/transmission magnitudes

    r  = |Z2 - Z1| / (Z1 + Z2)
    tf = 2 Z2 / (Z1 + Z2)        (forward, shallow -> deep)
    tb = 2 Z1 / (Z1 + Z2)        (backward, deep -> shallow)

Forward amplitudes g_i and backward amplitudes d_i at the interfaces obey

    g_{i+1} = tf_i g_i + r_i d_{i+1}
    d_i     = r_i g_i + tb_i d_{i+1}

which, with the source condition g_0 = 1 and far-field termination d_N = 0,
forms a banded linear system A x = e_0 over x = [g_0, d_0, ..., g_N, d_N].
The echo received at the source for a medium truncated at sample depth k is
d_0 of the k-interface subsystem; the sequence over k = 1..N is the depth
profile that becomes one image column.

Reflections use magnitudes only (no phase inversion), which makes multi-bounce
amplitude sums non-passive: solutions are non-negative and depth profiles are
monotone as long as the cumulative reflection budget along the ray stays
contractive (true for tissue-like contrast), but extreme alternating stacks
can resonate. The impedance floor keeps every single r strictly below 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import get_backend
from .errors import ConfigError, SingularSystemError
from .volume import IMPEDANCE_FLOOR_MRAYL

#: Assumed uniform speed of sound in soft tissue.
SPEED_OF_SOUND_M_PER_S = 1540.0


@dataclass(frozen=True)
class ImpedanceProfile:
    """Impedance samples along one ray (MRayl), floored away from zero."""

    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim != 1 or z.size < 2:
            raise ConfigError("profile needs at least two samples")
        if not np.all(np.isfinite(z)):
            raise ConfigError("profile contains non-finite samples")
        z = np.maximum(z, IMPEDANCE_FLOOR_MRAYL)
        z.flags.writeable = False
        object.__setattr__(self, "z", z)

    @property
    def n_interfaces(self) -> int:
        return self.z.size - 1


@dataclass(frozen=True)
class InterfaceCoefficients:
    """Per-interface reflection/transmission magnitudes.

    r_fwd and r_bwd are numerically equal (the reflection magnitude is
    direction-symmetric) but kept as separate entries because they occupy
    distinct matrix slots and receive distinct adjoint sensitivities.
    """

    r_fwd: np.ndarray
    r_bwd: np.ndarray
    t_fwd: np.ndarray
    t_bwd: np.ndarray

    @property
    def n(self) -> int:
        return self.r_fwd.size


@dataclass
class WaveSystem:
    """Banded system A x = e_0 for one profile.

    ``band`` holds the five diagonals (offsets -2..+2) as rows of a (5, dim)
    array; every matrix row has at most three nonzeros. Rows 0 and dim-1 are
    identity rows enforcing g_0 = 1 and d_N = 0.
    """

    n: int
    band: np.ndarray
    rhs: np.ndarray
    coeff: InterfaceCoefficients
    solution: np.ndarray | None = field(default=None)

    @property
    def dim(self) -> int:
        return 2 * self.n + 2

    def to_dense(self) -> np.ndarray:
        n = self.dim
        A = np.zeros((n, n))
        for off, row in zip(range(-2, 3), self.band):
            for r in range(n):
                c = r + off
                if 0 <= c < n:
                    A[r, c] = row[r]
        return A


def coefficients(profile) -> InterfaceCoefficients:
    """Interface coefficients of a profile (Fresnel magnitudes)."""
    z = profile.z if isinstance(profile, ImpedanceProfile) else ImpedanceProfile(np.asarray(profile)).z
    s = z[:-1] + z[1:]
    r = np.abs(z[1:] - z[:-1]) / s
    return InterfaceCoefficients(r_fwd=r, r_bwd=r.copy(),
                                 t_fwd=2.0 * z[1:] / s, t_bwd=2.0 * z[:-1] / s)


def assemble(coeff: InterfaceCoefficients) -> WaveSystem:
    """Banded matrix and unit-source right-hand side for the coefficients."""
    N = coeff.n
    n = 2 * N + 2
    band = np.zeros((5, n))
    band[2, :] = 1.0                      # unit diagonal everywhere
    band[1, 1:2 * N:2] = -coeff.r_fwd     # row 2i+1, col 2i
    band[4, 1:2 * N:2] = -coeff.t_bwd     # row 2i+1, col 2i+3
    band[0, 2:2 * N + 1:2] = -coeff.t_fwd  # row 2i+2, col 2i
    band[3, 2:2 * N + 1:2] = -coeff.r_bwd  # row 2i+2, col 2i+3
    rhs = np.zeros(n)
    rhs[0] = 1.0
    return WaveSystem(n=N, band=band, rhs=rhs, coeff=coeff)


def _band_lu(band: np.ndarray):
    """No-pivot LU of the five-diagonal matrix; returns (d0, dp1, dp2, L1, L2).

    Stable without pivoting for physical coefficient magnitudes; callers guard
    the result with a residual check.
    """
    dm2, dm1, d0, dp1, dp2 = (band[i].copy() for i in range(5))
    n = d0.size
    tiny = 1e-12 * max(1.0, float(np.max(np.abs(band))))
    L1 = np.zeros(n)
    L2 = np.zeros(n)
    for j in range(n - 1):
        piv = d0[j]
        if abs(piv) < tiny:
            raise SingularSystemError(
                f"near-singular wave system (pivot {piv:.3e} at row {j})")
        m1 = dm1[j + 1] / piv
        d0[j + 1] -= m1 * dp1[j]
        dp1[j + 1] -= m1 * dp2[j]
        L1[j + 1] = m1
        if j + 2 < n:
            m2 = dm2[j + 2] / piv
            dm1[j + 2] -= m2 * dp1[j]
            d0[j + 2] -= m2 * dp2[j]
            L2[j + 2] = m2
    if abs(d0[n - 1]) < tiny:
        raise SingularSystemError("near-singular wave system (last pivot)")
    return d0, dp1, dp2, L1, L2


def _band_matvec(band: np.ndarray, x: np.ndarray) -> np.ndarray:
    n = x.size
    y = np.zeros(n)
    for off, row in zip(range(-2, 3), band):
        lo = max(0, -off)
        hi = min(n, n - off)
        y[lo:hi] += row[lo:hi] * x[lo + off:hi + off]
    return y


def solve(sys: WaveSystem) -> np.ndarray:
    """Solve the banded system; falls back to the dense oracle if the
    banded residual exceeds 1e-8 (guards the no-pivot factorization)."""
    d0, dp1, dp2, L1, L2 = _band_lu(sys.band)
    n = sys.dim
    b = sys.rhs
    y = np.zeros(n)
    y[0] = b[0]
    for r in range(1, n):
        y[r] = b[r] - L1[r] * y[r - 1] - (L2[r] * y[r - 2] if r >= 2 else 0.0)
    x = np.zeros(n)
    x[n - 1] = y[n - 1] / d0[n - 1]
    if n >= 2:
        x[n - 2] = (y[n - 2] - dp1[n - 2] * x[n - 1]) / d0[n - 2]
    for r in range(n - 3, -1, -1):
        x[r] = (y[r] - dp1[r] * x[r + 1] - dp2[r] * x[r + 2]) / d0[r]
    resid = np.max(np.abs(_band_matvec(sys.band, x) - b))
    scale = max(np.max(np.abs(b)), np.max(np.abs(sys.band)) * np.max(np.abs(x)))
    if not np.isfinite(resid) or resid > 1e-8 * scale:
        x = solve_dense_oracle(sys)
    sys.solution = x
    return x


def solve_dense_oracle(sys: WaveSystem) -> np.ndarray:
    """Independent route: dense matrix rebuilt straight from the coefficient
    case table, solved by LAPACK Gaussian elimination with partial pivoting."""
    c = sys.coeff
    N = c.n
    n = 2 * N + 2
    A = np.zeros((n, n))
    A[0, 0] = 1.0
    A[n - 1, n - 1] = 1.0
    for i in range(N):
        A[2 * i + 1, 2 * i] = -c.r_fwd[i]
        A[2 * i + 1, 2 * i + 1] = 1.0
        A[2 * i + 1, 2 * i + 3] = -c.t_bwd[i]
        A[2 * i + 2, 2 * i] = -c.t_fwd[i]
        A[2 * i + 2, 2 * i + 2] = 1.0
        A[2 * i + 2, 2 * i + 3] = -c.r_bwd[i]
    try:
        return np.linalg.solve(A, sys.rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"dense solve failed: {exc}") from exc


def path_sum_oracle(coeff: InterfaceCoefficients, max_bounces: int) -> float:
    """Sum of echo amplitudes over explicit bounce paths.

    ``max_bounces`` counts interface events (each reflection or transmission);
    the first direct echo uses one event. All path amplitudes are non-negative,
    so the partial sums increase monotonically toward the solved d_0 whenever
    the multi-bounce series is contractive.
    """
    if max_bounces < 1:
        raise ConfigError("max_bounces must be >= 1")
    r = np.asarray(coeff.r_fwd)
    tf = np.asarray(coeff.t_fwd)
    tb = np.asarray(coeff.t_bwd)
    N = r.size
    fwd = np.zeros(N)
    bwd = np.zeros(N)
    fwd[0] = 1.0
    out = 0.0
    for _ in range(max_bounces):
        nf = np.zeros(N)
        nb = np.zeros(N)
        out += fwd[0] * r[0] + bwd[0] * tb[0]
        if N > 1:
            nb[:-1] += fwd[1:] * r[1:]      # forward wave reflects
            nb[:-1] += bwd[1:] * tb[1:]     # backward wave transmits up
            nf[1:] += fwd[:-1] * tf[:-1]    # forward wave transmits down
            nf[1:] += bwd[:-1] * r[:-1]     # backward wave reflects down
        fwd, bwd = nf, nb
        if not fwd.any() and not bwd.any():
            break
    return float(out)


@dataclass(frozen=True)
class EchoProfile:
    """Source echo amplitude per truncation depth, d0[k-1] for k = 1..N.

    Entries are non-negative and non-decreasing whenever the bounce series is
    contractive (see module docstring).
    """

    d0: np.ndarray

    def __post_init__(self):
        d0 = np.asarray(self.d0, dtype=np.float64)
        if not np.all(np.isfinite(d0)):
            raise SingularSystemError("echo profile is not finite")
        d0.flags.writeable = False
        object.__setattr__(self, "d0", d0)

    def __len__(self) -> int:
        return self.d0.size


def depth_profile(profile: ImpedanceProfile, backend=None) -> EchoProfile:
    """Echo profile of one ray: d_0 of every truncated system."""
    kern = get_backend(backend)
    return EchoProfile(kern.depth_profiles(profile.z[None, :])[0])


def depth_profiles_batch(z2d: np.ndarray, num_threads: int = 1, backend=None) -> np.ndarray:
    """Echo profiles for a batch of rays, (R, S) samples -> (R, S-1)."""
    z2d = np.ascontiguousarray(z2d, dtype=np.float64)
    if z2d.ndim != 2 or z2d.shape[1] < 2:
        raise ConfigError("profile batch must be (n_rays, n_samples>=2)")
    kern = get_backend(backend)
    return kern.depth_profiles(np.maximum(z2d, IMPEDANCE_FLOOR_MRAYL), num_threads)


def depth_adjoint_batch(z2d: np.ndarray, u2d: np.ndarray, num_threads: int = 1,
                        backend=None) -> np.ndarray:
    """Gradient of sum_k u[:, k-1] d0^(k) w.r.t. the (floored) samples."""
    z2d = np.ascontiguousarray(z2d, dtype=np.float64)
    u2d = np.ascontiguousarray(u2d, dtype=np.float64)
    kern = get_backend(backend)
    return kern.depth_adjoint(np.maximum(z2d, IMPEDANCE_FLOOR_MRAYL), u2d, num_threads)


def time_of_flight_depth(dt: float) -> float:
    """Reflector depth (mm) from a round-trip time difference (s)."""
    if dt < 0:
        raise ConfigError("time of flight must be non-negative")
    return 0.5 * SPEED_OF_SOUND_M_PER_S * dt * 1000.0
