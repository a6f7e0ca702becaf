"""Shared phantoms and profile generators for the test suite."""
import numpy as np

from sonotrace import VolumeGrid, VolumeKind


def tissue_profiles(rng, n_profiles, n_samples, base=(1.3, 1.8), ratio=1.5,
                    max_jumps=4, texture=0.01):
    """Sparse-interface random profiles in the contractive regime.

    Piecewise-constant tissue blocks (a few jumps of bounded contrast) plus
    mild log-normal micro-texture: the regime where the magnitude-reflection
    bounce series converges and echo profiles are provably monotone.
    """
    S = n_samples
    z = np.full((n_profiles, S), rng.uniform(base[0], base[1], n_profiles)[:, None])
    for p in range(n_profiles):
        njump = rng.integers(0, max_jumps + 1)
        if njump:
            locs = rng.choice(np.arange(1, S), size=min(njump, S - 1), replace=False)
            for loc in np.sort(locs):
                z[p, loc:] = z[p, loc] * rng.uniform(1.0 / ratio, ratio)
    if texture:
        z *= np.exp(rng.normal(0.0, texture, (n_profiles, S)))
    return z


def smooth_phantom(n=32, spacing=2.0, seed=7, amp=0.12, base=1.5):
    """Smooth low-frequency impedance field with one soft blob."""
    rng = np.random.default_rng(seed)
    ax = np.arange(n) * spacing
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    L = n * spacing
    data = np.full((n, n, n), float(base))
    for _ in range(6):
        k = rng.uniform(0.5, 2.0, 3) * 2 * np.pi / L
        ph = rng.uniform(0, 2 * np.pi, 3)
        data += (amp / 6) * rng.choice([-1.0, 1.0]) * \
            np.cos(k[0] * X + ph[0]) * np.cos(k[1] * Y + ph[1]) * np.cos(k[2] * Z + ph[2])
    c = L / 2
    data += amp * np.exp(-((X - c) ** 2 + (Y - c) ** 2 + (Z - c) ** 2) / (2 * (L / 6) ** 2))
    return VolumeGrid((n, n, n), (spacing,) * 3, (0.0, 0.0, 0.0), data,
                      VolumeKind.IMPEDANCE_MRAYL)


def sphere_phantom(n=48, spacing=1.0, radius_mm=10.0, z_in=1.6, z_out=1.5):
    """Homogeneous background with one sphere of different impedance."""
    ax = np.arange(n) * spacing
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    c = ax[n // 2]
    r2 = (X - c) ** 2 + (Y - c) ** 2 + (Z - c) ** 2
    data = np.where(r2 <= radius_mm ** 2, z_in, z_out)
    return VolumeGrid((n, n, n), (spacing,) * 3, (0.0, 0.0, 0.0), data,
                      VolumeKind.IMPEDANCE_MRAYL), c


def structured_image(rng, shape=(128, 128), n_blobs=8):
    """Smooth random blob image for phase-correlation tests."""
    H, W = shape
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    img = np.zeros(shape)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        s = rng.uniform(3.0, 10.0)
        img += rng.uniform(0.3, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return img
