"""B-mode image formation, scan conversion, and artifact synthesis.

The polar image has one row per ray and one column per interface: pixel (r, j)
is the first difference d0[j] - d0[j-1] of the ray's depth-resolved echo
profile (d0[-1] = 0), i.e. the echo added by the interface between samples j
and j+1. Column j maps to radial depth (j+1) * step_mm for scan conversion,
so the deepest column sits exactly at the configured imaging depth.

Artifacts are optional, seeded post-processing stages: multiplicative speckle
whose amplitude follows a depth power law, and a lateral Gaussian blur whose
width grows linearly with depth. Neither stage is part of the differentiable
surface; the raw (pre-normalization, pre-artifact) polar image is.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .acoustics import EchoProfile, depth_profiles_batch
from .errors import ConfigError, VolumeFormatError
from .geometry import FanConfig, TransducerPose, extract_profiles_batch
from .volume import DEFAULT_BACKGROUND_MRAYL, VolumeGrid, VolumeKind


class NormalizationMode(Enum):
    MAX = "MAX"
    PERCENTILE99 = "PERCENTILE99"


@dataclass(frozen=True)
class ArtifactConfig:
    """Seeded artifact parameters; alpha = 0 and sigma = 0 are exact identities."""

    speckle_enabled: bool = False
    speckle_strength: float = 0.3    # alpha
    speckle_power: float = 1.0       # gamma, depth power-law exponent
    granularity_scale_mm: float = 1.5
    blur_enabled: bool = False
    blur_sigma0_px: float = 0.0
    blur_slope_px: float = 0.0       # sigma growth per depth pixel
    seed: int = 0

    def __post_init__(self):
        if self.speckle_strength < 0 or self.speckle_power <= 0:
            raise ConfigError("speckle strength must be >= 0 and power > 0")
        if self.granularity_scale_mm < 0:
            raise ConfigError("granularity scale must be >= 0")
        if self.blur_sigma0_px < 0 or self.blur_slope_px < 0:
            raise ConfigError("blur parameters must be >= 0")

    @classmethod
    def from_json(cls, path) -> "ArtifactConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"artifact config not found: {p}")
        try:
            cfg = json.loads(p.read_text())
            return cls(**cfg)
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"artifact config {p}: {exc}") from exc


@dataclass
class BModeImage:
    """Fan-of-rays echo image plus optional scan-converted raster."""

    polar: np.ndarray                 # (n_rays, n_samples - 1)
    fan: FanConfig
    pose: TransducerPose | None = None
    cartesian: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        polar = np.asarray(self.polar, dtype=np.float64)
        if polar.ndim != 2:
            raise ConfigError("polar image must be 2-D (rays x depth)")
        if not np.all(np.isfinite(polar)):
            raise VolumeFormatError("polar image contains non-finite values")
        if polar.shape[0] != self.fan.n_rays:
            raise ConfigError(
                f"polar rows {polar.shape[0]} != fan n_rays {self.fan.n_rays}")
        self.polar = polar


def form_image(profiles, fan: FanConfig | None = None,
               pose: TransducerPose | None = None,
               attenuation_per_mm: float = 0.0) -> BModeImage:
    """First-difference image from echo profiles (list or (R, N) array).

    ``attenuation_per_mm`` optionally damps each pixel by the round-trip
    exponential exp(-2 a r_k) at its interface depth r_k; the propagation
    equations themselves are attenuation-free, so this defaults to off.
    """
    if isinstance(profiles, np.ndarray):
        d0 = np.asarray(profiles, dtype=np.float64)
    else:
        lengths = {len(p) for p in profiles}
        if len(lengths) != 1:
            raise ConfigError(f"ragged profile lengths: {sorted(lengths)}")
        d0 = np.stack([p.d0 if isinstance(p, EchoProfile) else np.asarray(p, float)
                       for p in profiles])
    img = np.empty_like(d0)
    img[:, 0] = d0[:, 0]
    img[:, 1:] = d0[:, 1:] - d0[:, :-1]
    if fan is None:
        fan = FanConfig(n_rays=d0.shape[0], n_samples=d0.shape[1] + 1,
                        depth_mm=float(d0.shape[1]))
    if attenuation_per_mm > 0.0:
        r_k = (np.arange(d0.shape[1]) + 1.0) * fan.step_mm
        img = img * np.exp(-2.0 * attenuation_per_mm * r_k)[None, :]
    return BModeImage(polar=img, fan=fan, pose=pose)


def normalize(img: BModeImage, mode: NormalizationMode = NormalizationMode.MAX) -> BModeImage:
    """Scale intensities into [0, 1]; the all-zero image stays zero."""
    arr = normalize_array(img.polar, mode)
    out = replace(img, polar=arr)
    out.meta = dict(img.meta, normalization=mode.value)
    return out


#: Images whose peak echo falls below this are numerically black: echo
#: amplitudes are fractions of the unit source pulse, so anything at this
#: level is interpolation roundoff, not signal.
BLACK_FLOOR = 1e-12


def normalize_array(arr: np.ndarray, mode: NormalizationMode = NormalizationMode.MAX) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if mode is NormalizationMode.MAX:
        scale = float(np.max(np.abs(arr))) if arr.size else 0.0
    elif mode is NormalizationMode.PERCENTILE99:
        scale = float(np.percentile(np.abs(arr), 99.0)) if arr.size else 0.0
    else:
        raise ConfigError(f"unknown normalization mode {mode!r}")
    if scale <= BLACK_FLOOR:
        return np.zeros_like(arr)
    return np.clip(arr / scale, 0.0, 1.0)


def scan_convert(img: BModeImage, out_dims=(512, 512)) -> np.ndarray:
    """Resample the polar image onto a Cartesian raster of the fan wedge.

    The apex sits at the top-center; rows advance with depth. Pixels outside
    the wedge are zero; inside, (angle, radius) coordinates interpolate the
    polar grid bilinearly with clamped edges.
    """
    H, W = int(out_dims[0]), int(out_dims[1])
    if H < 1 or W < 1:
        raise ConfigError("scan raster must have positive dims")
    fan = img.fan
    N = img.polar.shape[1]
    half = 0.5 * fan.fan_angle
    x_half = fan.depth_mm * np.sin(half)
    zs = (np.arange(H) + 0.5) / H * fan.depth_mm
    xs = ((np.arange(W) + 0.5) / W - 0.5) * 2.0 * x_half
    X, Z = np.meshgrid(xs, zs)
    radius = np.hypot(X, Z)
    angle = np.arctan2(X, Z)
    inside = (np.abs(angle) <= half) & (radius <= fan.depth_mm)
    # fractional polar coordinates
    if fan.n_rays > 1:
        fray = (angle + half) / fan.fan_angle * (fan.n_rays - 1)
    else:
        fray = np.zeros_like(angle)
    fcol = radius / fan.step_mm - 1.0
    fray = np.clip(fray, 0.0, fan.n_rays - 1)
    fcol = np.clip(fcol, 0.0, N - 1)
    r0 = np.clip(np.floor(fray).astype(int), 0, max(fan.n_rays - 2, 0))
    c0 = np.clip(np.floor(fcol).astype(int), 0, max(N - 2, 0))
    fr = fray - r0
    fc = fcol - c0
    P = img.polar
    r1 = np.minimum(r0 + 1, fan.n_rays - 1)
    c1 = np.minimum(c0 + 1, N - 1)
    vals = ((1 - fr) * (1 - fc) * P[r0, c0] + fr * (1 - fc) * P[r1, c0]
            + (1 - fr) * fc * P[r0, c1] + fr * fc * P[r1, c1])
    return np.where(inside, vals, 0.0)


def _standardized_noise(rng, shape, sigma_px, axis=None):
    """Zero-mean unit-variance field, band-limited by circular Gaussian smoothing."""
    u = rng.standard_normal(shape)
    if sigma_px > 0:
        if axis is None:
            u = gaussian_filter(u, sigma_px, mode="wrap")
        else:
            u = gaussian_filter1d(u, sigma_px, axis=axis, mode="wrap")
    sd = u.std()
    if sd > 0:
        u = (u - u.mean()) / sd
    return u


def apply_speckle(img: BModeImage, cfg: ArtifactConfig) -> BModeImage:
    """Multiplicative speckle with depth power-law amplitude.

    pixel *= 1 + a (k/N)^g (u_radial + u_granular), clamped at zero. u_radial
    is per-ray noise smoothed along depth (radially oriented streaks);
    u_granular is 2-D band-limited noise with the configured correlation
    length. Both are standardized and drawn from the seeded generator, so a
    fixed seed reproduces the field exactly.
    """
    if not cfg.speckle_enabled or cfg.speckle_strength == 0.0:
        return img
    R, N = img.polar.shape
    rng = np.random.default_rng(cfg.seed)
    sigma_px = cfg.granularity_scale_mm / img.fan.step_mm
    u_rad = _standardized_noise(rng, (R, N), sigma_px, axis=1)
    u_gran = _standardized_noise(rng, (R, N), sigma_px)
    depth_gain = ((np.arange(N) + 1.0) / N) ** cfg.speckle_power
    noise = cfg.speckle_strength * depth_gain[None, :] * (u_rad + u_gran)
    out = np.maximum(img.polar * (1.0 + noise), 0.0)
    res = replace(img, polar=out)
    res.meta = dict(img.meta, speckle={"alpha": cfg.speckle_strength,
                                       "gamma": cfg.speckle_power,
                                       "granularity_mm": cfg.granularity_scale_mm,
                                       "seed": cfg.seed})
    return res


def apply_depth_blur(img: BModeImage, cfg: ArtifactConfig) -> BModeImage:
    """Lateral Gaussian blur with per-row width sigma(k) = sigma0 + slope * k.

    Kernels are normalized and applied with reflective boundaries, so each
    depth row keeps its energy and a constant image is unchanged.
    """
    if not cfg.blur_enabled or (cfg.blur_sigma0_px == 0.0 and cfg.blur_slope_px == 0.0):
        return img
    out = img.polar.copy()
    for k in range(out.shape[1]):
        s = cfg.blur_sigma0_px + cfg.blur_slope_px * k
        if s > 0:
            out[:, k] = gaussian_filter1d(out[:, k], s, mode="reflect")
    res = replace(img, polar=out)
    res.meta = dict(img.meta, blur={"sigma0_px": cfg.blur_sigma0_px,
                                    "slope_px": cfg.blur_slope_px})
    return res


def render(volume: VolumeGrid, pose: TransducerPose, fan: FanConfig,
           artifacts: ArtifactConfig | None = None, *,
           normalization: NormalizationMode | None = NormalizationMode.MAX,
           background: float = DEFAULT_BACKGROUND_MRAYL,
           attenuation_per_mm: float = 0.0,
           scan_dims=None, num_threads: int = 1, backend=None) -> BModeImage:
    """Full pipeline: sample rays, solve echoes, difference, normalize,
    optional artifacts, optional scan conversion.

    Deterministic given the artifact seed; bit-identical across runs and
    thread counts. Pass ``normalization=None`` to keep raw echo differences
    (the differentiable surface).
    """
    if volume.kind is not VolumeKind.IMPEDANCE_MRAYL:
        raise ConfigError(
            f"render needs an impedance volume, got {volume.kind}; map it first")
    z = extract_profiles_batch(volume, pose, fan, background=background)
    d0 = depth_profiles_batch(z, num_threads=num_threads, backend=backend)
    img = form_image(d0, fan=fan, pose=pose, attenuation_per_mm=attenuation_per_mm)
    if normalization is not None:
        img = normalize(img, normalization)
    if artifacts is not None:
        img = apply_speckle(img, artifacts)
        img = apply_depth_blur(img, artifacts)
    if scan_dims is not None:
        img.cartesian = scan_convert(img, scan_dims)
    return img


def render_raw_polar(volume: VolumeGrid, pose: TransducerPose, fan: FanConfig,
                     background: float = DEFAULT_BACKGROUND_MRAYL,
                     num_threads: int = 1, backend=None) -> np.ndarray:
    """Raw first-difference polar pixels (no normalization, no artifacts)."""
    z = extract_profiles_batch(volume, pose, fan, background=background)
    d0 = depth_profiles_batch(z, num_threads=num_threads, backend=backend)
    img = np.empty_like(d0)
    img[:, 0] = d0[:, 0]
    img[:, 1:] = d0[:, 1:] - d0[:, :-1]
    return img


# ---------------------------------------------------------------------------
# image file IO

def write_pgm16(path, arr: np.ndarray) -> None:
    """16-bit binary PGM of a [0, 1] image."""
    arr = np.asarray(arr, dtype=np.float64)
    pix = np.clip(np.rint(arr * 65535.0), 0, 65535).astype(">u2")
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode())
            fh.write(pix.tobytes())
    except OSError as exc:
        raise VolumeFormatError(f"cannot write image {path}: {exc}") from exc


def write_npy_image(path, arr: np.ndarray, meta: dict | None = None) -> None:
    """float32 .npy raster plus a JSON sidecar describing its provenance."""
    path = Path(path)
    try:
        np.save(path, np.asarray(arr, dtype=np.float32))
        sidecar = path.with_suffix(path.suffix + ".json") if path.suffix != ".npy" \
            else path.with_suffix(".json")
        sidecar.write_text(json.dumps(meta or {}, indent=2, default=str) + "\n")
    except OSError as exc:
        raise VolumeFormatError(f"cannot write image {path}: {exc}") from exc


def read_npy_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"image file not found: {path}")
    try:
        return np.asarray(np.load(path), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise VolumeFormatError(f"cannot read image {path}: {exc}") from exc
