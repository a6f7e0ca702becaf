"""Image similarity metrics, FFT phase alignment, and the ablation harness.

All metrics follow the standard definitions (NCC is zero-mean normalized
correlation, SSIM uses a Gaussian window with the canonical constants).
Phase alignment estimates an integer circular shift from the normalized
cross-power spectrum and is applied before metric computation to remove rigid
offsets between rendered and reference images.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigError, NumericalError
from .imaging import (ArtifactConfig, BModeImage, NormalizationMode, apply_depth_blur,
                      apply_speckle, normalize, scan_convert)
from .acoustics import depth_profiles_batch
from .geometry import FanConfig, TransducerPose, extract_profiles_batch
from .volume import VolumeGrid


def _check_dims(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"image dims differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_dims(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    a, b = _check_dims(a, b)
    return float(np.mean(np.abs(a - b)))


def ncc(a, b) -> float:
    a, b = _check_dims(a, b)
    ac = a - a.mean()
    bc = b - b.mean()
    na = np.linalg.norm(ac)
    nb = np.linalg.norm(bc)
    if na == 0.0 or nb == 0.0:
        raise NumericalError("NCC undefined for constant images")
    return float(np.sum(ac * bc) / (na * nb))


def _gauss_window(window: int, sigma: float) -> np.ndarray:
    r = np.arange(window) - (window - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03,
         L: float = 1.0, sigma: float = 1.5) -> float:
    """Mean local SSIM over all fully-interior Gaussian windows."""
    a, b = _check_dims(a, b)
    if min(a.shape) < window:
        raise ConfigError(f"image {a.shape} smaller than SSIM window {window}")
    if L <= 0:
        raise ConfigError("dynamic range L must be positive")
    k = _gauss_window(window, sigma)
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    mu_a = fftconvolve(a, k, mode="valid")
    mu_b = fftconvolve(b, k, mode="valid")
    var_a = fftconvolve(a * a, k, mode="valid") - mu_a ** 2
    var_b = fftconvolve(b * b, k, mode="valid") - mu_b ** 2
    cov = fftconvolve(a * b, k, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def phase_align(a, b):
    """Integer circular shift of ``b`` relative to ``a`` via phase correlation.

    Returns ``(shift, b_shifted)`` with ``b approx roll(a, shift)`` and
    ``b_shifted = roll(b, -shift)`` realigned onto ``a``. The normalized
    cross-power spectrum makes the estimate invariant to global intensity
    scaling of either image.
    """
    a, b = _check_dims(a, b)
    Fa = np.fft.fft2(a)
    Fb = np.fft.fft2(b)
    if not np.any(np.abs(Fa) > 0) or not np.any(np.abs(Fb) > 0):
        raise NumericalError("degenerate all-zero spectrum in phase alignment")
    q = Fb * np.conj(Fa)
    mag = np.abs(q)
    with np.errstate(invalid="ignore", divide="ignore"):
        qn = np.where(mag > 0, q / mag, 0.0)
    corr = np.real(np.fft.ifft2(qn))
    peak = np.unravel_index(int(np.argmax(corr)), corr.shape)
    shift = tuple(int((p + n // 2) % n - n // 2) for p, n in zip(peak, corr.shape))
    b_shifted = np.roll(b, tuple(-s for s in shift), axis=(0, 1))
    return shift, b_shifted


SSIM_CONSTANTS = {"window": 11, "k1": 0.01, "k2": 0.03, "sigma": 1.5, "L": 1.0}


@dataclass(frozen=True)
class MetricReport:
    mse: float
    ssim: float
    ncc: float
    mae: float
    shift_applied: tuple

    def to_dict(self) -> dict:
        return {"mse": self.mse, "ssim": self.ssim, "ncc": self.ncc,
                "mae": self.mae, "shift_applied": list(self.shift_applied),
                "ssim_constants": dict(SSIM_CONSTANTS)}


def compare(reference, image, align: bool = True) -> MetricReport:
    """All four metrics after optional phase pre-alignment of ``image``."""
    reference, image = _check_dims(reference, image)
    shift = (0, 0)
    if align:
        shift, image = phase_align(reference, image)
    return MetricReport(mse=mse(reference, image), ssim=ssim(reference, image),
                        ncc=ncc(reference, image), mae=mae(reference, image),
                        shift_applied=shift)


# ---------------------------------------------------------------------------
# ablation harness

#: The six pipeline configurations, from plain geometric resampling to the
#: full physics chain with artifacts. Sampling is always on.
ABLATION_CONFIGS = (
    {"sampling": True, "mapping": False, "propagating": False, "artifacts": False},
    {"sampling": True, "mapping": True, "propagating": False, "artifacts": False},
    {"sampling": True, "mapping": True, "propagating": True, "artifacts": False},
    {"sampling": True, "mapping": True, "propagating": True, "artifacts": True},
    {"sampling": True, "mapping": False, "propagating": True, "artifacts": False},
    {"sampling": True, "mapping": False, "propagating": True, "artifacts": True},
)


@dataclass
class AblationRow:
    config: dict
    report: MetricReport
    image: np.ndarray   # the aligned rendered image in the metric space
    aligned_difference: np.ndarray


def render_variant(volume: VolumeGrid, mapper, pose: TransducerPose, fan: FanConfig,
                   config: dict, artifacts: ArtifactConfig | None = None,
                   space: str = "cartesian", scan_dims=(256, 256),
                   background: float = 0.0, num_threads: int = 1) -> np.ndarray:
    """One ablation pipeline variant, normalized, in the requested space.

    Without mapping the raw intensities feed the solver directly (floored);
    without propagation the ray samples themselves become the pixels.
    """
    vol_eff = mapper(volume) if config["mapping"] else volume
    z = extract_profiles_batch(vol_eff, pose, fan, background=background)
    if config["propagating"]:
        d0 = depth_profiles_batch(z, num_threads=num_threads)
        polar = np.empty_like(d0)
        polar[:, 0] = d0[:, 0]
        polar[:, 1:] = d0[:, 1:] - d0[:, :-1]
    else:
        polar = z[:, 1:]  # sample values at the interface depth coordinates
    img = BModeImage(polar=polar, fan=fan, pose=pose)
    img = normalize(img, NormalizationMode.MAX)
    if config["artifacts"]:
        art = artifacts or ArtifactConfig(speckle_enabled=True, blur_enabled=True,
                                          blur_slope_px=0.02)
        img = apply_speckle(img, art)
        img = apply_depth_blur(img, art)
    if space == "cartesian":
        return scan_convert(img, scan_dims)
    if space == "polar":
        return img.polar
    raise ConfigError(f"unknown metric space {space!r}")


def ablation_report(volume: VolumeGrid, mapper, pose: TransducerPose, fan: FanConfig,
                    reference: np.ndarray, artifacts: ArtifactConfig | None = None,
                    space: str = "cartesian", scan_dims=(256, 256),
                    background: float = 0.0, num_threads: int = 1):
    """Render every ablation configuration and score it against the reference."""
    reference = np.asarray(reference, dtype=np.float64)
    rows = []
    for config in ABLATION_CONFIGS:
        image = render_variant(volume, mapper, pose, fan, config, artifacts,
                               space=space, scan_dims=scan_dims,
                               background=background, num_threads=num_threads)
        if image.shape != reference.shape:
            raise ConfigError(
                f"reference dims {reference.shape} do not match variant {image.shape}")
        shift, aligned = phase_align(reference, image)
        report = MetricReport(mse=mse(reference, aligned), ssim=ssim(reference, aligned),
                              ncc=ncc(reference, aligned), mae=mae(reference, aligned),
                              shift_applied=shift)
        rows.append(AblationRow(config=dict(config), report=report, image=aligned,
                                aligned_difference=np.abs(reference - aligned)))
    return rows
