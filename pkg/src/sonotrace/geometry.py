"""Transducer pose, fan-beam ray generation, and profile extraction.

The fan is planar: rays share the apex at the transducer position and spread
uniformly in angle inside the plane spanned by the central beam axis and the
in-plane vector. Sample 0 of every ray sits exactly at the apex, so the first
echo value is the amplitude at the transducer face.

For gradient-based registration a pose is chart-mapped to a 6-vector
``[tx, ty, tz, wx, wy, wz]``: translation in mm plus an axis-angle rotation
applied to the canonical frame (axis = +z, in-plane = +x).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .volume import (DEFAULT_BACKGROUND_MRAYL, IMPEDANCE_FLOOR_MRAYL, VolumeGrid,
                     sample_nearest, sample_trilinear)
from .acoustics import ImpedanceProfile

_CANON_AXIS = np.array([0.0, 0.0, 1.0])
_CANON_IN_PLANE = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class TransducerPose:
    """Rigid pose of the virtual transducer (mm / unit vectors)."""

    position: np.ndarray
    axis: np.ndarray
    in_plane: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        ax = np.asarray(self.axis, dtype=np.float64).reshape(3)
        ip = np.asarray(self.in_plane, dtype=np.float64).reshape(3)
        for name, v in (("axis", ax), ("in_plane", ip)):
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ConfigError(f"{name} must be unit length")
        if abs(float(ax @ ip)) > 1e-9:
            raise ConfigError("axis and in_plane must be orthogonal")
        for arr in (pos, ax, ip):
            arr.flags.writeable = False
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "axis", ax)
        object.__setattr__(self, "in_plane", ip)

    @classmethod
    def from_vector(cls, q) -> "TransducerPose":
        q = np.asarray(q, dtype=np.float64).reshape(6)
        R = rotation_matrix(q[3:])
        return cls(position=q[:3], axis=R @ _CANON_AXIS, in_plane=R @ _CANON_IN_PLANE)

    def to_vector(self) -> np.ndarray:
        normal = np.cross(self.axis, self.in_plane)
        R = np.column_stack([self.in_plane, normal, self.axis])
        return np.concatenate([self.position, rotation_log(R)])

    @classmethod
    def from_json(cls, path) -> "TransducerPose":
        cfg = _read_json(path)
        try:
            return cls(position=cfg["position_mm"], axis=cfg["axis"], in_plane=cfg["in_plane"])
        except KeyError as exc:
            raise ConfigError(f"pose config {path} missing key {exc}") from exc

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({
            "position_mm": list(map(float, self.position)),
            "axis": list(map(float, self.axis)),
            "in_plane": list(map(float, self.in_plane)),
        }, indent=2) + "\n")


@dataclass(frozen=True)
class FanConfig:
    """Fan-beam acquisition geometry."""

    n_rays: int = 256
    n_samples: int = 128
    fan_angle: float = np.deg2rad(60.0)  # radians, total aperture
    depth_mm: float = 120.0

    def __post_init__(self):
        if self.n_rays < 1:
            raise ConfigError("n_rays must be >= 1")
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")
        if not (0.0 < self.fan_angle < np.pi):
            raise ConfigError("fan_angle must be in (0, pi)")
        if self.depth_mm <= 0:
            raise ConfigError("depth_mm must be positive")

    @property
    def step_mm(self) -> float:
        """Arc-length spacing between successive ray samples."""
        return self.depth_mm / (self.n_samples - 1)

    @classmethod
    def from_json(cls, path) -> "FanConfig":
        cfg = _read_json(path)
        try:
            return cls(n_rays=int(cfg["n_rays"]), n_samples=int(cfg["n_samples"]),
                       fan_angle=float(np.deg2rad(cfg["fan_angle_deg"])),
                       depth_mm=float(cfg["depth_mm"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"fan config {path}: {exc}") from exc

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({
            "n_rays": self.n_rays, "n_samples": self.n_samples,
            "fan_angle_deg": float(np.rad2deg(self.fan_angle)),
            "depth_mm": self.depth_mm,
        }, indent=2) + "\n")


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc


def ray_angles(cfg: FanConfig) -> np.ndarray:
    """Signed in-plane angles, index 0 at the most negative angle."""
    if cfg.n_rays == 1:
        return np.zeros(1)
    half = 0.5 * cfg.fan_angle
    return np.linspace(-half, half, cfg.n_rays)


def generate_rays(pose: TransducerPose, cfg: FanConfig):
    """Unit ray directions fanned about the axis; all origins at the apex."""
    th = ray_angles(cfg)
    dirs = np.outer(np.cos(th), pose.axis) + np.outer(np.sin(th), pose.in_plane)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return origins, dirs


def canonical_ray_dirs(cfg: FanConfig) -> np.ndarray:
    """Fan directions in the canonical frame (before pose rotation)."""
    th = ray_angles(cfg)
    return np.outer(np.cos(th), _CANON_AXIS) + np.outer(np.sin(th), _CANON_IN_PLANE)


def ray_sample_points(origins: np.ndarray, dirs: np.ndarray, cfg: FanConfig) -> np.ndarray:
    """World sample points (R, S, 3) at uniform arc-length steps."""
    s = np.arange(cfg.n_samples) * cfg.step_mm
    return origins[:, None, :] + s[None, :, None] * dirs[:, None, :]


def extract_profile(v: VolumeGrid, ray, cfg: FanConfig,
                    background: float = DEFAULT_BACKGROUND_MRAYL,
                    interpolation: str = "trilinear") -> ImpedanceProfile:
    """Impedance samples along one ray (floored)."""
    origin, direction = ray
    pts = ray_sample_points(np.asarray(origin, float)[None, :],
                            np.asarray(direction, float)[None, :], cfg)[0]
    sampler = sample_trilinear if interpolation == "trilinear" else sample_nearest
    vals = sampler(v, pts, outside=background)
    return ImpedanceProfile(np.maximum(vals, IMPEDANCE_FLOOR_MRAYL))


def extract_profiles_batch(v: VolumeGrid, pose: TransducerPose, cfg: FanConfig,
                           background: float = DEFAULT_BACKGROUND_MRAYL,
                           interpolation: str = "trilinear") -> np.ndarray:
    """Impedance sample matrix (n_rays, n_samples) for the whole fan."""
    origins, dirs = generate_rays(pose, cfg)
    pts = ray_sample_points(origins, dirs, cfg)
    sampler = sample_trilinear if interpolation == "trilinear" else sample_nearest
    vals = sampler(v, pts.reshape(-1, 3), outside=background)
    return np.maximum(vals.reshape(cfg.n_rays, cfg.n_samples), IMPEDANCE_FLOOR_MRAYL)


# ---------------------------------------------------------------------------
# rotations (axis-angle exponential map)

def rotation_matrix(omega) -> np.ndarray:
    """Rodrigues rotation for an axis-angle vector."""
    w = np.asarray(omega, dtype=np.float64).reshape(3)
    th = np.linalg.norm(w)
    K = _skew(w)
    if th < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    K = K / th
    return np.eye(3) + np.sin(th) * K + (1.0 - np.cos(th)) * (K @ K)


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle < pi)."""
    R = np.asarray(R, dtype=np.float64)
    cos_th = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    th = np.arccos(cos_th)
    if th < 1e-9:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - th < 1e-6:
        raise ConfigError("rotation too close to pi for the axis-angle chart")
    ax = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / (2.0 * np.sin(th))
    return th * ax


def rotation_matrix_partials(omega):
    """R(omega) and its three partial derivatives dR/domega_i.

    Uses the closed form d(R)/dw_i = ((w_i [w]x + [w x (I - R) e_i]x) / |w|^2) R,
    with the [e_i]x limit at omega = 0.
    """
    w = np.asarray(omega, dtype=np.float64).reshape(3)
    R = rotation_matrix(w)
    th2 = float(w @ w)
    parts = []
    eye = np.eye(3)
    if th2 < 1e-18:
        for i in range(3):
            parts.append(_skew(eye[i]))
        return R, parts
    for i in range(3):
        v = np.cross(w, (eye[i] - R[:, i]))
        parts.append((_skew(w * w[i] + v) / th2) @ R)
    return R, parts


def _skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])
