"""CT/MRI intensity to acoustic impedance conversion.

CT path: Hounsfield units map piecewise-linearly to density (kg/m^3) and to
speed of sound (m/s); impedance is their product, reported in MRayl
(1e6 kg m^-2 s^-1). The calibration knots ship as configuration
(``data/calibration_default.json``), not as code constants.

MRI path: T1 intensities have no physical scale, so a small fully-connected
network (1 input, 1 output, tanh hidden layers) is fitted to tissue reference
pairs by full-batch gradient descent with heavy-ball momentum. Inputs are
standardized, targets z-scored, and rows are weighted by 1/max(Z, floor)^2 so
low-impedance rows (air) count at a comparable scale. Predictions are clamped
to a configurable positive range.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, FitError
from .volume import VolumeGrid, VolumeKind

MRAYL_PER_RAYL = 1e-6


@dataclass(frozen=True)
class PiecewiseLinearMap:
    """Monotone-knot piecewise-linear map with linear end extrapolation."""

    knots: tuple  # ((x0, y0), (x1, y1), ...)

    def __post_init__(self):
        knots = tuple((float(x), float(y)) for x, y in self.knots)
        if len(knots) < 2:
            raise ConfigError("piecewise map needs at least two knots")
        xs = np.array([k[0] for k in knots])
        ys = np.array([k[1] for k in knots])
        if not np.all(np.diff(xs) > 0):
            raise ConfigError("knot inputs must be strictly increasing")
        if not np.all(np.isfinite(xs)) or not np.all(np.isfinite(ys)):
            raise ConfigError("knots must be finite")
        object.__setattr__(self, "knots", knots)

    def __call__(self, x):
        xs = np.array([k[0] for k in self.knots])
        ys = np.array([k[1] for k in self.knots])
        x = np.asarray(x, dtype=np.float64)
        out = np.interp(x, xs, ys)
        lo_slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
        hi_slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        out = np.where(x < xs[0], ys[0] + (x - xs[0]) * lo_slope, out)
        out = np.where(x > xs[-1], ys[-1] + (x - xs[-1]) * hi_slope, out)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class TissueReferenceTable:
    """Reference pairs (tissue name, normalized T1 intensity, impedance MRayl)."""

    rows: tuple  # ((name, intensity, impedance), ...)

    def __post_init__(self):
        rows = tuple((str(n), float(x), float(z)) for n, x, z in self.rows)
        for name, x, z in rows:
            if not (0.0 <= x <= 1.0):
                raise ConfigError(f"intensity of {name!r} outside [0, 1]: {x}")
            if z <= 0:
                raise ConfigError(f"impedance of {name!r} must be positive: {z}")
        object.__setattr__(self, "rows", rows)

    @property
    def intensities(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    @property
    def impedances(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])


@dataclass(frozen=True)
class FitConfig:
    hidden: tuple = (32, 32)
    epochs: int = 20000
    learning_rate: float = 0.03
    momentum: float = 0.95
    seed: int = 0
    tolerance: float = 0.05
    output_range_mrayl: tuple = (1e-4, 2.5)


@dataclass
class IntensityImpedanceModel:
    """Small feed-forward net mapping normalized intensity to impedance.

    ``layers`` holds (W, b) pairs; tanh between layers, linear output. The
    input is standardized by ``input_normalization`` = (mean, scale) and the
    de-normalized prediction is clamped to ``output_range``.
    """

    layers: list
    input_normalization: tuple
    output_range: tuple
    output_denorm: tuple = (0.0, 1.0)  # (mean, scale) of the training targets

    def __post_init__(self):
        zmin, zmax = self.output_range
        if not (0.0 < zmin < zmax):
            raise ConfigError("output range must satisfy 0 < Z_min < Z_max")

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        mu, sc = self.input_normalization
        h = ((x.reshape(-1) - mu) / sc)[None, :]
        for i, (W, b) in enumerate(self.layers):
            h = W @ h + b[:, None]
            if i < len(self.layers) - 1:
                h = np.tanh(h)
        ymu, ysc = self.output_denorm
        out = h.ravel() * ysc + ymu
        out = np.clip(out, *self.output_range)
        return out.reshape(x.shape) if x.ndim else float(out[0])

    def to_dict(self) -> dict:
        return {
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.layers],
            "input_normalization": list(self.input_normalization),
            "output_denorm": list(self.output_denorm),
            "output_range_mrayl": list(self.output_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IntensityImpedanceModel":
        try:
            layers = [(np.asarray(l["W"], float), np.asarray(l["b"], float)) for l in d["layers"]]
            return cls(layers=layers,
                       input_normalization=tuple(d["input_normalization"]),
                       output_range=tuple(d["output_range_mrayl"]),
                       output_denorm=tuple(d.get("output_denorm", (0.0, 1.0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed model description: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "IntensityImpedanceModel":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"model file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


def default_calibration() -> dict:
    """The packaged default calibration config (knots, tissue table, fit)."""
    text = resources.files("sonotrace.data").joinpath("calibration_default.json").read_text()
    return json.loads(text)


def load_calibration(path=None) -> dict:
    if path is None:
        return default_calibration()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"calibration file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {p}: {exc}") from exc


def maps_from_calibration(cfg: dict):
    try:
        density = PiecewiseLinearMap(tuple(map(tuple, cfg["density_knots"])))
        speed = PiecewiseLinearMap(tuple(map(tuple, cfg["speed_knots"])))
    except KeyError as exc:
        raise ConfigError(f"calibration config missing {exc}") from exc
    return density, speed


def table_from_calibration(cfg: dict) -> TissueReferenceTable:
    try:
        rows = tuple((r["tissue"], r["intensity"], r["impedance_mrayl"])
                     for r in cfg["tissue_table"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"calibration config tissue_table: {exc}") from exc
    return TissueReferenceTable(rows)


def fit_config_from_calibration(cfg: dict) -> FitConfig:
    f = cfg.get("fit", {})
    return FitConfig(
        hidden=tuple(f.get("hidden", (32, 32))),
        epochs=int(f.get("epochs", 20000)),
        learning_rate=float(f.get("learning_rate", 0.03)),
        momentum=float(f.get("momentum", 0.95)),
        seed=int(f.get("seed", 0)),
        tolerance=float(f.get("tolerance", 0.05)),
        output_range_mrayl=tuple(f.get("output_range_mrayl", (1e-4, 2.5))),
    )


def ct_to_impedance(hu: VolumeGrid, density_map: PiecewiseLinearMap,
                    speed_map: PiecewiseLinearMap) -> VolumeGrid:
    """Voxel-wise Z = rho(HU) * c(HU), in MRayl."""
    if hu.kind is not VolumeKind.HU:
        raise ConfigError(f"expected an HU volume, got {hu.kind}")
    rho = density_map(hu.data)
    c = speed_map(hu.data)
    if np.min(rho) <= 0:
        worst = float(hu.data.reshape(-1)[np.argmin(rho)])
        raise ConfigError(f"density map non-positive at HU={worst:g}")
    if np.min(c) <= 0:
        worst = float(hu.data.reshape(-1)[np.argmin(c)])
        raise ConfigError(f"speed map non-positive at HU={worst:g}")
    z = rho * c * MRAYL_PER_RAYL
    return hu.with_data(z, VolumeKind.IMPEDANCE_MRAYL)


def _mlp_forward(layers, xn):
    h = xn[None, :]
    for i, (W, b) in enumerate(layers):
        h = W @ h + b[:, None]
        if i < len(layers) - 1:
            h = np.tanh(h)
    return h.ravel()


def fit_intensity_model(table: TissueReferenceTable, cfg: FitConfig | None = None
                        ) -> IntensityImpedanceModel:
    """Fit the intensity->impedance network to the reference table.

    Deterministic for a fixed seed. Raises :class:`FitError` when the data is
    ill-posed or the mean relative training error stays above the tolerance.
    """
    cfg = cfg or FitConfig()
    xs = table.intensities
    ys = table.impedances
    if xs.size < 4:
        raise FitError(f"need at least 4 reference rows, got {xs.size}")
    if xs.max() - xs.min() <= 0:
        raise FitError("reference intensities must span a range")
    order = np.argsort(xs)
    dup = np.flatnonzero(np.diff(xs[order]) == 0)
    for d in dup:
        a, b = order[d], order[d + 1]
        if ys[a] != ys[b]:
            raise FitError(
                f"ill-posed data: intensity {xs[a]:g} maps to both "
                f"{ys[a]:g} and {ys[b]:g} MRayl")

    rng = np.random.default_rng(cfg.seed)
    sizes = [1, *cfg.hidden, 1]
    layers = [(rng.normal(0.0, np.sqrt(1.0 / a), (b, a)), np.zeros(b))
              for a, b in zip(sizes[:-1], sizes[1:])]
    vel = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]

    mu, sc = float(xs.mean()), float(xs.std()) or 1.0
    ymu, ysc = float(ys.mean()), float(ys.std()) or 1.0
    xn = (xs - mu) / sc
    yn = (ys - ymu) / ysc
    w = 1.0 / np.maximum(ys, 0.02) ** 2
    w = w / w.sum()
    nl = len(layers)
    loss = np.inf
    for _ in range(cfg.epochs):
        h = xn[None, :]
        acts = [h]
        for i, (W, b) in enumerate(layers):
            zlin = W @ h + b[:, None]
            h = np.tanh(zlin) if i < nl - 1 else zlin
            acts.append(h)
        err = h.ravel() - yn
        loss = float(np.sum(w * err ** 2))
        g = (2.0 * w * err)[None, :]
        grads = []
        for i in range(nl - 1, -1, -1):
            W, _ = layers[i]
            grads.append((g @ acts[i].T, g.sum(axis=1)))
            if i > 0:
                g = (W.T @ g) * (1.0 - acts[i] ** 2)
        grads.reverse()
        new_layers = []
        new_vel = []
        for (W, b), (vW, vb), (gW, gb) in zip(layers, vel, grads):
            vW = cfg.momentum * vW - cfg.learning_rate * gW
            vb = cfg.momentum * vb - cfg.learning_rate * gb
            new_layers.append((W + vW, b + vb))
            new_vel.append((vW, vb))
        layers, vel = new_layers, new_vel

    pred = _mlp_forward(layers, xn) * ysc + ymu
    rel = np.abs(pred - ys) / ys
    if float(rel.mean()) > cfg.tolerance:
        raise FitError(
            f"fit did not converge: mean relative error {rel.mean():.3%} "
            f"> {cfg.tolerance:.1%}", final_loss=loss)
    return IntensityImpedanceModel(layers=layers, input_normalization=(mu, sc),
                                   output_range=tuple(cfg.output_range_mrayl),
                                   output_denorm=(ymu, ysc))


def normalize_intensities(data: np.ndarray) -> np.ndarray:
    """Robust 1st/99th-percentile scaling of raw scanner intensities to [0, 1].

    Values already inside [0, 1] (or degenerate constant volumes) pass through
    unchanged, so pre-normalized inputs keep their meaning.
    """
    data = np.asarray(data, dtype=np.float64)
    mn, mx = float(data.min()), float(data.max())
    if mn >= 0.0 and mx <= 1.0:
        return data
    p1, p99 = np.percentile(data, [1.0, 99.0])
    if p99 - p1 <= 0:
        return np.clip(data, 0.0, 1.0)
    return np.clip((data - p1) / (p99 - p1), 0.0, 1.0)


def mri_to_impedance(mri: VolumeGrid, model: IntensityImpedanceModel) -> VolumeGrid:
    """Pointwise model evaluation after robust input normalization."""
    if mri.kind is not VolumeKind.MRI_INTENSITY:
        raise ConfigError(f"expected an MRI intensity volume, got {mri.kind}")
    x = normalize_intensities(mri.data)
    z = model.predict(x)
    return mri.with_data(z, VolumeKind.IMPEDANCE_MRAYL)
