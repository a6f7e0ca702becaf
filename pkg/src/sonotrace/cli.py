"""Command-line surface.

Subcommands: render, ct-map, fit-map, mri-map, metrics, ablate, register,
bench. Every run writes a ``manifest.json`` with the resolved configuration,
seed, versions, and per-stage wall-clock timings; identical inputs and seed
reproduce identical pre-artifact outputs byte for byte.

Exit codes: 1 configuration error (bad/missing config or input path, invalid
parameters), 2 file-format/IO error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._kernels import available_backends, default_backend_name, get_backend
from .errors import ConfigError, NumericalError, SonotraceError, VolumeFormatError
from .geometry import FanConfig, TransducerPose
from .imaging import (ArtifactConfig, read_npy_image, render, write_npy_image,
                      write_pgm16)
from .impedance import (IntensityImpedanceModel, ct_to_impedance,
                        fit_config_from_calibration, fit_intensity_model,
                        load_calibration, maps_from_calibration, mri_to_impedance,
                        table_from_calibration)
from .gradients import (LossKind, OptimizerConfig, RegistrationProblem,
                        register_slice)
from .metrics import ablation_report, compare
from .volume import VolumeFormat, VolumeGrid, VolumeKind, load_volume, save_volume

EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


class Manifest:
    """Per-run record of configuration, versions, and stage timings."""

    def __init__(self, command: str, config: dict, seed: int | None, backend: str):
        self.data = {
            "command": command,
            "config": config,
            "seed": seed,
            "versions": {
                "sonotrace": __version__,
                "numpy": np.__version__,
                "python": sys.version.split()[0],
                "backend": backend,
            },
            "started_at": datetime.now(timezone.utc).isoformat(),
            "timings_s": {},
        }
        self._t0 = None
        self._stage = None

    def stage(self, name: str):
        self._stage = name
        self._t0 = time.perf_counter()
        return self

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.data["timings_s"][self._stage] = time.perf_counter() - self._t0
        return False

    def write(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.json").write_text(json.dumps(self.data, indent=2) + "\n")


def _detect_format(path: str) -> VolumeFormat:
    return VolumeFormat.NIFTI1 if str(path).endswith(".nii") else VolumeFormat.RAW_JSON


def _require(path_str: str, what: str) -> Path:
    p = Path(path_str)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="overrides any seed in config files when given")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--backend", default="auto", help="auto|compiled|numpy")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sonotrace", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a B-mode image from a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--pose", required=True, help="pose JSON")
    p.add_argument("--fan", required=True, help="fan config JSON")
    p.add_argument("--artifacts", help="artifact config JSON")
    p.add_argument("--map-config", help="calibration JSON (CT) or model JSON (MRI) "
                                        "when the volume is not impedance")
    p.add_argument("--format", choices=("npy", "pgm", "both"), default="both")
    p.add_argument("--scan-dims", default="512x512")
    _add_common(p)

    p = sub.add_parser("ct-map", help="convert an HU volume to impedance")
    p.add_argument("--volume", required=True)
    p.add_argument("--calibration", help="calibration JSON (default: packaged)")
    _add_common(p)

    p = sub.add_parser("fit-map", help="fit the intensity->impedance model")
    p.add_argument("--config", help="calibration JSON with tissue_table/fit")
    _add_common(p)

    p = sub.add_parser("mri-map", help="convert an MRI volume to impedance")
    p.add_argument("--volume", required=True)
    p.add_argument("--model", required=True, help="fitted model JSON")
    _add_common(p)

    p = sub.add_parser("metrics", help="compare two images")
    p.add_argument("--a", required=True, help="reference .npy image")
    p.add_argument("--b", required=True, help="test .npy image")
    p.add_argument("--no-align", action="store_true")
    _add_common(p)

    p = sub.add_parser("ablate", help="run the six-configuration ablation table")
    p.add_argument("--volume", required=True, help="raw (HU or MRI) volume")
    p.add_argument("--map-config", required=True)
    p.add_argument("--pose", required=True)
    p.add_argument("--fan", required=True)
    p.add_argument("--reference", required=True, help=".npy reference image")
    p.add_argument("--artifacts")
    p.add_argument("--space", choices=("cartesian", "polar"), default="cartesian")
    p.add_argument("--scan-dims", default="256x256")
    _add_common(p)

    p = sub.add_parser("register", help="slice-to-volume rigid registration")
    p.add_argument("--volume", required=True, help="impedance volume")
    p.add_argument("--fixed", required=True, help=".npy raw polar fixed image")
    p.add_argument("--fan", required=True)
    p.add_argument("--init-pose", required=True, help="JSON with pose_vector [6]")
    p.add_argument("--loss", choices=("mse", "ncc"), default="mse")
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--step-size", type=float, default=1.0)
    p.add_argument("--out-pose", help="output pose JSON (default <out>/pose.json)")
    _add_common(p)

    p = sub.add_parser("bench", help="rendering-time grid over rays x samples")
    p.add_argument("--rays", default="64,128,256")
    p.add_argument("--samples", default="32,70,100,200")
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--depth-mm", type=float, default=120.0)
    p.add_argument("--bench-backend", default="active",
                   help="active|both|compiled|numpy")
    _add_common(p)
    return ap


def _parse_dims(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ConfigError(f"bad dims {text!r}, expected HxW") from exc


def _load_impedance_volume(args) -> VolumeGrid:
    vol = load_volume(_require(args.volume, "volume file"), _detect_format(args.volume))
    if vol.kind is VolumeKind.IMPEDANCE_MRAYL:
        return vol
    if not getattr(args, "map_config", None):
        raise ConfigError(
            f"volume kind is {vol.kind.value}; pass --map-config to convert it")
    return _apply_mapping(vol, args.map_config)


def _apply_mapping(vol: VolumeGrid, map_config: str) -> VolumeGrid:
    path = _require(map_config, "mapping config")
    cfg = json.loads(path.read_text())
    if vol.kind is VolumeKind.HU:
        density, speed = maps_from_calibration(cfg)
        return ct_to_impedance(vol, density, speed)
    if "layers" in cfg:
        return mri_to_impedance(vol, IntensityImpedanceModel.from_dict(cfg))
    table = table_from_calibration(cfg)
    model = fit_intensity_model(table, fit_config_from_calibration(cfg))
    return mri_to_impedance(vol, model)


def cmd_render(args) -> int:
    out = Path(args.out)
    backend = None if args.backend == "auto" else args.backend
    man = Manifest("render", {k: v for k, v in vars(args).items() if k != "command"},
                   args.seed, get_backend(backend).name)
    with man.stage("load"):
        volume = _load_impedance_volume(args)
        pose = TransducerPose.from_json(_require(args.pose, "pose file"))
        fan = FanConfig.from_json(_require(args.fan, "fan file"))
        artifacts = None
        if args.artifacts:
            artifacts = ArtifactConfig.from_json(_require(args.artifacts, "artifact config"))
            if args.seed is not None:
                artifacts = ArtifactConfig(**{**artifacts.__dict__, "seed": args.seed})
    with man.stage("render"):
        img = render(volume, pose, fan, artifacts, scan_dims=_parse_dims(args.scan_dims),
                     num_threads=args.threads, backend=backend)
    with man.stage("write"):
        out.mkdir(parents=True, exist_ok=True)
        meta = {"fan": json.loads(Path(args.fan).read_text()),
                "pose": json.loads(Path(args.pose).read_text()),
                "normalization": img.meta.get("normalization"),
                "seed": args.seed, "backend": get_backend(backend).name}
        if args.format in ("npy", "both"):
            write_npy_image(out / "polar.npy", img.polar, meta)
            write_npy_image(out / "cartesian.npy", img.cartesian, meta)
        if args.format in ("pgm", "both"):
            write_pgm16(out / "polar.pgm", img.polar)
            write_pgm16(out / "cartesian.pgm", img.cartesian)
    man.write(out)
    return 0


def cmd_ct_map(args) -> int:
    out = Path(args.out)
    man = Manifest("ct-map", vars(args), args.seed, default_backend_name())
    with man.stage("map"):
        vol = load_volume(_require(args.volume, "volume file"), _detect_format(args.volume))
        cfg = load_calibration(args.calibration)
        density, speed = maps_from_calibration(cfg)
        z = ct_to_impedance(vol, density, speed)
        out.mkdir(parents=True, exist_ok=True)
        save_volume(z, out / "impedance.json", VolumeFormat.RAW_JSON)
    man.write(out)
    return 0


def cmd_fit_map(args) -> int:
    out = Path(args.out)
    man = Manifest("fit-map", vars(args), args.seed, default_backend_name())
    with man.stage("fit"):
        cfg = load_calibration(args.config)
        table = table_from_calibration(cfg)
        fit_cfg = fit_config_from_calibration(cfg)
        if args.seed is not None:
            fit_cfg = type(fit_cfg)(**{**fit_cfg.__dict__, "seed": args.seed})
        model = fit_intensity_model(table, fit_cfg)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "model.json")
        pred = model.predict(table.intensities)
        rel = np.abs(pred - table.impedances) / table.impedances
        (out / "fit_report.json").write_text(json.dumps({
            "rows": [{"tissue": r[0], "intensity": r[1], "impedance_mrayl": r[2],
                      "predicted": float(p), "rel_error": float(e)}
                     for r, p, e in zip(table.rows, pred, rel)],
            "mean_rel_error": float(rel.mean()),
        }, indent=2) + "\n")
    man.write(out)
    return 0


def cmd_mri_map(args) -> int:
    out = Path(args.out)
    man = Manifest("mri-map", vars(args), args.seed, default_backend_name())
    with man.stage("map"):
        vol = load_volume(_require(args.volume, "volume file"), _detect_format(args.volume))
        model = IntensityImpedanceModel.load(_require(args.model, "model file"))
        z = mri_to_impedance(vol, model)
        out.mkdir(parents=True, exist_ok=True)
        save_volume(z, out / "impedance.json", VolumeFormat.RAW_JSON)
    man.write(out)
    return 0


def cmd_metrics(args) -> int:
    out = Path(args.out)
    man = Manifest("metrics", vars(args), args.seed, default_backend_name())
    with man.stage("metrics"):
        a = read_npy_image(_require(args.a, "image a"))
        b = read_npy_image(_require(args.b, "image b"))
        report = compare(a, b, align=not args.no_align)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    man.write(out)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_ablate(args) -> int:
    out = Path(args.out)
    backend = None if args.backend == "auto" else args.backend
    man = Manifest("ablate", vars(args), args.seed, get_backend(backend).name)
    with man.stage("load"):
        vol = load_volume(_require(args.volume, "volume file"), _detect_format(args.volume))
        pose = TransducerPose.from_json(_require(args.pose, "pose file"))
        fan = FanConfig.from_json(_require(args.fan, "fan file"))
        reference = read_npy_image(_require(args.reference, "reference image"))
        artifacts = None
        if args.artifacts:
            artifacts = ArtifactConfig.from_json(_require(args.artifacts, "artifact config"))
            if args.seed is not None:
                artifacts = ArtifactConfig(**{**artifacts.__dict__, "seed": args.seed})
        map_path = _require(args.map_config, "mapping config")
        mapper = lambda v: _apply_mapping(v, str(map_path))  # noqa: E731
    with man.stage("ablate"):
        rows = ablation_report(vol, mapper, pose, fan, reference, artifacts,
                               space=args.space, scan_dims=_parse_dims(args.scan_dims),
                               num_threads=args.threads)
    with man.stage("write"):
        out.mkdir(parents=True, exist_ok=True)
        table = [{"config": r.config, **r.report.to_dict()} for r in rows]
        (out / "ablation.json").write_text(json.dumps(table, indent=2) + "\n")
        for i, r in enumerate(rows):
            tag = "".join(k[0].upper() for k, v in r.config.items() if v)
            write_npy_image(out / f"row{i}_{tag}_diff.npy", r.aligned_difference,
                            {"config": r.config})
        _print_ablation_table(table)
    man.write(out)
    return 0


def _print_ablation_table(table):
    cols = ("sampling", "mapping", "propagating", "artifacts")
    print(" | ".join(f"{c:>11}" for c in cols) + " | " +
          " | ".join(f"{m:>8}" for m in ("mse", "ssim", "ncc", "mae")))
    for row in table:
        marks = " | ".join(f"{'x' if row['config'][c] else '':>11}" for c in cols)
        vals = " | ".join(f"{row[m]:8.4f}" for m in ("mse", "ssim", "ncc", "mae"))
        print(marks + " | " + vals)


def cmd_register(args) -> int:
    out = Path(args.out)
    backend = None if args.backend == "auto" else args.backend
    man = Manifest("register", vars(args), args.seed, get_backend(backend).name)
    with man.stage("load"):
        vol = load_volume(_require(args.volume, "volume file"), _detect_format(args.volume))
        fan = FanConfig.from_json(_require(args.fan, "fan file"))
        fixed = read_npy_image(_require(args.fixed, "fixed image"))
        init_cfg = json.loads(_require(args.init_pose, "initial pose").read_text())
        try:
            q0 = np.asarray(init_cfg["pose_vector"], dtype=np.float64)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"--init-pose JSON needs key pose_vector: {exc}") from exc
        problem = RegistrationProblem(
            fixed=fixed, volume=vol, fan=fan, initial_pose=q0,
            loss=LossKind[args.loss.upper()],
            optimizer=OptimizerConfig(step_size=args.step_size, max_iters=args.max_iters))
    with man.stage("register"):
        q, trace = register_slice(problem, num_threads=args.threads, backend=backend)
    with man.stage("write"):
        out.mkdir(parents=True, exist_ok=True)
        pose_path = Path(args.out_pose) if args.out_pose else out / "pose.json"
        pose_path.write_text(json.dumps({"pose_vector": q.tolist()}, indent=2) + "\n")
        (out / "trace.json").write_text(json.dumps(trace, indent=2) + "\n")
    man.write(out)
    print(f"final loss {trace[-1]['loss']:.6g} after {trace[-1]['iter']} iterations")
    return 0


def _bench_phantom(depth_mm: float) -> VolumeGrid:
    """Smooth blob phantom: enough structure to exercise the solver without
    resonant noise profiles."""
    n = 48
    spacing = (2.0 * depth_mm / n,) * 3
    ax = np.arange(n) * spacing[0]
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    c = ax[n // 2]
    blob = 0.15 * np.exp(-((X - c) ** 2 + (Y - c) ** 2 + (Z - c) ** 2) / (2 * (0.2 * depth_mm) ** 2))
    ripple = 0.05 * np.sin(2 * np.pi * X / (0.3 * depth_mm)) * np.sin(2 * np.pi * Y / (0.37 * depth_mm))
    data = 1.5 + blob + ripple
    return VolumeGrid((n, n, n), spacing, (0.0, 0.0, 0.0), data, VolumeKind.IMPEDANCE_MRAYL)


def cmd_bench(args) -> int:
    out = Path(args.out)
    rays = [int(x) for x in args.rays.split(",")]
    samples = [int(x) for x in args.samples.split(",")]
    which = args.bench_backend
    names = {"active": [None if args.backend == "auto" else args.backend],
             "both": available_backends(),
             }.get(which, [which])
    man = Manifest("bench", vars(args), args.seed, default_backend_name())
    volume = _bench_phantom(args.depth_mm)
    results = []
    for backend in names:
        bname = get_backend(backend).name
        for s in samples:
            for r in rays:
                fan = FanConfig(n_rays=r, n_samples=s, depth_mm=args.depth_mm)
                pose = TransducerPose(
                    position=(args.depth_mm, args.depth_mm, 2.0),
                    axis=(0.0, 0.0, 1.0), in_plane=(1.0, 0.0, 0.0))
                times = []
                for _ in range(args.iterations):
                    t0 = time.perf_counter()
                    render(volume, pose, fan, None, num_threads=args.threads,
                           backend=backend)
                    times.append(time.perf_counter() - t0)
                results.append({"backend": bname, "rays": r, "samples": s,
                                "mean_s": float(np.mean(times)),
                                "min_s": float(np.min(times)),
                                "iterations": args.iterations})
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(results, indent=2) + "\n")
    for bname in {r["backend"] for r in results}:
        print(f"backend: {bname} (mean seconds over {args.iterations} iterations)")
        hdr = "samples " + "".join(f"{r:>10}" for r in rays)
        print(hdr)
        for s in samples:
            row = [f"{s:<8}"]
            for r in rays:
                cell = next(x for x in results
                            if x["backend"] == bname and x["rays"] == r and x["samples"] == s)
                row.append(f"{cell['mean_s']:>9.3f}s")
            print("".join(row))
    man.write(out)
    return 0


_COMMANDS = {
    "render": cmd_render,
    "ct-map": cmd_ct_map,
    "fit-map": cmd_fit_map,
    "mri-map": cmd_mri_map,
    "metrics": cmd_metrics,
    "ablate": cmd_ablate,
    "register": cmd_register,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VolumeFormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SonotraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
