import json

import numpy as np
import pytest

from sonotrace import VolumeFormat, VolumeGrid, VolumeKind, save_volume, load_volume
from sonotrace.cli import main
from sonotrace.geometry import FanConfig, TransducerPose
from sonotrace.imaging import render_raw_polar, write_npy_image

from helpers import smooth_phantom, sphere_phantom


@pytest.fixture()
def workspace(tmp_path):
    vol, _ = sphere_phantom(n=24, spacing=2.0, radius_mm=8.0)
    save_volume(vol, tmp_path / "vol.json", VolumeFormat.RAW_JSON)
    pose = TransducerPose(position=(24.0, 24.0, 2.0), axis=(0, 0, 1.0),
                          in_plane=(1.0, 0, 0))
    pose.to_json(tmp_path / "pose.json")
    fan = FanConfig(n_rays=16, n_samples=20, fan_angle=np.deg2rad(40), depth_mm=30.0)
    fan.to_json(tmp_path / "fan.json")
    return tmp_path


def test_render_writes_outputs_and_manifest(workspace):
    out = workspace / "out"
    rc = main(["render", "--volume", str(workspace / "vol.json"),
               "--pose", str(workspace / "pose.json"),
               "--fan", str(workspace / "fan.json"),
               "--out", str(out), "--scan-dims", "64x64"])
    assert rc == 0
    for name in ("polar.npy", "cartesian.npy", "polar.pgm", "cartesian.pgm",
                 "manifest.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "render"
    assert "render" in manifest["timings_s"]
    assert manifest["versions"]["backend"] in ("compiled", "numpy")


def test_render_reruns_are_byte_identical(workspace):
    out1, out2 = workspace / "o1", workspace / "o2"
    for out in (out1, out2):
        rc = main(["render", "--volume", str(workspace / "vol.json"),
                   "--pose", str(workspace / "pose.json"),
                   "--fan", str(workspace / "fan.json"),
                   "--out", str(out), "--format", "npy", "--scan-dims", "48x48"])
        assert rc == 0
    assert (out1 / "polar.npy").read_bytes() == (out2 / "polar.npy").read_bytes()
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    m1["config"].pop("out")
    m2["config"].pop("out")
    for key in ("command", "config", "seed", "versions"):
        assert m1[key] == m2[key]


def test_render_missing_pose_exits_1(workspace):
    rc = main(["render", "--volume", str(workspace / "vol.json"),
               "--pose", str(workspace / "nope.json"),
               "--fan", str(workspace / "fan.json"),
               "--out", str(workspace / "out")])
    assert rc == 1


def test_render_corrupt_volume_exits_2(workspace):
    raw = workspace / "vol.raw"
    raw.write_bytes(raw.read_bytes()[:-16])
    rc = main(["render", "--volume", str(workspace / "vol.json"),
               "--pose", str(workspace / "pose.json"),
               "--fan", str(workspace / "fan.json"),
               "--out", str(workspace / "out")])
    assert rc == 2


def test_render_requires_mapping_for_raw_volume(workspace, tmp_path):
    v = VolumeGrid((4, 4, 4), (1, 1, 1), (0, 0, 0), np.zeros(64), VolumeKind.HU)
    save_volume(v, tmp_path / "hu.json", VolumeFormat.RAW_JSON)
    rc = main(["render", "--volume", str(tmp_path / "hu.json"),
               "--pose", str(workspace / "pose.json"),
               "--fan", str(workspace / "fan.json"),
               "--out", str(tmp_path / "out")])
    assert rc == 1


def test_ct_map_water_anchor(tmp_path):
    v = VolumeGrid((4, 4, 4), (1, 1, 1), (0, 0, 0), np.zeros(64), VolumeKind.HU)
    save_volume(v, tmp_path / "hu.json", VolumeFormat.RAW_JSON)
    rc = main(["ct-map", "--volume", str(tmp_path / "hu.json"),
               "--out", str(tmp_path / "out")])
    assert rc == 0
    z = load_volume(tmp_path / "out" / "impedance.json", VolumeFormat.RAW_JSON)
    np.testing.assert_allclose(z.data, 1.54, rtol=1e-12)
    assert z.kind is VolumeKind.IMPEDANCE_MRAYL


def test_fit_map_converges_and_reports(tmp_path):
    rc = main(["fit-map", "--out", str(tmp_path / "fit")])
    assert rc == 0
    report = json.loads((tmp_path / "fit" / "fit_report.json").read_text())
    assert report["mean_rel_error"] <= 0.05
    assert (tmp_path / "fit" / "model.json").exists()


def test_fit_map_nonconvergence_exits_3(tmp_path):
    cfg = {
        "tissue_table": [
            {"tissue": "a", "intensity": 0.0, "impedance_mrayl": 0.0004},
            {"tissue": "b", "intensity": 0.2, "impedance_mrayl": 1.48},
            {"tissue": "c", "intensity": 0.5, "impedance_mrayl": 1.55},
            {"tissue": "d", "intensity": 0.9, "impedance_mrayl": 1.62},
        ],
        "fit": {"epochs": 2, "tolerance": 1e-9},
    }
    (tmp_path / "cal.json").write_text(json.dumps(cfg))
    rc = main(["fit-map", "--config", str(tmp_path / "cal.json"),
               "--out", str(tmp_path / "fit")])
    assert rc == 3


def test_mri_map_round_trip(tmp_path):
    rc = main(["fit-map", "--out", str(tmp_path / "fit")])
    assert rc == 0
    rng = np.random.default_rng(0)
    v = VolumeGrid((4, 4, 4), (1, 1, 1), (0, 0, 0), rng.uniform(0, 1, 64),
                   VolumeKind.MRI_INTENSITY)
    save_volume(v, tmp_path / "mri.json", VolumeFormat.RAW_JSON)
    rc = main(["mri-map", "--volume", str(tmp_path / "mri.json"),
               "--model", str(tmp_path / "fit" / "model.json"),
               "--out", str(tmp_path / "out")])
    assert rc == 0
    z = load_volume(tmp_path / "out" / "impedance.json", VolumeFormat.RAW_JSON)
    assert np.all(z.data > 0)


def test_metrics_command(tmp_path):
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (32, 32))
    write_npy_image(tmp_path / "a.npy", a)
    write_npy_image(tmp_path / "b.npy", np.roll(a, (2, 1), axis=(0, 1)))
    rc = main(["metrics", "--a", str(tmp_path / "a.npy"), "--b", str(tmp_path / "b.npy"),
               "--out", str(tmp_path / "m")])
    assert rc == 0
    rep = json.loads((tmp_path / "m" / "metrics.json").read_text())
    assert rep["shift_applied"] == [2, 1]
    assert rep["mse"] <= 1e-10


def test_ablate_command(tmp_path, workspace):
    # raw MRI-style volume + linear mapping config via fitted model
    rng = np.random.default_rng(2)
    n = 16
    data = np.clip(0.5 + 0.25 * rng.standard_normal((n, n, n)), 0, 1)
    v = VolumeGrid((n, n, n), (2.0,) * 3, (0, 0, 0), data, VolumeKind.MRI_INTENSITY)
    save_volume(v, tmp_path / "mri.json", VolumeFormat.RAW_JSON)
    assert main(["fit-map", "--out", str(tmp_path / "fit")]) == 0
    pose = TransducerPose(position=(16.0, 16.0, 2.0), axis=(0, 0, 1.0), in_plane=(1, 0, 0))
    pose.to_json(tmp_path / "pose.json")
    FanConfig(n_rays=12, n_samples=16, fan_angle=np.deg2rad(35), depth_mm=24.0
              ).to_json(tmp_path / "fan.json")
    ref = rng.uniform(0, 1, (48, 48))
    write_npy_image(tmp_path / "ref.npy", ref)
    rc = main(["ablate", "--volume", str(tmp_path / "mri.json"),
               "--map-config", str(tmp_path / "fit" / "model.json"),
               "--pose", str(tmp_path / "pose.json"),
               "--fan", str(tmp_path / "fan.json"),
               "--reference", str(tmp_path / "ref.npy"),
               "--scan-dims", "48x48",
               "--out", str(tmp_path / "abl")])
    assert rc == 0
    table = json.loads((tmp_path / "abl" / "ablation.json").read_text())
    assert len(table) == 6
    configs = {tuple(row["config"][k] for k in ("sampling", "mapping", "propagating",
                                                "artifacts")) for row in table}
    assert len(configs) == 6
    diffs = list((tmp_path / "abl").glob("row*_diff.npy"))
    assert len(diffs) == 6


def test_register_command_self_registration(tmp_path):
    vol = smooth_phantom(n=20, spacing=2.0, seed=5)
    save_volume(vol, tmp_path / "vol.json", VolumeFormat.RAW_JSON)
    fan = FanConfig(n_rays=24, n_samples=20, fan_angle=np.deg2rad(40), depth_mm=20.0)
    fan.to_json(tmp_path / "fan.json")
    q_true = np.array([20.0, 19.0, 3.0, 0.02, -0.03, 0.01])
    fixed = render_raw_polar(vol, TransducerPose.from_vector(q_true), fan)
    write_npy_image(tmp_path / "fixed.npy", fixed)
    q0 = q_true + np.array([0.6, -0.4, 0.3, 0.005, 0.004, -0.006])
    (tmp_path / "init.json").write_text(json.dumps({"pose_vector": q0.tolist()}))
    rc = main(["register", "--volume", str(tmp_path / "vol.json"),
               "--fixed", str(tmp_path / "fixed.npy"),
               "--fan", str(tmp_path / "fan.json"),
               "--init-pose", str(tmp_path / "init.json"),
               "--max-iters", "80",
               "--out", str(tmp_path / "reg")])
    assert rc == 0
    pose = json.loads((tmp_path / "reg" / "pose.json").read_text())
    q = np.asarray(pose["pose_vector"])
    assert np.linalg.norm(q[:3] - q_true[:3]) <= 0.2
    trace = json.loads((tmp_path / "reg" / "trace.json").read_text())
    losses = [t["loss"] for t in trace]
    assert all(a >= b - 1e-15 for a, b in zip(losses, losses[1:]))


def test_bench_command_grid(tmp_path):
    rc = main(["bench", "--rays", "16,32", "--samples", "16,24", "--iterations", "1",
               "--depth-mm", "40", "--bench-backend", "both",
               "--out", str(tmp_path / "bench")])
    assert rc == 0
    rows = json.loads((tmp_path / "bench" / "bench.json").read_text())
    backends = {r["backend"] for r in rows}
    assert len(rows) == 4 * len(backends)
    # more rays never cheaper at fixed depth (same backend), generous slack
    for b in backends:
        t16 = next(r for r in rows if r["backend"] == b and r["rays"] == 16
                   and r["samples"] == 24)
        t32 = next(r for r in rows if r["backend"] == b and r["rays"] == 32
                   and r["samples"] == 24)
        assert t32["mean_s"] >= 0.25 * t16["mean_s"]


def test_unknown_flag_exits_1():
    assert main(["render", "--bogus"]) == 1
