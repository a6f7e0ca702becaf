import numpy as np
import pytest

from sonotrace import (ConfigError, FitConfig, FitError, IntensityImpedanceModel,
                       PiecewiseLinearMap, TissueReferenceTable, VolumeGrid,
                       VolumeKind, ct_to_impedance, default_calibration,
                       fit_intensity_model, mri_to_impedance)
from sonotrace.impedance import maps_from_calibration, table_from_calibration

# the transcribed default calibration knots, used as the lookup oracle
DENSITY_TABLE = [(-1000.0, 1.2), (0.0, 1000.0), (1000.0, 1590.0), (2000.0, 2100.0)]
SPEED_TABLE = [(-1000.0, 343.0), (0.0, 1540.0), (1000.0, 2600.0), (2000.0, 3500.0)]


def _vol(data, kind=VolumeKind.HU, dims=(2, 2, 2)):
    return VolumeGrid(dims, (1, 1, 1), (0, 0, 0), np.asarray(data, float), kind)


def test_default_maps_match_transcribed_tables():
    cal = default_calibration()
    density, speed = maps_from_calibration(cal)
    for hu, rho in DENSITY_TABLE:
        assert density(hu) == rho
    for hu, c in SPEED_TABLE:
        assert speed(hu) == c


def test_piecewise_interpolation_and_extrapolation():
    m = PiecewiseLinearMap(((0.0, 0.0), (1.0, 2.0), (3.0, 4.0)))
    assert m(0.5) == pytest.approx(1.0)
    assert m(2.0) == pytest.approx(3.0)
    assert m(-1.0) == pytest.approx(-2.0)   # slope 2 below
    assert m(4.0) == pytest.approx(5.0)     # slope 1 above
    np.testing.assert_allclose(m(np.array([0.5, 2.0])), [1.0, 3.0])


def test_piecewise_validation():
    with pytest.raises(ConfigError):
        PiecewiseLinearMap(((0.0, 1.0),))
    with pytest.raises(ConfigError):
        PiecewiseLinearMap(((0.0, 1.0), (0.0, 2.0)))


def test_ct_water_anchor():
    density, speed = maps_from_calibration(default_calibration())
    z = ct_to_impedance(_vol(np.zeros(8)), density, speed)
    np.testing.assert_allclose(z.data, 1.54, rtol=1e-14)
    assert z.kind is VolumeKind.IMPEDANCE_MRAYL


def test_ct_constant_volume_maps_to_constant():
    density, speed = maps_from_calibration(default_calibration())
    z = ct_to_impedance(_vol(np.full(8, 37.0)), density, speed)
    assert np.ptp(z.data) == 0.0
    assert z.dims == (2, 2, 2)


def test_ct_monotone_on_default_maps():
    density, speed = maps_from_calibration(default_calibration())
    hu = np.linspace(-1000, 2000, 601)
    v = VolumeGrid((601, 1, 1), (1, 1, 1), (0, 0, 0), hu, VolumeKind.HU)
    z = ct_to_impedance(v, density, speed).data.ravel()
    assert np.all(np.diff(z) > 0)


def test_ct_rejects_nonpositive_map():
    density = PiecewiseLinearMap(((-1000.0, -5.0), (0.0, 1000.0)))
    speed = PiecewiseLinearMap(((-1000.0, 343.0), (0.0, 1540.0)))
    with pytest.raises(ConfigError):
        ct_to_impedance(_vol(np.full(8, -1000.0)), density, speed)


def test_ct_requires_hu_kind():
    density, speed = maps_from_calibration(default_calibration())
    with pytest.raises(ConfigError):
        ct_to_impedance(_vol(np.zeros(8), VolumeKind.MRI_INTENSITY), density, speed)


def test_map_commutes_with_crop():
    rng = np.random.default_rng(0)
    density, speed = maps_from_calibration(default_calibration())
    v = VolumeGrid((4, 4, 4), (1, 1, 1), (0, 0, 0),
                   rng.uniform(-200, 800, (4, 4, 4)), VolumeKind.HU)
    a = ct_to_impedance(v.crop((1, 0, 1), (3, 3, 4)), density, speed)
    b = ct_to_impedance(v, density, speed).crop((1, 0, 1), (3, 3, 4))
    np.testing.assert_array_equal(a.data, b.data)
    assert a.origin == b.origin


DEFAULT_TABLE = TissueReferenceTable(
    (("air", 0.0, 0.0004), ("csf", 0.2, 1.48), ("wm", 0.5, 1.55), ("gm", 0.9, 1.62)))


def test_fit_converges_on_reference_table():
    model = fit_intensity_model(DEFAULT_TABLE)
    pred = model.predict(DEFAULT_TABLE.intensities)
    rel = np.abs(pred - DEFAULT_TABLE.impedances) / DEFAULT_TABLE.impedances
    assert rel.max() <= 0.05


def test_fit_is_deterministic():
    m1 = fit_intensity_model(DEFAULT_TABLE, FitConfig(epochs=500, tolerance=1.0))
    m2 = fit_intensity_model(DEFAULT_TABLE, FitConfig(epochs=500, tolerance=1.0))
    for (w1, b1), (w2, b2) in zip(m1.layers, m2.layers):
        np.testing.assert_array_equal(w1, w2)
        np.testing.assert_array_equal(b1, b2)


def test_fit_rejects_ill_posed_table():
    table = TissueReferenceTable(
        (("a", 0.5, 1.0), ("b", 0.5, 2.0), ("c", 0.7, 1.5), ("d", 0.9, 1.6)))
    with pytest.raises(FitError):
        fit_intensity_model(table)


def test_fit_requires_four_rows():
    table = TissueReferenceTable((("a", 0.1, 1.0), ("b", 0.9, 2.0)))
    with pytest.raises(FitError):
        fit_intensity_model(table)


def test_fit_nonconvergence_reports_loss():
    with pytest.raises(FitError) as err:
        fit_intensity_model(DEFAULT_TABLE, FitConfig(epochs=2, tolerance=1e-6))
    assert err.value.final_loss is not None


def test_fit_seed_changes_parameters():
    m1 = fit_intensity_model(DEFAULT_TABLE, FitConfig(epochs=500, seed=0, tolerance=1.0))
    m2 = fit_intensity_model(DEFAULT_TABLE, FitConfig(epochs=500, seed=1, tolerance=1.0))
    assert any(not np.array_equal(w1, w2)
               for (w1, _), (w2, _) in zip(m1.layers, m2.layers))


def test_model_round_trip(tmp_path):
    model = fit_intensity_model(DEFAULT_TABLE, FitConfig(epochs=500, tolerance=1.0))
    model.save(tmp_path / "m.json")
    loaded = IntensityImpedanceModel.load(tmp_path / "m.json")
    x = np.linspace(0, 1, 31)
    np.testing.assert_allclose(loaded.predict(x), model.predict(x), rtol=1e-12)


def test_mri_constant_volume_at_training_intensity():
    model = fit_intensity_model(DEFAULT_TABLE)
    v = _vol(np.full(8, 0.5), VolumeKind.MRI_INTENSITY)
    z = mri_to_impedance(v, model)
    np.testing.assert_allclose(z.data, 1.55, rtol=0.05)
    assert np.ptp(z.data) == 0.0
    assert z.dims == v.dims and z.spacing == v.spacing


def test_model_clamp_rule():
    # identity network: prediction equals input, then clamped to [1, 2]
    model = IntensityImpedanceModel(layers=[(np.array([[1.0]]), np.zeros(1))],
                                    input_normalization=(0.0, 1.0),
                                    output_range=(1.0, 2.0))
    assert model.predict(3.0) == 2.0
    assert model.predict(0.0) == 1.0
    assert model.predict(1.5) == 1.5


def test_mri_output_within_range():
    model = fit_intensity_model(DEFAULT_TABLE)
    rng = np.random.default_rng(1)
    v = _vol(rng.uniform(0, 1, 8), VolumeKind.MRI_INTENSITY)
    z = mri_to_impedance(v, model)
    zmin, zmax = model.output_range
    assert np.all(z.data >= zmin) and np.all(z.data <= zmax)
    assert np.all(z.data > 0)


def test_mri_requires_intensity_kind():
    model = fit_intensity_model(DEFAULT_TABLE, FitConfig(epochs=500, tolerance=1.0))
    with pytest.raises(ConfigError):
        mri_to_impedance(_vol(np.zeros(8), VolumeKind.HU), model)


def test_mri_percentile_normalization_for_raw_scanner_values():
    model = fit_intensity_model(DEFAULT_TABLE)
    rng = np.random.default_rng(2)
    raw = rng.uniform(0, 4000.0, (6, 6, 6))
    v = VolumeGrid((6, 6, 6), (1, 1, 1), (0, 0, 0), raw, VolumeKind.MRI_INTENSITY)
    z = mri_to_impedance(v, model)
    zmin, zmax = model.output_range
    assert np.all((z.data >= zmin) & (z.data <= zmax))


def test_default_calibration_table_parses():
    table = table_from_calibration(default_calibration())
    assert len(table.rows) >= 4
    assert np.all(table.impedances > 0)
