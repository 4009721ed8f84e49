import numpy as np
import pytest

from fluxdict import actstore, whitening
from fluxdict.actstore import SyntheticSpec
from fluxdict.errors import StorageError, ValidationError


def _aniso(n=32, rows=20_000, alpha=2.0, seed=0):
    return actstore.generate(SyntheticSpec(hidden_dim=n, n_rows=rows, spectrum_exponent=alpha, seed=seed))


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30)


def test_white_data_stays_white():
    n = 8
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((100 * n, n))
    wh = whitening.fit(rows)
    out = wh.forward(rows)
    np.testing.assert_allclose(np.cov(out.T, bias=True), np.eye(n), atol=5e-2)


def test_constant_column_is_clamped():
    rng = np.random.default_rng(1)
    rows = rng.standard_normal((500, 4))
    rows[:, 2] = 3.0
    wh = whitening.fit(rows)
    assert wh.comp_std.min() == whitening.EPS_STD
    assert wh.warnings
    out = wh.forward(rows)
    assert np.isfinite(out).all()
    np.testing.assert_allclose(wh.inverse(out), rows, rtol=1e-6, atol=1e-6)


def test_anisotropic_whitened_variances_within_band():
    data = _aniso()
    rows = data.shard.data.astype(np.float64)
    wh = whitening.fit(rows)
    out = wh.forward(rows)
    var = out.var(axis=0)
    assert np.all((var > 0.9) & (var < 1.1))
    assert np.all(np.abs(out.mean(axis=0)) < 1e-3)


def test_round_trips_and_orthonormality():
    data = _aniso(n=16, rows=5000, seed=3)
    rows = data.shard.data.astype(np.float64)
    wh = whitening.fit(rows)
    np.testing.assert_allclose(wh.projection.T @ wh.projection, np.eye(16), atol=1e-5)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 16)) * 3
    assert _rel(wh.inverse(wh.forward(x)), x) < 1e-5
    y = rng.normal(size=(50, 16))
    assert _rel(wh.forward(wh.inverse(y)), y) < 1e-5


def test_float32_inputs_stay_float32():
    data = _aniso(n=8, rows=2000)
    wh = whitening.fit(data.shard.data)
    out = wh.forward(data.shard.data)
    assert out.dtype == np.float32
    assert _rel(wh.inverse(out).astype(np.float64), data.shard.data.astype(np.float64)) < 1e-5


def test_forward_is_affine():
    data = _aniso(n=12, rows=3000, seed=4)
    wh = whitening.fit(data.shard.data)
    rng = np.random.default_rng(2)
    x, z = rng.normal(size=(2, 5, 12))
    zero = np.zeros((1, 12))
    lhs = wh.forward(x + z) - wh.forward(x) - wh.forward(z) + wh.forward(zero)
    np.testing.assert_allclose(lhs, 0.0, atol=1e-5)


def test_zero_maps_back_to_scaled_mean():
    data = _aniso(n=6, rows=1000, seed=5)
    wh = whitening.fit(data.shard.data)
    got = wh.inverse(np.zeros((1, 6)))[0]
    np.testing.assert_allclose(got, wh.projection.T @ (wh.comp_mean * wh.comp_std), atol=1e-12)


def test_point_mass_maps_to_zero():
    rows = np.tile(np.array([1.0, -2.0, 0.5]), (10, 1))
    wh = whitening.fit(rows)
    np.testing.assert_allclose(wh.forward(rows[:1]), 0.0, atol=1e-9)


def test_identity_whitener_is_identity():
    wh = whitening.identity(5)
    x = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(wh.forward(x), x)
    np.testing.assert_array_equal(wh.inverse(x), x)
    assert wh.is_rotation_free


def test_sign_convention_and_determinism():
    data = _aniso(n=10, rows=4000, seed=6)
    a = whitening.fit(data.shard.data)
    b = whitening.fit(data.shard.data)
    assert whitening.to_bytes(a) == whitening.to_bytes(b)
    peak = np.abs(a.projection).argmax(axis=1)
    assert np.all(a.projection[np.arange(10), peak] > 0)


def test_underdetermined_fit_warns():
    rows = np.random.default_rng(0).normal(size=(3, 6))
    with pytest.warns(RuntimeWarning):
        wh = whitening.fit(rows)
    assert any("only 3 rows" in w for w in wh.warnings)


def test_validation_errors():
    with pytest.raises(ValidationError):
        whitening.fit(np.array([[1.0, np.nan], [0.0, 1.0]]))
    wh = whitening.identity(3)
    with pytest.raises(ValidationError):
        wh.forward(np.zeros((2, 4)))
    with pytest.raises(ValidationError):
        wh.inverse(np.zeros((2, 2)))


def test_standardizer_has_no_rotation():
    data = _aniso(n=8, rows=3000)
    wh = whitening.fit_standardizer(data.shard.data)
    assert wh.is_rotation_free
    out = wh.forward(data.shard.data.astype(np.float64))
    np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-9)


def test_fit_from_batches_uses_first_batches():
    data = _aniso(n=8, rows=4000)
    stream = actstore.sample_batches([data.shard], 100, seed=0)
    wh = whitening.fit_from_batches(stream, n_batches=5)
    assert wh.fitted_on == 500


def test_spectrum_cases():
    rng = np.random.default_rng(0)
    iso = whitening.spectrum(rng.standard_normal((20_000, 16)))
    assert iso.top_fraction[1] == pytest.approx(1 / 16, abs=0.01)
    rep = whitening.spectrum(np.tile(rng.normal(size=(1, 5)), (4, 1)) + np.arange(4)[:, None] * np.ones(5))
    assert np.sum(rep.eigenvalues > 1e-9) == 1
    assert np.all(np.diff(iso.eigenvalues) <= 0)


def test_spectrum_alpha2_top64_for_n512():
    eig = (np.arange(512) + 1.0) ** -2
    assert eig[:64].sum() / eig.sum() > 0.95  # analytic share
    data = actstore.generate(SyntheticSpec(hidden_dim=512, n_rows=8000, spectrum_exponent=2.0, seed=0))
    assert whitening.spectrum(data.shard.data).top_fraction[64] > 0.95


def test_file_round_trip(tmp_path):
    data = _aniso(n=7, rows=800)
    wh = whitening.fit(data.shard.data)
    p = tmp_path / "w.bin"
    whitening.save(wh, p)
    back = whitening.load(p)
    assert whitening.to_bytes(back) == p.read_bytes()
    np.testing.assert_array_equal(back.projection, wh.projection)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(StorageError):
        whitening.load(p)
