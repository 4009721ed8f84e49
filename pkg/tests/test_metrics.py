import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fluxdict import actstore, itda, metrics, sae
from fluxdict.actstore import ActivationShard
from fluxdict.errors import ValidationError

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def test_fvu_examples():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(30, 4))
    assert metrics.fvu(y, y) == 0.0
    mean = np.broadcast_to(y.mean(axis=0), y.shape)
    assert metrics.fvu(mean, y) == pytest.approx(1.0, abs=1e-9)
    star = np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert metrics.fvu(np.zeros((2, 2)), star) == 1.0


def test_fvu_can_exceed_one_and_clamps_constant_target():
    star = np.array([[1.0], [-1.0]])
    assert metrics.fvu(np.array([[-3.0], [3.0]]), star) > 1
    const = np.ones((3, 2))
    assert metrics.fvu(const + 1, const) == pytest.approx(1.0 / metrics.DENOM_FLOOR)


def test_fvu_shape_mismatch():
    with pytest.raises(ValidationError):
        metrics.fvu(np.zeros((2, 3)), np.zeros((3, 2)))


def test_mse_numerator_translation_invariant():
    rng = np.random.default_rng(1)
    y, s = rng.normal(size=(2, 10, 3))
    c = rng.normal(size=3)
    assert metrics.mse(y + c, s + c) == pytest.approx(metrics.mse(y, s), rel=1e-12)


def test_variance_explained_examples():
    rng = np.random.default_rng(2)
    s = rng.normal(size=(200, 5))
    assert metrics.variance_explained(s, s) == pytest.approx(1.0, abs=1e-12)
    assert metrics.variance_explained(2 * s + 3, s) == pytest.approx(1.0, abs=1e-9)
    indep = rng.normal(size=(200_000, 3))
    other = rng.normal(size=(200_000, 3))
    assert metrics.variance_explained(indep, other) < 1e-3
    with pytest.raises(ValidationError):
        metrics.variance_explained(s[:1], s[:1])


def test_variance_explained_constant_dims_contribute_zero():
    s = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    assert metrics.variance_explained(s, s) == pytest.approx(0.5)


@settings(max_examples=60, deadline=None)
@given(y=arrays(np.float64, (12, 3), elements=finite), s=arrays(np.float64, (12, 3), elements=finite),
       a=st.floats(0.1, 10) | st.floats(-10, -0.1), b=finite)
def test_variance_explained_range_and_affine_invariance(y, s, a, b):
    ve = metrics.variance_explained(y, s)
    assert -1e-9 <= ve <= 1 + 1e-9
    # scaling can push a barely-varying column across the floor; only compare well-conditioned cases
    if np.all(y.var(axis=0) > 1e-6) and np.all(s.var(axis=0) > 1e-6):
        assert metrics.variance_explained(a * y + b, s) == pytest.approx(ve, abs=1e-9)


def test_dead_and_l0_on_tiny_identity_sae():
    eye = np.eye(3)
    z = np.zeros(3)
    m = sae.SaeModel(eye.copy(), eye.copy(), z.copy(), z.copy(), z.copy(), k=3)
    rows = np.array([[1.0, -1.0, 2.0], [0.5, -2.0, 0.0]])  # latent 1 never positive
    stats = metrics.dead_and_l0(m, rows)
    assert stats.dead_fraction == pytest.approx(1 / 3)
    assert stats.fire_counts.tolist() == [2, 0, 1]
    assert stats.mean_l0 == pytest.approx(1.5)
    assert stats.dead_fraction + np.mean(stats.fire_counts > 0) == 1.0


def test_itda_mean_l0_bounded_by_k():
    data = actstore.generate(actstore.SyntheticSpec(mode="planted_dictionary", hidden_dim=16, n_rows=3000,
                                                    planted_dict_size=32, planted_sparsity=3, noise_std=0.05))
    m, _ = itda.itda_train([data.shard], itda.ItdaConfig(threshold=0.2, k=3))
    report = metrics.evaluate(m, data.shard.data[:1000])
    assert report.mean_l0 <= 3
    assert report.model_kind == "itda" and report.d == m.size
    assert 0 <= report.dead_fraction <= 1


def test_evaluate_report_fields_and_dim_check():
    rng = np.random.default_rng(3)
    m = sae.init_model(6, 12, 2, rng)
    rows = rng.normal(size=(100, 6))
    report = metrics.evaluate(m, rows, layer_id=4)
    d = report.to_dict()
    assert d["n_rows_evaluated"] == 100 and d["layer_id"] == 4 and d["k"] == 2
    assert d["mean_l0"] <= 2
    with pytest.raises(ValidationError, match="6.*7"):
        metrics.evaluate(m, rng.normal(size=(10, 7)))


def test_norm_profile_cases():
    zero = ActivationShard(np.zeros((10, 4), np.float32), layer_id=0, timestep=0)
    assert metrics.norm_profile([zero])[0]["mean"] == 0.0
    rng = np.random.default_rng(4)
    base = rng.normal(size=(500, 8)).astype(np.float32)
    a = metrics.norm_profile([ActivationShard(base)])[0]["mean"]
    b = metrics.norm_profile([ActivationShard(base * 10)])[0]["mean"]
    assert b == pytest.approx(10 * a, rel=1e-6)
    shards = [ActivationShard(base * (1 + t), layer_id=2, timestep=t) for t in (3, 0, 2, 1)]
    table = metrics.norm_profile(shards)
    assert [r["timestep"] for r in table] == [0, 1, 2, 3]
    means = [r["mean"] for r in table]
    assert means == sorted(means)
    assert all(r["p5"] <= r["mean"] <= r["p95"] for r in table)
