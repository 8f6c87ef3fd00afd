import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorgnn import autodiff as ad
from anchorgnn.anchoring import TrainConfig, train
from anchorgnn.graphs import GeneratorConfig, generate
from anchorgnn.metrics import ece
from anchorgnn.model import ModelSpec, forward, make_batch
from anchorgnn.posthoc import (
    CalibrationError,
    TemperatureScaler,
    VectorScaler,
    apply_temperature,
    apply_vector_scaling,
    fit_temperature,
    fit_vector_scaling,
    nll,
    scaler_from_json,
)


def calibrated(rng, n, q, scale=1.0):
    """Logits together with labels drawn from their own softmax, so T = 1 is NLL-optimal in expectation."""
    z = rng.normal(size=(n, q)) * scale
    p = ad.softmax(z)
    y = np.array([rng.choice(q, p=row) for row in p])
    return z, y


# -- temperature -----------------------------------------------------------------

def test_symmetric_case_fits_unit_temperature():
    # label frequencies equal softmax(z) exactly, so dNLL/dT vanishes at T = 1
    z = np.array([[math.log(3.0), 0.0]] * 4)
    y = np.array([0, 0, 0, 1])  # empirical frequency 3/4 = softmax(z)[0]
    assert fit_temperature(z, y).T == pytest.approx(1.0, abs=1e-3)


def test_overconfident_logits_recover_temperature():
    z, y = calibrated(np.random.default_rng(0), 20_000, 4, scale=1.5)
    T = fit_temperature(10 * z, y).T
    assert abs(T - 10) / 10 <= 0.02


def test_boundary_temperature_warns():
    z = np.array([[50.0, 0.0], [0.0, 50.0], [50.0, 0.0], [0.0, 50.0]])
    y = np.array([1, 0, 0, 1])  # hopelessly overconfident
    with pytest.warns(RuntimeWarning, match="boundary"):
        s = fit_temperature(z, y)
    assert s.T == pytest.approx(math.exp(3), rel=1e-4)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_temperature(z, y, warn=False)


@settings(max_examples=60)
@given(st.integers(0, 55), st.integers(2, 5), st.floats(0.1, 8.0), st.integers(0, 2**32 - 1))
def test_temperature_never_worsens_val_nll(extra, q, scale, seed):
    rng = np.random.default_rng(seed)
    n = q + extra
    z = rng.normal(size=(n, q)) * scale
    y = rng.integers(0, q, size=n)
    y[:2] = [0, 1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = fit_temperature(z, y)
    assert nll(z / s.T, y) <= nll(z, y)
    assert np.array_equal(apply_temperature(s, z).argmax(axis=1), z.argmax(axis=1))


def test_temperature_does_not_hurt_fitting_set_ece():
    # statistical property over 5 generated datasets; id_val needs enough graphs for ECE to mean anything
    for seed in range(5):
        splits = generate(GeneratorConfig(num_graphs=400, size_range=(8, 16), seed=seed))
        spec = ModelSpec(input_dim=splits.feature_dim, num_classes=splits.num_classes, hidden_dim=16)
        params = train(spec, splits, TrainConfig(epochs=30, lr=0.01, seed=seed)).params
        b = make_batch(splits.id_val)
        z = forward(spec, params, b).data
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s = fit_temperature(z, b.graph_labels)
        assert ece((apply_temperature(s, z), b.graph_labels)) <= ece((ad.softmax(z), b.graph_labels)) + 0.02


def test_apply_temperature_limits(rng):
    z = rng.normal(size=(6, 4)) * 3
    np.testing.assert_array_equal(apply_temperature(TemperatureScaler(1.0), z), ad.softmax(z))
    p = apply_temperature(TemperatureScaler(1e6), z)
    assert np.all(p.max(axis=1) - p.min(axis=1) < 1e-5)
    for T in (0.1, 1.0, 10.0):
        np.testing.assert_array_equal(apply_temperature(TemperatureScaler(T), z).argmax(axis=1), z.argmax(axis=1))


def test_temperature_rejects_degenerate_inputs():
    with pytest.raises(CalibrationError, match="single class"):
        fit_temperature(np.zeros((5, 2)), [1] * 5)
    with pytest.raises(CalibrationError):
        fit_temperature(np.zeros((2, 3)), [0, 1])
    with pytest.raises(CalibrationError):
        TemperatureScaler(0.0)


# -- vector scaling --------------------------------------------------------------

def test_vector_scaling_never_worsens_calibrated_logits():
    z, y = calibrated(np.random.default_rng(1), 400, 3)
    s = fit_vector_scaling(z, y)
    assert nll(z * s.w + s.b, y) <= nll(z, y) + 1e-9


def test_vector_scaling_removes_constant_offset():
    z, y = calibrated(np.random.default_rng(2), 20_000, 2, scale=2.0)
    shifted = z + np.array([2.0, 0.0])
    s = fit_vector_scaling(shifted, y)
    assert abs(nll(shifted * s.w + s.b, y) - nll(z, y)) <= 1e-3


def test_identity_vector_scaler_is_softmax(rng):
    z = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(apply_vector_scaling(VectorScaler(np.ones(3), np.zeros(3)), z), ad.softmax(z))


def test_vector_scaling_needs_two_rows_per_class():
    with pytest.raises(CalibrationError):
        fit_vector_scaling(np.zeros((5, 3)), [0, 1, 2, 0, 1])


def test_scalers_round_trip_json():
    t = TemperatureScaler(2.5)
    v = VectorScaler(np.array([1.0, 0.5]), np.array([0.1, -0.1]))
    assert scaler_from_json(t.to_json()) == t
    back = scaler_from_json(v.to_json())
    np.testing.assert_array_equal(back.w, v.w)
    np.testing.assert_array_equal(back.b, v.b)
