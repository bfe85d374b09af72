import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdisrad.cdis import MixingConfig, compute_cdis, fit_adc, log_floor, synthesize_signal
from cdisrad.cohort import CohortError, DwiStudy
from cdisrad.volume import Volume3D

from conftest import BVALUES, make_study


def test_constant_signal_fits_zero_adc(backend):
    study = make_study(np.ones((3, 3, 2)), np.zeros((3, 3, 2)))
    fit = fit_adc(study, backend=backend)
    np.testing.assert_allclose(fit.adc.data, 0.0, atol=1e-15)
    np.testing.assert_allclose(fit.s0.data, 1.0, rtol=1e-14)
    np.testing.assert_allclose(fit.residual.data, 0.0, atol=1e-14)


def test_exact_exponential_recovered(backend):
    study = make_study(np.full((2, 2, 2), 2.0), np.full((2, 2, 2), 0.002))
    fit = fit_adc(study, backend=backend)
    np.testing.assert_allclose(fit.s0.data, 2.0, rtol=1e-13)
    np.testing.assert_allclose(fit.adc.data, 0.002, rtol=1e-12)
    assert fit.residual.data.max() < 1e-12


def test_noisy_fit_matches_normal_equation_oracle(backend):
    rng = np.random.default_rng(11)
    s0 = rng.uniform(500, 1500, (6, 5, 4))
    adc = rng.uniform(5e-4, 2.5e-3, (6, 5, 4))
    study = make_study(s0, adc, noise=20.0, rng=rng)
    fit = fit_adc(study, backend=backend)
    b = np.array(BVALUES)
    A = np.array([[4.0, b.sum()], [b.sum(), (b * b).sum()]])
    y = np.log(np.maximum(study.signals(), fit.epsilon)).reshape(4, -1)
    coef = np.linalg.solve(A, np.stack([y.sum(0), b @ y]))
    np.testing.assert_allclose(fit.s0.data.ravel(), np.exp(coef[0]), rtol=1e-10)
    np.testing.assert_allclose(fit.adc.data.ravel(), -coef[1], rtol=1e-10)


def test_fit_needs_two_bvalues():
    study = DwiStudy((0.0,), (Volume3D(np.ones((2, 2, 2))),))
    with pytest.raises(CohortError, match="at least 2"):
        fit_adc(study)


def test_negative_intensities_clamped_and_counted():
    data = [np.full((2, 2, 1), 5.0), np.full((2, 2, 1), 2.0)]
    data[1][0, 0, 0] = -3.0
    study = DwiStudy((0.0, 100.0), tuple(Volume3D(d) for d in data))
    fit = fit_adc(study)
    assert fit.n_clamped == 1
    assert np.isfinite(fit.adc.data).all()
    assert fit.s0.data.min() >= 0


def test_all_zero_voxel_fits_through_floor():
    study = make_study(np.array([[[0.0]], [[100.0]]]), np.full((2, 1, 1), 1e-3))
    fit = fit_adc(study)
    assert fit.adc.data[0, 0, 0] == pytest.approx(0.0, abs=1e-15)
    assert fit.s0.data[0, 0, 0] == pytest.approx(fit.epsilon)


def test_log_floor_tracks_99th_percentile():
    x = np.arange(1, 101, dtype=float)
    assert log_floor(x) == pytest.approx(1e-6 * np.percentile(x, 99))
    assert log_floor(np.zeros(10)) == 1e-6


# --------------------------------------------------------------------------
# synthesis


def _fit(s0, adc):
    return fit_adc(make_study(s0, adc))


def test_synthesize_at_zero_returns_s0():
    fit = _fit(np.full((2, 2, 2), 3.0), np.full((2, 2, 2), 0.001))
    np.testing.assert_array_equal(synthesize_signal(fit, 0.0).data, fit.s0.data)


def test_synthesize_zero_adc_is_flat():
    fit = _fit(np.full((2, 2, 1), 7.0), np.zeros((2, 2, 1)))
    np.testing.assert_allclose(synthesize_signal(fit, 1500).data, fit.s0.data, rtol=1e-14)


def test_synthesize_closed_form():
    fit = _fit(np.full((1, 1, 1), 2.0), np.full((1, 1, 1), 0.002))
    assert synthesize_signal(fit, 1000).data[0, 0, 0] == pytest.approx(0.27067, abs=5e-6)
    assert synthesize_signal(fit, 1000).data[0, 0, 0] == pytest.approx(2 * math.exp(-2), rel=1e-12)


def test_synthesize_rejects_negative_b():
    fit = _fit(np.ones((1, 1, 1)), np.zeros((1, 1, 1)))
    with pytest.raises(ValueError):
        synthesize_signal(fit, -1)


def test_synthesize_reproduces_native_volume():
    rng = np.random.default_rng(4)
    study = make_study(rng.uniform(100, 900, (4, 4, 3)), rng.uniform(4e-4, 3e-3, (4, 4, 3)))
    fit = fit_adc(study)
    for b, vol in zip(study.bvalues, study.volumes):
        np.testing.assert_allclose(synthesize_signal(fit, b).data, vol.data, rtol=1e-9)


# --------------------------------------------------------------------------
# mixing


def test_single_bvalue_identity(backend):
    rng = np.random.default_rng(0)
    study = make_study(rng.uniform(10, 100, (4, 4, 2)), rng.uniform(1e-4, 2e-3, (4, 4, 2)))
    cfg = MixingConfig((800.0,), (), {800.0: 1.0})
    out = compute_cdis(study, cfg, backend=backend)
    np.testing.assert_allclose(out.data, study.volume(800).data, rtol=1e-12)


def test_constant_signal_fixed_point(backend):
    study = make_study(np.full((3, 3, 3), 4.5), np.zeros((3, 3, 3)))
    out = compute_cdis(study, MixingConfig(), backend=backend)
    np.testing.assert_allclose(out.data, 4.5, rtol=1e-12)


def scalar_cdis(s0, adc, native, synthetic, eps):
    """Independent per-voxel reference: scalar fit, synthesis and product."""
    sig = [s0 * math.exp(-b * adc) for b in native]
    logs = [math.log(max(s, eps)) for s in sig]
    n = len(native)
    mb, my = sum(native) / n, sum(logs) / n
    slope = sum((b - mb) * (y - my) for b, y in zip(native, logs)) / sum((b - mb) ** 2 for b in native)
    fs0, fadc = math.exp(my - slope * mb), -slope
    allsig = sig + [fs0 * math.exp(-b * fadc) for b in synthetic]
    rho = 1.0 / len(allsig)
    out = 1.0
    for s in allsig:
        out *= max(s, eps) ** rho
    return out


def test_cdis_matches_scalar_oracle(backend):
    s0 = np.array([[[900.0], [1200.0]], [[400.0], [0.0]]])
    adc = np.array([[[0.0008], [0.002]], [[0.0015], [0.001]]])
    study = make_study(s0, adc)
    cfg = MixingConfig(BVALUES, (1000.0, 1500.0, 2000.0), epsilon=1e-3)
    out = compute_cdis(study, cfg, backend=backend)
    for idx in np.ndindex(2, 2, 1):
        ref = scalar_cdis(s0[idx], adc[idx], BVALUES, (1000.0, 1500.0, 2000.0), 1e-3)
        assert out.data[idx] == pytest.approx(ref, rel=1e-12)


def test_missing_coefficient_rejected():
    study = make_study(np.ones((2, 2, 1)), np.zeros((2, 2, 1)))
    cfg = MixingConfig(BVALUES, (1000.0,), {0.0: 0.5, 100.0: 0.5})
    with pytest.raises(CohortError, match="no mixing coefficient"):
        compute_cdis(study, cfg)


def test_native_bvalue_absent_rejected():
    study = make_study(np.ones((2, 2, 1)), np.zeros((2, 2, 1)))
    with pytest.raises(CohortError, match="absent"):
        compute_cdis(study, MixingConfig((0.0, 1000.0), ()))


def test_mixing_config_round_trip():
    cfg = MixingConfig((0, 800), (1500,), {0: 0.2, 800: 0.3, 1500: 0.5}, epsilon=1e-4)
    assert MixingConfig.from_dict(cfg.to_dict()) == cfg


@settings(max_examples=25, deadline=None)
@given(k=st.floats(1e-3, 1e3), seed=st.integers(0, 2**16))
def test_scaling_equivariance(k, seed):
    rng = np.random.default_rng(seed)
    s0 = rng.uniform(0, 1000, (4, 4, 2))
    study = make_study(s0, rng.uniform(1e-4, 3e-3, (4, 4, 2)), noise=10, rng=rng)
    scaled = DwiStudy(study.bvalues, tuple(v.with_data(v.data * k) for v in study.volumes))
    a = compute_cdis(study).data
    b = compute_cdis(scaled).data
    np.testing.assert_allclose(b, k * a, rtol=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_output_floor_and_voxel_independence(seed):
    rng = np.random.default_rng(seed)
    s0 = rng.uniform(0, 1000, (5, 3, 2))
    s0[rng.random(s0.shape) < 0.2] = 0
    study = make_study(s0, rng.uniform(1e-4, 3e-3, s0.shape), noise=15, rng=rng)
    cfg = MixingConfig(epsilon=0.5)
    out = compute_cdis(study, cfg).data
    assert np.isfinite(out).all()
    assert out.min() >= 0.5 * (1 - 1e-12)

    perm = rng.permutation(s0.size)
    permuted = DwiStudy(
        study.bvalues,
        tuple(v.with_data(v.data.ravel()[perm].reshape(s0.shape)) for v in study.volumes),
    )
    np.testing.assert_allclose(
        compute_cdis(permuted, cfg).data.ravel(), out.ravel()[perm], rtol=1e-13
    )
