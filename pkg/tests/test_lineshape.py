import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from wgmesr.errors import DataError, UnfittableError
from wgmesr.lineshape import (
    FanoParams,
    Trace,
    census,
    fano_model,
    find_peaks,
    fit_fano,
    fwhm,
    noise_sigma,
    read_trace_csv,
    write_trace_csv,
)

F0 = 14.934048e9
GAMMA = 2.28e3


def synthetic(params, n=801, span_lw=20.0, sigma=0.0, seed=0):
    f = params.f0_hz + params.gamma_hz * span_lw * np.linspace(-1, 1, n)
    y = fano_model(params, f)
    if sigma:
        y = y + np.random.default_rng(seed).normal(0, sigma, n)
    return Trace(f, y)


def test_model_reduces_to_lorentzian_dip():
    f = F0 + np.linspace(-1e4, 1e4, 101)
    p = FanoParams(F0, GAMMA, 0.0, -0.4, 1.0)
    assert np.allclose(fano_model(p, f), oracles.lorentzian_dip(f, F0, GAMMA, 0.4), atol=1e-14)


def test_model_fwhm_equals_gamma():
    f = F0 + np.linspace(-1e6, 1e6, 400001)
    y = fano_model(FanoParams(F0, GAMMA, 0.0, 1.0, 0.0), f)
    # q = 0, amp = 1 is a unit-height Lorentzian peak
    assert y.max() == pytest.approx(1.0)
    assert fwhm(f, y) == pytest.approx(GAMMA, rel=1e-3)


@given(st.floats(-3, 3), st.floats(0.1, 5), st.floats(-2, 2).filter(lambda a: abs(a) > 1e-3))
def test_mirror_symmetry(q, gamma, amp):
    d = np.linspace(-10, 10, 101)
    a = fano_model(FanoParams(0.0, gamma, q, amp), d)
    b = fano_model(FanoParams(0.0, gamma, -q, amp), -d)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


@given(st.floats(-3, 3).filter(lambda q: abs(q) > 1e-2), st.floats(0.1, 5), st.floats(-2, 2).filter(lambda a: abs(a) > 1e-3))
def test_amplitude_q_reparameterisation(q, gamma, amp):
    d = np.linspace(-10, 10, 101)
    a = fano_model(FanoParams(0.0, gamma, q, amp), d)
    b = fano_model(FanoParams(0.0, gamma, -1.0 / q, -amp * q * q), d)
    assert np.allclose(a, b, rtol=1e-9, atol=1e-9 * max(1.0, abs(amp) * q * q))


def test_noiseless_recovery_and_q_factor():
    true = FanoParams(F0, GAMMA, 0.0, -0.5, 1.0)
    guess = FanoParams(F0 + 300.0, 1.4 * GAMMA, 0.1, -0.4, 0.95)
    fit, rep = fit_fano(synthetic(true), guess)
    for a, b in zip(fit.as_array(), true.as_array()):
        assert a == pytest.approx(b, rel=1e-6, abs=1e-9)
    assert rep.q_factor == pytest.approx(F0 / GAMMA, rel=1e-6)
    assert rep.q_factor == pytest.approx(6.55e6, rel=2e-3)
    assert rep.loss_tangent == pytest.approx(1.0 / rep.q_factor)
    assert rep.converged


def test_asymmetric_recovery():
    true = FanoParams(F0, GAMMA, 0.6, -0.3, 1.0)
    fit, _ = fit_fano(synthetic(true), FanoParams(F0 - 200.0, 1.2 * GAMMA, 0.3, -0.25, 1.0))
    assert np.allclose(fit.as_array(), true.as_array(), rtol=1e-6, atol=1e-9)


def test_residual_rms_close_to_noise():
    sigma = 0.01
    true = FanoParams(F0, GAMMA, 0.2, -0.5, 1.0)
    ratios = []
    for seed in range(20):
        fit, rep = fit_fano(synthetic(true, sigma=sigma, seed=seed), true)
        ratios.append(rep.residual_rms / sigma)
    assert max(ratios) <= 1.1


def test_stderr_consistent_with_scatter():
    sigma = 0.01
    true = FanoParams(F0, GAMMA, 0.0, -0.5, 1.0)
    f0s, errs = [], []
    for seed in range(60):
        fit, rep = fit_fano(synthetic(true, sigma=sigma, seed=seed), true)
        f0s.append(fit.f0_hz)
        errs.append(rep.stderr["f0_hz"])
    assert np.std(f0s) == pytest.approx(np.mean(errs), rel=0.35)


def test_flat_trace_is_unfittable():
    f = np.linspace(0, 1e4, 100) + F0
    with pytest.raises(UnfittableError, match="flat"):
        fit_fano(Trace(f, np.ones_like(f)), FanoParams(F0 + 5e3, GAMMA, 0.0, -0.5, 1.0))


def test_narrow_span_rejected():
    tr = synthetic(FanoParams(F0, GAMMA, 0.0, -0.5, 1.0), span_lw=1.0)
    with pytest.raises(ValueError, match="3 linewidths"):
        fit_fano(tr, FanoParams(F0, GAMMA, 0.0, -0.5, 1.0))


def test_params_validated():
    with pytest.raises(ValueError):
        FanoParams(F0, 0.0)
    with pytest.raises(ValueError):
        FanoParams(F0, GAMMA, amp=0.0)


def test_trace_validation():
    with pytest.raises(ValueError):
        Trace([2.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        Trace([1.0, 2.0], [1.0, -0.1])


def test_find_peaks_single_lorentzian():
    tr = synthetic(FanoParams(F0, GAMMA, 0.0, -0.5, 1.0), n=1001)
    found = find_peaks(tr, 0.1)
    assert len(found) == 1
    step = tr.freq_hz[1] - tr.freq_hz[0]
    assert abs(found[0].f0_hz - F0) <= 2 * step
    assert found[0].amp < 0
    assert found[0].gamma_hz == pytest.approx(GAMMA, rel=0.05)


def test_find_peaks_no_false_positives_on_noise():
    f = np.linspace(0, 1e6, 2001)
    hits = 0
    for seed in range(200):
        y = 1.0 + np.random.default_rng(seed).normal(0, 0.01, f.size)
        hits += len(find_peaks(Trace(f, y), 8 * noise_sigma(y)))
    assert hits == 0


def test_census_of_three_modes():
    f = np.linspace(10e9, 10e9 + 3e6, 30001)
    modes = [(10e9 + 0.5e6, 1e3), (10e9 + 1.5e6, 2e3), (10e9 + 2.5e6, 5e2)]
    y = np.ones_like(f)
    for f0, g in modes:
        y = y + fano_model(FanoParams(f0, g, 0.0, -0.4, 0.0), f)
    res = census(Trace(f, y), 0.1)
    assert [round(p.f0_hz) for p, _ in res] == [round(m[0]) for m in modes]
    for (p, r), (f0, g) in zip(res, modes):
        assert r.q_factor == pytest.approx(f0 / g, rel=1e-5)


def test_census_threads_match_serial():
    f = np.linspace(10e9, 10e9 + 2e6, 20001)
    y = 1.0 + fano_model(FanoParams(10e9 + 5e5, 1e3, 0.2, -0.4, 0.0), f) + fano_model(FanoParams(10e9 + 1.5e6, 2e3, 0.0, -0.3, 0.0), f)
    a = census(Trace(f, y), 0.1)
    b = census(Trace(f, y), 0.1, threads=4)
    assert [p for p, _ in a] == [p for p, _ in b]


def test_csv_roundtrip_is_byte_exact(tmp_path):
    tr = synthetic(FanoParams(F0, GAMMA, 0.3, -0.5, 1.0), sigma=1e-3)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_trace_csv(tr, p1)
    write_trace_csv(read_trace_csv(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = read_trace_csv(p1)
    assert np.allclose(back.s21, tr.s21, rtol=1e-14)


def test_csv_errors_name_file_and_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("freq_hz,s21_db\n1.0,-3\n2.0,abc\n")
    with pytest.raises(DataError, match=r"bad.csv:3"):
        read_trace_csv(p)
    p.write_text("f,s\n")
    with pytest.raises(DataError, match=r"bad.csv:1"):
        read_trace_csv(p)
    with pytest.raises(DataError, match="missing.csv"):
        read_trace_csv(tmp_path / "missing.csv")


def test_census_counts_an_asymmetric_line_once():
    gamma = F0 / 6.5e6
    for seed in range(10):
        tr = synthetic(FanoParams(F0, gamma, 0.1, -0.5, 1.0), sigma=1e-3, seed=seed)
        res = census(tr, 8 * noise_sigma(tr.s21))
        assert len(res) == 1
        assert res[0][0].f0_hz == pytest.approx(F0, abs=0.05 * gamma)
