import math
import time

import numpy as np
import pytest

from aesmo.ecm import build_matrices, secant_alpha1, step_physical, terminal_voltage
from aesmo.errors import TelemetryFormatError, ValidationError
from aesmo.harness import (
    TRACKING_SYNTHESIS,
    DisturbanceSpec,
    RunReport,
    Telemetry,
    _observer_run,
    _observer_run_scalar,
    add_noise,
    compare,
    default_gains,
    generate_dynamic_cycle,
    generate_hppc_eval,
    load_telemetry,
    monte_carlo_rint,
    run_estimation,
    save_telemetry,
    simulate_truth,
    soc_metrics,
)
from aesmo.lmi import synthesize_gain
from aesmo.observer import AesmoGains
from aesmo.reference import Q_TOTAL, TABLE1, default_ocv, nominal_params


# ---- cycles --------------------------------------------------------------------


def test_hppc_shape():
    t, i = generate_hppc_eval()
    assert t.size == 39300
    assert set(np.unique(i)) == {0.0, 2.85}
    assert i.sum() <= 0.9 * Q_TOTAL * (1 + 1e-12)
    assert i.sum() > 0.89 * Q_TOTAL
    with pytest.raises(ValidationError):
        generate_hppc_eval(pulse_count=0)


def test_hppc_zero_amplitude_is_all_rest():
    _, i = generate_hppc_eval(amplitudes=(0.0,))
    assert np.all(i == 0.0)


def test_dynamic_cycle():
    t, a = generate_dynamic_cycle(seed=3)
    _, b = generate_dynamic_cycle(seed=3)
    np.testing.assert_array_equal(a, b)
    assert t.size == 5000
    assert np.max(np.abs(a)) <= 5.7
    assert np.any(a < 0)
    assert a.sum() > 0  # net discharge
    assert not np.array_equal(a, generate_dynamic_cycle(seed=4)[1])


# ---- truth ---------------------------------------------------------------------


def test_rest_keeps_open_circuit_voltage():
    poly = default_ocv()
    tel = simulate_truth(np.zeros(200), z0=0.6)
    np.testing.assert_allclose(tel.voltage, float(poly(0.6)), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(tel.true_soc, 0.6)


def test_truth_rejects_bad_start():
    with pytest.raises(ValidationError):
        simulate_truth(np.zeros(10), z0=1.2)
    with pytest.raises(ValidationError):
        simulate_truth(np.zeros(10), model="spice")


def test_truth_soc_is_coulomb_count():
    _, i = generate_dynamic_cycle(seed=1, duration=3000)
    tel = simulate_truth(i, z0=0.9)
    expected = 0.9 - np.concatenate([[0.0], np.cumsum(i[:-1])]) / Q_TOTAL
    np.testing.assert_allclose(tel.true_soc, expected, atol=1e-6)


def test_truth_replicates_reference_stepper():
    # fixed parameters: per-sample stepping with the public kernels
    p = TABLE1[0.5]
    poly = default_ocv()
    _, i = generate_dynamic_cycle(seed=2, duration=800)
    tel = simulate_truth(i, p, z0=0.8)
    s = np.array([0.8, 0.0, 0.0])
    worst = 0.0
    for k, u in enumerate(i):
        worst = max(worst, abs(terminal_voltage(s[0], s[1], s[2], u, p, poly) - tel.voltage[k]))
        s = step_physical(s, u, 1.0, p)
    assert worst <= 1e-10


def test_truth_truncates_when_exhausted():
    with pytest.warns(RuntimeWarning, match="exhausted"):
        tel = simulate_truth(np.full(5000, 2.85), z0=0.2)
    assert len(tel) < 5000
    assert tel.true_soc[-1] > 0


def test_state_space_truth_keeps_history():
    tel = simulate_truth(np.full(50, 1.0), nominal_params(), z0=0.7, model="state_space")
    assert tel.states.shape == (50, 4)
    np.testing.assert_array_equal(tel.voltage, tel.states[:, 0])
    with pytest.raises(ValidationError):
        simulate_truth(np.zeros(5), model="state_space")


# ---- disturbance and noise -----------------------------------------------------


def test_disturbance_parse_and_bound():
    d = DisturbanceSpec.parse("sinusoid:0.05")
    assert d.kind == "sinusoid" and d.frequency == pytest.approx(0.27e-3)
    assert d.bound == pytest.approx(0.05 / 3600)
    g = DisturbanceSpec.parse("gaussian:0.02:7")
    assert g.seed == 7 and g.bound == pytest.approx(3 * 0.02 / 3600)
    assert DisturbanceSpec.parse("none").bound == 0.0
    for bad in ("sinusoid:x", "brown:0.1", "gaussian:-1"):
        with pytest.raises(ValidationError):
            DisturbanceSpec.parse(bad)


def test_sinusoid_stays_within_bound():
    d = DisturbanceSpec("sinusoid", 0.05)
    f = d.sampler(10000, 1.0)
    assert max(abs(f(t)) for t in np.arange(0, 10000, 7.0)) <= d.bound


def test_gaussian_disturbance_is_seeded():
    a = DisturbanceSpec("gaussian", 0.05, seed=1).sampler(100, 1.0)
    b = DisturbanceSpec("gaussian", 0.05, seed=1).sampler(100, 1.0)
    assert [a(k) for k in range(100)] == [b(k) for k in range(100)]
    assert a(3.0) == a(3.5)  # held per sample


def test_noise_zero_is_identity():
    tel = simulate_truth(generate_dynamic_cycle(duration=100)[1], z0=0.9)
    same = add_noise(tel, 0.0, 0.0, seed=1)
    np.testing.assert_array_equal(same.current, tel.current)
    np.testing.assert_array_equal(same.voltage, tel.voltage)


def test_noise_statistics():
    n = 100_000
    tel = Telemetry(np.arange(n, dtype=float), np.full(n, 2.0), np.full(n, 3.6))
    noisy = add_noise(tel, 5.0, 1.0, seed=11)
    assert np.std(noisy.current - 2.0) == pytest.approx(0.05 * 2.0, rel=0.05)
    assert np.std(noisy.voltage - 3.6) == pytest.approx(0.01 * 3.65, rel=0.05)
    again = add_noise(tel, 5.0, 1.0, seed=11)
    np.testing.assert_array_equal(noisy.voltage, again.voltage)
    with pytest.raises(ValidationError):
        add_noise(tel, -1.0)


# ---- metrics -------------------------------------------------------------------


def test_metrics_zero_error():
    t = np.arange(10.0)
    r = soc_metrics(t, np.full(10, 0.5), np.full(10, 0.5))
    assert (r.iae, r.ise, r.max_abs_err, r.time_to_2pct) == (0.0, 0.0, 0.0, 0.0)


def test_metrics_identities():
    rng = np.random.default_rng(0)
    t = np.arange(500.0)
    e = 0.1 * rng.standard_normal(500)
    r = soc_metrics(t, 0.5 + e, np.full(500, 0.5))
    assert r.iae == pytest.approx(np.abs(e).sum())
    assert r.ise <= r.max_abs_err * r.iae
    assert r.settled_max_err == pytest.approx(np.abs(e[100:]).max())


def test_time_to_two_percent():
    t = np.arange(100.0)
    est = np.where(t < 30, 0.6, 0.51)
    assert soc_metrics(t, est, np.full(100, 0.5)).time_to_2pct == 30.0
    assert soc_metrics(t, np.full(100, 0.6), np.full(100, 0.5)).time_to_2pct == math.inf


def test_nan_means_diverged():
    est = np.array([0.5, 0.5, np.nan, np.nan])
    r = soc_metrics(np.arange(4.0), est, np.full(4, 0.5))
    assert r.diverged and r.iae == math.inf
    d = r.to_dict()
    assert d["iae"] is None and d["diverged"] is True


# ---- estimation ----------------------------------------------------------------


def test_matched_observer_started_on_truth():
    p = nominal_params()
    _, i = generate_hppc_eval(pulse_count=5)
    tel = simulate_truth(i, p, z0=0.9)
    est, rep = run_estimation(tel, "aesmo", default_gains(), z0_guess=0.9)
    assert rep.max_abs_err < 1e-3


def test_jump_compensation_matters():
    p = nominal_params()
    _, i = generate_hppc_eval(pulse_count=5)
    tel = simulate_truth(i, p, z0=0.9)
    with_jump = run_estimation(tel, "aesmo", default_gains(), z0_guess=0.9)[1]
    without = run_estimation(tel, "aesmo", default_gains(), z0_guess=0.9, jump=False)[1]
    assert with_jump.max_abs_err < without.max_abs_err


def test_batch_and_scalar_runners_agree():
    p, poly = nominal_params(), default_ocv()
    _, i = generate_dynamic_cycle(seed=5, duration=600)
    tel = simulate_truth(i, z0=0.8)
    g = default_gains()
    scalar = _observer_run_scalar(tel.current, tel.voltage, g, p, poly, 0.6, 1.0)
    batch = _observer_run(tel.current, np.column_stack([tel.voltage, tel.voltage]), g, p, poly, 0.6, 1.0)
    np.testing.assert_allclose(batch[:, 0], scalar, atol=1e-12)
    np.testing.assert_array_equal(batch[:, 0], batch[:, 1])


def test_estimation_input_errors():
    tel = Telemetry(np.arange(5.0), np.zeros(5), np.full(5, 3.6))
    with pytest.raises(ValidationError):
        run_estimation(tel, "aesmo")  # no truth, no capacity
    est, rep = run_estimation(tel, "aesmo", q_total=Q_TOTAL)
    assert rep.samples == 5
    with pytest.raises(ValidationError):
        run_estimation(tel, "particle", q_total=Q_TOTAL)


@pytest.mark.slow
def test_dynamic_cycle_error_band():
    # no rests to re-anchor the estimate, so the observer model is the mid-range row
    row = TABLE1[0.5]
    poly = default_ocv()
    g = AesmoGains.from_certificate(synthesize_gain(build_matrices(row, secant_alpha1(poly)), TRACKING_SYNTHESIS))
    for seed in range(6):
        tel = simulate_truth(generate_dynamic_cycle(seed=seed)[1], z0=1.0)
        _, rep = run_estimation(tel, "aesmo", g, z0_guess=0.6, params=row)
        assert rep.settled_max_err <= 0.10, seed


@pytest.mark.slow
def test_monte_carlo_properties():
    _, i = generate_hppc_eval(pulse_count=6, depth=0.3)
    flat = monte_carlo_rint(pct=0.0, trials=3, cycle=i)
    assert len(flat) == 3
    assert flat[0] == flat[1] == flat[2]
    few = monte_carlo_rint(pct=20.0, trials=3, seed=9, cycle=i)
    many = monte_carlo_rint(pct=20.0, trials=6, seed=9, cycle=i)
    assert few == many[:3]
    with pytest.raises(ValidationError):
        monte_carlo_rint(trials=0)


def test_compare_runs_all_three():
    _, i = generate_dynamic_cycle(seed=0, duration=400)
    out = compare(simulate_truth(i, z0=0.9))
    assert set(out["reports"]) == {"aesmo", "luenberger", "ukf"}
    for name in ("aesmo", "luenberger", "ukf"):
        assert out[name].shape == out["t"].shape
    assert isinstance(out["reports"]["ukf"], RunReport)


# ---- CSV -----------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    tel = simulate_truth(generate_dynamic_cycle(duration=300)[1], z0=0.9)
    path = tmp_path / "run.csv"
    save_telemetry(path, tel)
    back = load_telemetry(path)
    np.testing.assert_array_equal(back.voltage, tel.voltage)
    np.testing.assert_array_equal(back.true_soc, tel.true_soc)
    no_truth = tel.replace(true_soc=None)
    save_telemetry(path, no_truth)
    assert load_telemetry(path).true_soc is None


@pytest.mark.parametrize(
    "text, line",
    [
        ("time,current_a,voltage_v\n0,0,3.6\n", 1),
        ("t_s,current_a,voltage_v\n0,0,3.6\n1,0\n", 3),
        ("t_s,current_a,voltage_v\n0,0,3.6\n1,0,3.6\n2,abc,3.6\n", 4),
        ("t_s,current_a,voltage_v\n0,0,3.6\n2,0,3.6\n1,0,3.6\n", 4),
        ("t_s,current_a,voltage_v\n", 2),
    ],
)
def test_csv_errors_carry_line(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(TelemetryFormatError) as info:
        load_telemetry(path)
    assert info.value.line == line


@pytest.mark.slow
def test_csv_large_file_is_fast(tmp_path):
    n = 1_000_000
    t = np.arange(n, dtype=float)
    path = tmp_path / "big.csv"
    save_telemetry(path, Telemetry(t, np.zeros(n), np.full(n, 3.6)))
    start = time.perf_counter()
    tel = load_telemetry(path)
    assert time.perf_counter() - start < 2.0
    assert len(tel) == n
