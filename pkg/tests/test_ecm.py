import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aesmo.ecm import (
    CellParams,
    EcmState,
    OcvPolynomial,
    ParamIntervals,
    build_matrices,
    delta_a,
    delta_a_norm_bound,
    derivative,
    estimate_lipschitz,
    ocv_eval,
    ocv_slope,
    phi,
    phi_jacobian_norm,
    secant_alpha1,
    step,
    step_physical,
    terminal_voltage,
)
from aesmo.errors import ValidationError
from aesmo.reference import PUBLISHED_OCV, TABLE1, default_ocv, nominal_params, table1_intervals


@pytest.fixture(scope="module")
def cell():
    return nominal_params()


@pytest.fixture(scope="module")
def poly():
    return default_ocv()


def test_cell_params_reject_non_positive():
    with pytest.raises(ValidationError):
        CellParams(0.0, 0.01, 1000.0, 0.01, 1000.0, 10260.0)
    with pytest.raises(ValidationError):
        CellParams(0.03, 0.01, float("nan"), 0.01, 1000.0, 10260.0)


def test_cell_params_units_and_round_trip():
    p = CellParams.from_table_units(30.0, 15.0, 2.0, 30.0, 16.0, capacity_ah=2.85)
    assert p.r_int == pytest.approx(0.03)
    assert p.c_s == pytest.approx(2000.0)
    assert p.q_total == pytest.approx(10260.0)
    assert p.tau_s == pytest.approx(p.r_s * p.c_s)
    assert p.a2 * p.tau_s == pytest.approx(1.0)
    assert CellParams.from_dict(p.to_dict()) == p


def test_ocv_horner_matches_polyval():
    z = np.linspace(-0.1, 1.1, 101)
    np.testing.assert_allclose(ocv_eval(PUBLISHED_OCV, z), np.polyval(PUBLISHED_OCV.coeffs, z), rtol=1e-12, atol=1e-9)
    assert ocv_eval(PUBLISHED_OCV, 0.0) == PUBLISHED_OCV.coeffs[-1]


def test_ocv_derivatives_match_finite_differences(poly):
    z = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    fd1 = (poly(z + h) - poly(z - h)) / (2 * h)
    fd2 = (poly.slope(z + h) - poly.slope(z - h)) / (2 * h)
    np.testing.assert_allclose(ocv_slope(poly, z), fd1, rtol=1e-7, atol=1e-7)
    np.testing.assert_allclose(poly.curvature(z), fd2, rtol=1e-6, atol=1e-5)


def test_ocv_needs_ten_coefficients():
    with pytest.raises(ValidationError):
        OcvPolynomial((1.0, 2.0))


def test_secant_slope(poly):
    assert secant_alpha1(poly) == pytest.approx((poly(0.9) - poly(0.1)) / 0.8)


def test_derivative_equals_linear_part_plus_remainder(cell, poly):
    alpha1 = secant_alpha1(poly)
    m = build_matrices(cell, alpha1)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        x = np.array([rng.uniform(3.0, 4.2), rng.uniform(0, 1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)])
        u = rng.uniform(-6, 6)
        lhs = derivative(x, u, cell, poly)
        rhs = m.a @ x + m.b * u + phi(x, u, cell, poly, alpha1)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-13)


def test_state_matrix_has_charge_conservation_mode(cell, poly):
    m = build_matrices(cell, secant_alpha1(poly))
    eig = np.linalg.eigvals(m.a)
    assert np.min(np.abs(eig)) < 1e-12 * np.linalg.norm(m.a)
    assert np.all(eig.real <= 1e-12)


def test_derivative_accepts_state_object(cell, poly):
    s = EcmState(3.6, 0.5, 0.01, 0.02)
    d = derivative(s, 1.0, cell, poly)
    assert isinstance(d, EcmState)
    np.testing.assert_array_equal(np.asarray(d), derivative(s.to_array(), 1.0, cell, poly))


def test_phi_jacobian_matches_finite_differences(cell, poly):
    alpha1 = secant_alpha1(poly)
    x = np.array([3.6, 0.4, 0.01, 0.02])
    h = 1e-6
    col = (phi(x + [0, h, 0, 0], 1.5, cell, poly, alpha1) - phi(x - [0, h, 0, 0], 1.5, cell, poly, alpha1)) / (2 * h)
    assert phi_jacobian_norm(0.4, 1.5, cell, poly, alpha1) == pytest.approx(np.linalg.norm(col), rel=1e-6)
    for k in (0, 2, 3):
        e = np.zeros(4)
        e[k] = 1.0
        np.testing.assert_array_equal(phi(x + e, 1.5, cell, poly, alpha1), phi(x, 1.5, cell, poly, alpha1))


def test_lipschitz_shrinks_on_flat_region(cell, poly):
    alpha1 = secant_alpha1(poly)
    full = estimate_lipschitz(cell, poly, alpha1)
    upper = estimate_lipschitz(cell, poly, alpha1, z_range=(0.2, 1.0))
    assert upper < full
    with pytest.raises(ValidationError):
        estimate_lipschitz(cell, poly, alpha1, z_range=(0.5, 1.5))


def test_step_zero_dt_is_identity(cell, poly):
    x = np.array([3.6, 0.5, 0.01, 0.0])
    np.testing.assert_array_equal(step(x, 2.0, 0.0, cell, poly), x)


@pytest.mark.parametrize("bad", [(np.array([np.nan, 0.5, 0, 0]), 1.0, 1.0), (np.zeros(4), 1.0, -1.0)])
def test_step_rejects_bad_input(cell, poly, bad):
    x, u, dt = bad
    with pytest.raises(ValidationError):
        step(x, u, dt, cell, poly)


def test_rk4_fourth_order(cell, poly):
    x0 = np.array([float(poly(0.8)), 0.8, 0.0, 0.0])

    def run(dt, horizon=40.0):
        x = x0.copy()
        for _ in range(int(round(horizon / dt))):
            x = step(x, 2.85, dt, cell, poly, clamp_soc=False)
        return x

    ref = run(0.05)
    e1 = np.linalg.norm(run(4.0) - ref)
    e2 = np.linalg.norm(run(2.0) - ref)
    assert 12.0 < e1 / e2 < 20.0


def test_soc_rate_on_consistent_voltage(cell, poly):
    rng = np.random.default_rng(1)
    for _ in range(200):
        z, v1, v2, i = rng.uniform(0, 1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-6, 6)
        v = terminal_voltage(z, v1, v2, i, cell, poly)
        dz = derivative(np.array([v, z, v1, v2]), i, cell, poly)[1]
        assert dz == pytest.approx(-i / cell.q_total, rel=1e-12, abs=1e-15)


def test_voltage_state_relaxes_onto_output(cell, poly):
    # g = Voc - V - V1 - V2 - Rint·I obeys g' = -(a2 + b1·R̄·Voc')·g under a held current,
    # so any offset decays and the manifold g = 0 is invariant
    z0 = 0.7
    x = np.array([float(poly(z0)) - 0.05, z0, 0.02, 0.01])
    for _ in range(600):
        x = step(x, 0.0, 1.0, cell, poly)
    assert abs(terminal_voltage(x[1], x[2], x[3], 0.0, cell, poly) - x[0]) < 1e-9
    i = 2.85
    x[0] -= cell.r_int * i  # the output steps with the current
    for _ in range(1500):
        x = step(x, i, 1.0, cell, poly)
        assert abs(terminal_voltage(x[1], x[2], x[3], i, cell, poly) - x[0]) < 1e-9


def test_discharge_lowers_soc(cell, poly):
    x = np.array([float(poly(0.8)) - cell.r_int * 2.85, 0.8, 0.0, 0.0])
    for _ in range(100):
        x = step(x, 2.85, 1.0, cell, poly)
    assert x[1] == pytest.approx(0.8 - 100 * 2.85 / cell.q_total, abs=1e-3)


def test_physical_rc_branch_matches_exponential():
    p = TABLE1[0.3]
    s = np.array([0.9, 0.0, 0.0])
    for k in range(1, 200):
        s = step_physical(s, 2.0, 1.0, p)
        assert s[2] == pytest.approx(p.r_f * 2.0 * (1 - math.exp(-k / p.tau_f)), abs=1e-10)


def test_delta_a_zero_at_nominal(cell, poly):
    assert np.all(delta_a(cell, 0.0, 0.0, 0.0, secant_alpha1(poly)) == 0.0)


def test_interval_must_contain_nominal(cell):
    with pytest.raises(ValidationError):
        ParamIntervals(cell, (2 * cell.a2, 3 * cell.a2), (cell.a3, cell.a3), (cell.r_bar, cell.r_bar))


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_delta_a_bound_dominates_interior(u2, u3, ur):
    iv = table1_intervals()
    nom = iv.nominal
    alpha1 = secant_alpha1(default_ocv())
    d2 = iv.a2[0] + u2 * (iv.a2[1] - iv.a2[0]) - nom.a2
    d3 = iv.a3[0] + u3 * (iv.a3[1] - iv.a3[0]) - nom.a3
    dr = iv.r_bar[0] + ur * (iv.r_bar[1] - iv.r_bar[0]) - nom.r_bar
    inner = np.linalg.norm(delta_a(nom, d2, d3, dr, alpha1), 2)
    assert inner <= delta_a_norm_bound(iv, alpha1) * (1 + 1e-12)


ZERO = OcvPolynomial((0.0,) * 10)
LINEAR = OcvPolynomial((0.0,) * 8 + (0.8, 0.0))


def test_printed_polynomial_end_values():
    assert PUBLISHED_OCV.slope(0.0) == 10.0891
    assert ZERO(0.37) == 0.0 and ZERO.slope(0.37) == 0.0


def test_equilibrium_is_stationary(cell, poly):
    x = np.array([float(poly(0.4)), 0.4, 0.0, 0.0])
    np.testing.assert_array_equal(derivative(x, 0.0, cell, poly), np.zeros(4))
    np.testing.assert_allclose(step(x, 0.0, 1.0, cell, poly), x, atol=1e-12)


def test_terminal_voltage_examples():
    p = TABLE1[0.1]
    assert terminal_voltage(0.0, 0.0, 0.0, 0.0, p, PUBLISHED_OCV) == 3.043
    assert terminal_voltage(0.1, 0.0, 0.0, 2.85, p, PUBLISHED_OCV) == pytest.approx(PUBLISHED_OCV(0.1) - 0.101175, abs=1e-12)


def test_matrix_entries(cell, poly):
    m = build_matrices(TABLE1[0.1], secant_alpha1(poly))
    np.testing.assert_array_equal(m.c, [[1, 0, 0, 0]])
    np.testing.assert_array_equal(m.d, [1, 1, 1, 1])
    assert m.a[0, 0] == pytest.approx(-0.034318, abs=2e-6)


def test_remainder_vanishes_for_linear_ocv(cell):
    x = np.array([3.5, 0.6, 0.01, 0.02])
    np.testing.assert_allclose(phi(x, 0.0, cell, LINEAR, 0.8), 0.0, atol=1e-15)
    assert estimate_lipschitz(cell, LINEAR, 0.8) == pytest.approx(0.0, abs=1e-15)


def test_lipschitz_quadratic_ocv(cell):
    quad = OcvPolynomial((0.0,) * 7 + (1.0, 0.0, 0.0))
    got = estimate_lipschitz(cell, quad, 0.0, current_bound=1e-12, n_i=3)
    # d(phi)/dz = V_oc'(z)·[a2, -b1·R̄], largest at z = 1
    assert got == pytest.approx(2.0 * math.hypot(cell.a2, cell.b1 * cell.r_bar), rel=1e-9)


def test_gamma_zero_width_and_single_entry(cell, poly):
    alpha1 = secant_alpha1(poly)
    flat = ParamIntervals(cell, (cell.a2,) * 2, (cell.a3,) * 2, (cell.r_bar,) * 2)
    assert delta_a_norm_bound(flat, alpha1) == 0.0
    d = 0.1 * cell.a2
    one = ParamIntervals(cell, (cell.a2, cell.a2 + d), (cell.a3,) * 2, (cell.r_bar,) * 2)
    corner = delta_a(cell, d, 0.0, 0.0, alpha1)
    oracle = math.sqrt(np.linalg.eigvalsh(corner.T @ corner)[-1])
    assert delta_a_norm_bound(one, alpha1) == pytest.approx(oracle, rel=1e-12)
