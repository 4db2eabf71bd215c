"""Dual-polarization equivalent circuit model of a Li-ion cell.

State vector ordering is ``[V, z, V_RC1, V_RC2]`` throughout: terminal
voltage, state of charge, and the voltages across the two RC branches.
Current is positive on discharge, so ``dz/dt = -I/Q``.

The kernels are written with plain arithmetic so that every state component
may be a float or a 1-D array; arrays of shape ``(4, n)`` propagate ``n``
cells at once (used by the Monte-Carlo harness).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ValidationError

AH_TO_COULOMB = 3600.0

C_ROW = np.array([[1.0, 0.0, 0.0, 0.0]])
D_COL = np.array([1.0, 1.0, 1.0, 1.0])


def _positive(name, value):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)) or not np.all(arr > 0):
        raise ValidationError(f"{name} must be finite and strictly positive, got {value!r}")


@dataclass(frozen=True)
class CellParams:
    """Physical ECM constants in SI units (ohm, farad, coulomb).

    ``r_int`` may be an array when simulating a batch of cells that differ
    only in internal resistance.
    """

    r_int: float
    r_s: float
    c_s: float
    r_f: float
    c_f: float
    q_total: float

    def __post_init__(self):
        for name in ("r_int", "r_s", "c_s", "r_f", "c_f", "q_total"):
            _positive(name, getattr(self, name))

    @classmethod
    def from_table_units(cls, r_int_mohm, r_s_mohm, c_s_kf, r_f_mohm, c_f_kf, capacity_ah=2.85):
        """Build from mΩ / kF / Ah, the units used by the identification table."""
        return cls(
            r_int=r_int_mohm * 1e-3,
            r_s=r_s_mohm * 1e-3,
            c_s=c_s_kf * 1e3,
            r_f=r_f_mohm * 1e-3,
            c_f=c_f_kf * 1e3,
            q_total=capacity_ah * AH_TO_COULOMB,
        )

    @cached_property
    def a2(self):
        return 1.0 / (self.r_s * self.c_s)

    @cached_property
    def a3(self):
        return 1.0 / (self.r_f * self.c_f)

    @cached_property
    def b1(self):
        return 1.0 / self.q_total

    @cached_property
    def b2(self):
        return 1.0 / self.c_s

    @cached_property
    def b3(self):
        return 1.0 / self.c_f

    @cached_property
    def r_bar(self):
        return 1.0 / self.r_int

    @property
    def tau_s(self):
        return self.r_s * self.c_s

    @property
    def tau_f(self):
        return self.r_f * self.c_f

    def replace(self, **changes) -> "CellParams":
        values = {k: getattr(self, k) for k in ("r_int", "r_s", "c_s", "r_f", "c_f", "q_total")}
        values.update(changes)
        return CellParams(**values)

    def to_dict(self) -> dict:
        return {
            "r_int_ohm": float(self.r_int),
            "r_s_ohm": float(self.r_s),
            "c_s_farad": float(self.c_s),
            "r_f_ohm": float(self.r_f),
            "c_f_farad": float(self.c_f),
            "q_total_c": float(self.q_total),
        }

    @classmethod
    def from_dict(cls, d: dict, default_q_total=2.85 * AH_TO_COULOMB) -> "CellParams":
        if "q_total_c" in d:
            q = d["q_total_c"]
        elif "q_total_ah" in d:
            q = d["q_total_ah"] * AH_TO_COULOMB
        else:
            q = default_q_total
        try:
            return cls(d["r_int_ohm"], d["r_s_ohm"], d["c_s_farad"], d["r_f_ohm"], d["c_f_farad"], q)
        except KeyError as exc:
            raise ValidationError(f"missing parameter key {exc}") from None


def _horner(coeffs, z):
    acc = coeffs[0]
    for c in coeffs[1:]:
        acc = acc * z + c
    return acc


@dataclass(frozen=True)
class OcvPolynomial:
    """Degree-9 open-circuit-voltage map, coefficients highest degree first."""

    coeffs: tuple

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coeffs)
        if len(coeffs) != 10:
            raise ValidationError(f"OCV polynomial needs exactly 10 coefficients, got {len(coeffs)}")
        if not all(math.isfinite(c) for c in coeffs):
            raise ValidationError("OCV coefficients must be finite")
        object.__setattr__(self, "coeffs", coeffs)

    @cached_property
    def _d1(self):
        return tuple(c * (9 - k) for k, c in enumerate(self.coeffs[:-1]))

    @cached_property
    def _d2(self):
        return tuple(c * (8 - k) for k, c in enumerate(self._d1[:-1]))

    def __call__(self, z):
        return _horner(self.coeffs, z)

    def slope(self, z):
        return _horner(self._d1, z)

    def curvature(self, z):
        return _horner(self._d2, z)


def ocv_eval(poly: OcvPolynomial, z):
    """Open-circuit voltage at SoC ``z`` (nested evaluation)."""
    return poly(z)


def ocv_slope(poly: OcvPolynomial, z):
    """Analytic dV_oc/dz."""
    return poly.slope(z)


def secant_alpha1(poly: OcvPolynomial, z_lo=0.1, z_hi=0.9) -> float:
    """Linear OCV slope used to split the model into A·x and φ(x, u)."""
    return float((poly(z_hi) - poly(z_lo)) / (z_hi - z_lo))


@dataclass(frozen=True)
class EcmState:
    v: float
    z: float
    v_rc1: float
    v_rc2: float

    def __array__(self, dtype=None, copy=None):
        return np.array([self.v, self.z, self.v_rc1, self.v_rc2], dtype=dtype or float)

    def to_array(self) -> np.ndarray:
        return np.array([self.v, self.z, self.v_rc1, self.v_rc2], dtype=float)

    @classmethod
    def from_array(cls, x) -> "EcmState":
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


def _as_state_array(state):
    return state.to_array() if isinstance(state, EcmState) else np.asarray(state, dtype=float)


def _like(template, x):
    return EcmState.from_array(x) if isinstance(template, EcmState) else x


@dataclass(frozen=True)
class SystemMatrices:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    alpha1: float


@dataclass(frozen=True)
class ParamIntervals:
    """Bounds on the uncertain coefficients a2, a3 and 1/Rint around a nominal cell."""

    nominal: CellParams
    a2: tuple
    a3: tuple
    r_bar: tuple
    r_int: tuple | None = field(default=None)

    def __post_init__(self):
        for name, nom in (("a2", self.nominal.a2), ("a3", self.nominal.a3), ("r_bar", self.nominal.r_bar)):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValidationError(f"interval {name} = [{lo}, {hi}] is empty")
            tol = 1e-12 * max(1.0, abs(nom))
            if not (lo - tol <= nom <= hi + tol):
                raise ValidationError(f"interval {name} = [{lo}, {hi}] does not contain nominal {nom}")

    @classmethod
    def from_cells(cls, nominal: CellParams, cells: Sequence[CellParams]) -> "ParamIntervals":
        """Min/max envelope of a set of identified cells, widened to include the nominal."""
        cells = list(cells) + [nominal]
        a2 = [c.a2 for c in cells]
        a3 = [c.a3 for c in cells]
        rb = [c.r_bar for c in cells]
        ri = [c.r_int for c in cells]
        return cls(nominal, (min(a2), max(a2)), (min(a3), max(a3)), (min(rb), max(rb)), (min(ri), max(ri)))


def terminal_voltage(z, v_rc1, v_rc2, current, params: CellParams, poly: OcvPolynomial):
    """Terminal voltage V = V_oc(z) - V_RC1 - V_RC2 - Rint·I."""
    return poly(z) - v_rc1 - v_rc2 - params.r_int * current


def _rhs(x, current, params: CellParams, poly: OcvPolynomial):
    v, z, v1, v2 = x[0], x[1], x[2], x[3]
    a2, a3, b1 = params.a2, params.a3, params.b1
    voc = poly(z)
    dvoc = poly.slope(z)
    dv = a2 * voc - a2 * v + (a3 - a2) * v2 - (b1 * dvoc + params.b2 + params.b3 + a2 * params.r_int) * current
    dz = -b1 * params.r_bar * (voc - v - v1 - v2)
    dv1 = -a2 * v1 + params.b2 * current
    dv2 = -a3 * v2 + params.b3 * current
    return np.array([dv, dz, dv1, dv2])


def derivative(state, current, params: CellParams, poly: OcvPolynomial):
    """Time derivative of the four-state model, SoC row in voltage form."""
    x = _as_state_array(state)
    return _like(state, _rhs(x, current, params, poly))


def rk4(f, x, dt):
    """One classical Runge-Kutta step of x' = f(x)."""
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(np.asarray(v, dtype=float))):
            raise ValidationError("non-finite input")


def step(state, current, dt, params: CellParams, poly: OcvPolynomial, clamp_soc=True):
    """Advance the four-state model by ``dt`` under constant current (RK4).

    With ``clamp_soc`` the SoC is held inside [0, 1] as for a physical cell.
    """
    if dt < 0:
        raise ValidationError("dt must be non-negative")
    x = _as_state_array(state)
    _check_finite(x, current, dt)
    if dt == 0:
        return _like(state, x.copy())
    x = rk4(lambda s: _rhs(s, current, params, poly), x, dt)
    if clamp_soc:
        x[1] = np.clip(x[1], 0.0, 1.0)
    return _like(state, x)


def _physical_rhs(s, current, params: CellParams, disturbance=0.0):
    # s = [z, V_RC1, V_RC2]; disturbance enters every state channel equally
    z, v1, v2 = s[0], s[1], s[2]
    return np.array(
        [
            -params.b1 * current + disturbance + 0.0 * z,  # broadcast to batch shape
            -params.a2 * v1 + params.b2 * current + disturbance,
            -params.a3 * v2 + params.b3 * current + disturbance,
        ]
    )


def step_physical(s, current, dt, params: CellParams, disturbance=None, t=0.0, clamp_soc=True):
    """RK4 step of the three physical states ``[z, V_RC1, V_RC2]``.

    ``disturbance`` is an optional callable d(t) added to each state rate.
    """
    if disturbance is None:
        f = lambda x, tau: _physical_rhs(x, current, params)
    else:
        f = lambda x, tau: _physical_rhs(x, current, params, disturbance(tau))
    k1 = f(s, t)
    k2 = f(s + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = f(s + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = f(s + dt * k3, t + dt)
    out = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if clamp_soc:
        out[0] = np.clip(out[0], 0.0, 1.0)
    return out


def build_matrices(params: CellParams, alpha1: float) -> SystemMatrices:
    """Nominal A, B, C, D of the state-space form."""
    a2, a3, b1, b2, b3, rb = params.a2, params.a3, params.b1, params.b2, params.b3, params.r_bar
    a = np.array(
        [
            [-a2, a2 * alpha1, 0.0, a3 - a2],
            [b1 * rb, -alpha1 * b1 * rb, b1 * rb, b1 * rb],
            [0.0, 0.0, -a2, 0.0],
            [0.0, 0.0, 0.0, -a3],
        ]
    )
    b = np.array([-b2 - b3 - a2 * params.r_int, 0.0, b2, b3])
    return SystemMatrices(a=a, b=b, c=C_ROW.copy(), d=D_COL.copy(), alpha1=float(alpha1))


def phi(state, current, params: CellParams, poly: OcvPolynomial, alpha1: float):
    """Nonlinear remainder so that derivative = A·x + B·u + φ(x, u)."""
    x = _as_state_array(state)
    z = x[1]
    nl = poly(z) - alpha1 * z
    out = np.zeros_like(x)
    out[0] = params.a2 * nl - params.b1 * poly.slope(z) * current
    out[1] = -params.b1 * params.r_bar * nl
    return out


def delta_a(params: CellParams, d_a2, d_a3, d_rbar, alpha1):
    b1 = params.b1
    return np.array(
        [
            [-d_a2, d_a2 * alpha1, 0.0, d_a3 - d_a2],
            [b1 * d_rbar, -alpha1 * b1 * d_rbar, b1 * d_rbar, b1 * d_rbar],
            [0.0, 0.0, -d_a2, 0.0],
            [0.0, 0.0, 0.0, -d_a3],
        ]
    )


def delta_a_norm_bound(intervals: ParamIntervals, alpha1: float) -> float:
    """Largest spectral norm of ΔA over the corners of the parameter box.

    ΔA is affine in the three deviations, and a norm is convex, so the
    maximum over the box is attained at a corner.
    """
    nom = intervals.nominal
    corners = itertools.product(
        [lo - nom.a2 for lo in intervals.a2],
        [lo - nom.a3 for lo in intervals.a3],
        [lo - nom.r_bar for lo in intervals.r_bar],
    )
    return max(float(np.linalg.norm(delta_a(nom, *c, alpha1), 2)) for c in corners)


def phi_jacobian_norm(z, current, params: CellParams, poly: OcvPolynomial, alpha1):
    """Spectral norm of ∂φ/∂x; only the SoC column is non-zero."""
    dev = poly.slope(z) - alpha1
    j0 = params.a2 * dev - params.b1 * poly.curvature(z) * current
    j1 = -params.b1 * params.r_bar * dev
    return np.hypot(j0, j1)


def estimate_lipschitz(params, poly, alpha1, z_range=(0.0, 1.0), current_bound=2.85, n_z=2001, n_i=21) -> float:
    """Sampled Lipschitz constant of φ over a (z, I) grid."""
    lo, hi = z_range
    if not (0.0 <= lo <= hi <= 1.0):
        raise ValidationError(f"z_range {z_range} must lie inside [0, 1]")
    if current_bound <= 0:
        raise ValidationError("current_bound must be positive")
    zz, ii = np.meshgrid(np.linspace(lo, hi, n_z), np.linspace(-current_bound, current_bound, n_i))
    return float(np.max(phi_jacobian_norm(zz, ii, params, poly, alpha1)))
