"""ECM parameter identification from pulse-discharge telemetry.

Two stages per pulse: the instantaneous voltage jump at the pulse edge gives
Rint, and a bi-exponential fit of the following relaxation gives the two RC
branches. The OCV curve is fitted separately from (SoC, OCV) samples.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .ecm import CellParams, OcvPolynomial
from .errors import DegenerateFitError, FitError, NoPulseError, TelemetryFormatError, ValidationError


@dataclass(frozen=True)
class PulseSchedule:
    """Trickle discharge between SoC breakpoints, then pulse + rest at each one."""

    trickle_current: float = 0.1
    pulse_current: float = 2.85
    pulse_duration: float = 10.0
    rest_duration: float = 4410.0
    soc_steps: tuple = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)
    q_total: float = 2.85 * 3600.0
    z0: float = 1.0
    z_end: float = 0.05
    dt: float = 1.0

    def __post_init__(self):
        if self.pulse_duration <= 0 or self.rest_duration <= 0 or self.dt <= 0:
            raise ValidationError("durations must be positive")
        if self.trickle_current <= 0:
            raise ValidationError("trickle current must be positive")
        steps = tuple(float(s) for s in self.soc_steps)
        if any(not (0.0 < s <= 1.0) for s in steps):
            raise ValidationError("soc_steps must lie in (0, 1]")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise ValidationError("soc_steps must be strictly decreasing")
        if steps and steps[0] > self.z0:
            raise ValidationError("first breakpoint lies above the starting SoC")
        object.__setattr__(self, "soc_steps", steps)


def _trickle(charge, current, dt):
    """Samples drawing ``charge`` at ``current``; the last sample carries the remainder."""
    if charge <= 0:
        return np.zeros(0)
    per_sample = current * dt
    n_full = int(math.floor(charge / per_sample + 1e-12))
    rest = charge - n_full * per_sample
    seg = np.full(n_full, current)
    if rest > 1e-12 * per_sample:
        seg = np.append(seg, rest / dt)
    return seg


def generate_ident_profile(schedule: PulseSchedule = PulseSchedule()):
    """Current profile for the identification test.

    Returns ``(t, current)`` sampled every ``schedule.dt`` seconds with the
    current held constant over each sample interval.
    """
    s = schedule
    n_pulse = int(round(s.pulse_duration / s.dt))
    n_rest = int(round(s.rest_duration / s.dt))
    pulse_charge = s.pulse_current * n_pulse * s.dt
    parts = []
    z = s.z0
    for step_soc in s.soc_steps:
        parts.append(_trickle((z - step_soc) * s.q_total, s.trickle_current, s.dt))
        parts.append(np.full(n_pulse, s.pulse_current))
        parts.append(np.zeros(n_rest))
        z = step_soc - pulse_charge / s.q_total
    if not s.soc_steps:
        parts.append(_trickle((s.z0 - s.z_end) * s.q_total, s.trickle_current, s.dt))
    current = np.concatenate(parts) if parts else np.zeros(0)
    t = np.arange(current.size) * s.dt
    return t, current


def coulomb_count(current, q_total, z0, dt=1.0, method="zoh"):
    """SoC at each sample time from the integrated current.

    ``method="zoh"`` treats each current sample as held over its interval, so
    it is exact for the piecewise-constant profiles used here; ``"trapezoid"``
    averages neighbouring samples.
    """
    i = np.asarray(current, dtype=float)
    if i.size == 0:
        return np.zeros(0)
    if method == "zoh":
        increments = i[:-1] * dt
    elif method == "trapezoid":
        increments = 0.5 * (i[:-1] + i[1:]) * dt
    else:
        raise ValidationError(f"unknown integration method {method!r}")
    charge = np.concatenate(([0.0], np.cumsum(increments)))
    return z0 - charge / q_total


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise TelemetryFormatError("timestamps must be strictly increasing")
    return t


def _run_bounds(current, k, direction):
    """Index range of the constant-current run adjacent to sample ``k``."""
    j = k
    if direction < 0:
        while j - 1 >= 0 and current[j - 1] == current[k]:
            j -= 1
        return j, k + 1
    while j + 1 < current.size and current[j + 1] == current[k]:
        j += 1
    return k, j + 1


def _line_at(t, v, t_eval):
    if t.size == 1:
        return float(v[0])
    slope, intercept = np.polyfit(t - t_eval, v, 1)
    return float(intercept)


def fit_rint(t, current, voltage, edge=None, window=8):
    """Internal resistance from the voltage jump across a current step.

    ``edge`` is the index of the first sample after the step; by default the
    largest step in the segment is used. Straight lines fitted to up to
    ``window`` samples on each side are extrapolated to the step instant,
    which removes the RC and OCV drift in the neighbouring samples.
    """
    t = _check_time(t)
    i = np.asarray(current, dtype=float)
    v = np.asarray(voltage, dtype=float)
    if not (t.size == i.size == v.size) or t.size < 2:
        raise ValidationError("segment needs at least two aligned samples")
    di = np.diff(i)
    if edge is None:
        edge = int(np.argmax(np.abs(di))) + 1
    delta_i = i[edge] - i[edge - 1]
    if delta_i == 0:
        raise NoPulseError("no current step in segment")
    lo, _ = _run_bounds(i, edge - 1, -1)
    _, hi = _run_bounds(i, edge, +1)
    pre = slice(max(lo, edge - window), edge)
    post = slice(edge, min(hi, edge + window))
    v_before = _line_at(t[pre], v[pre], t[edge])
    v_after = _line_at(t[post], v[post], t[edge])
    return abs(v_after - v_before) / abs(delta_i)


@dataclass
class LmResult:
    x: np.ndarray
    cost: float
    iterations: int
    converged: bool


def levenberg_marquardt(
    fun: Callable, jac: Callable, x0, lam0=1e-3, max_iter=200, rtol=1e-9
) -> LmResult:
    """Damped Gauss-Newton minimisation of ``||fun(x)||²``.

    Marquardt diagonal scaling; λ is divided by 10 after an accepted step
    and multiplied by 10 after a rejected one.
    """
    x = np.asarray(x0, dtype=float).copy()
    r = fun(x)
    cost = float(r @ r)
    lam = lam0
    for it in range(1, max_iter + 1):
        j = jac(x)
        jtj = j.T @ j
        g = j.T @ r
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = 1.0
        while True:
            try:
                dx = np.linalg.solve(jtj + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                dx = None
            if dx is not None and np.all(np.isfinite(dx)):
                r_new = fun(x + dx)
                cost_new = float(r_new @ r_new)
                if np.isfinite(cost_new) and cost_new <= cost:
                    break
            lam *= 10.0
            if lam > 1e20:
                # no descent direction left: stationary to working precision
                return LmResult(x, cost, it, True)
        x = x + dx
        change = (cost - cost_new) / cost if cost > 0 else 0.0
        r, cost = r_new, cost_new
        lam = max(lam / 10.0, 1e-15)
        if change < rtol or cost == 0.0:
            return LmResult(x, cost, it, True)
    return LmResult(x, cost, max_iter, False)


def _biexp(theta, tau):
    v_inf, a1, lt1, a2, lt2 = theta
    # trial steps may push log-tau out of range; LM rejects the non-finite cost
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        e1 = np.exp(-tau / np.exp(lt1))
        e2 = np.exp(-tau / np.exp(lt2))
    return v_inf - a1 * e1 - a2 * e2, e1, e2


def _biexp_jac(theta, tau):
    v_inf, a1, lt1, a2, lt2 = theta
    _, e1, e2 = _biexp(theta, tau)
    t1, t2 = np.exp(lt1), np.exp(lt2)
    return np.column_stack(
        [np.ones_like(tau), -e1, -a1 * e1 * tau / t1, -e2, -a2 * e2 * tau / t2]
    )


def _log_linear(tau, r):
    """Fit r = A·exp(-tau/T) on positive samples; returns (A, T) or None."""
    mask = r > 0
    if mask.sum() < 3:
        return None
    slope, intercept = np.polyfit(tau[mask], np.log(r[mask]), 1)
    if slope >= 0:
        return None
    return math.exp(intercept), -1.0 / slope


def _asymptote(v):
    """Aitken extrapolation of the settling value from three equally spaced late samples."""
    n = v.size
    h = max(n // 4, 1)
    y1, y2, y3 = v[n - 1 - 2 * h], v[n - 1 - h], v[n - 1]
    den = y1 + y3 - 2.0 * y2
    if abs(den) < 1e-15 or (y2 - y1) * (y3 - y2) <= 0:
        return float(v[-1])
    return float((y1 * y3 - y2 * y2) / den)


def _initial_guess(tau, v):
    v_inf = _asymptote(v)
    r = v_inf - v
    if abs(r[0]) > 0 and np.sign(r[0]) < 0:
        r = -r
        sign = -1.0
    else:
        sign = 1.0
    half = tau.size // 2
    slow = _log_linear(tau[half:], r[half:]) or _log_linear(tau, r)
    if slow is None:
        a_slow, t_slow = r[0] / 2, tau[-1] / 3
    else:
        a_slow, t_slow = slow
    r_fast = r - a_slow * np.exp(-tau / t_slow)
    below = np.nonzero(r_fast < 0.05 * r_fast[0])[0]
    cut = max(5, int(below[0]) if below.size else tau.size // 8)
    fast = _log_linear(tau[:cut], r_fast[:cut])
    if fast is None:
        a_fast, t_fast = max(r_fast[0], 1e-6), t_slow / 10
    else:
        a_fast, t_fast = fast
    return np.array([v_inf, sign * a_fast, math.log(t_fast), sign * a_slow, math.log(t_slow)])


@dataclass(frozen=True)
class RcFit:
    """Result of :func:`fit_rc_pairs`; the ``s`` branch is the shorter time constant."""

    r_s: float
    c_s: float
    r_f: float
    c_f: float
    v_inf: float
    residual_v: float
    single_branch: bool = False

    @property
    def tau_s(self):
        return self.r_s * self.c_s

    @property
    def tau_f(self):
        return self.r_f * self.c_f

    def pairs(self):
        return self.r_s, self.c_s, self.r_f, self.c_f


def _pulse_drive(tau, pulse_current, pulse_duration, pre_current):
    decay = math.exp(-pulse_duration / tau)
    return pulse_current * (1.0 - decay) + pre_current * decay


def _history_drive(tau, history, dt):
    """Branch voltage per ohm at the end of a held-current history, starting relaxed."""
    n = history.size
    # sample j is held over [j·dt, (j+1)·dt]; window starts at n·dt
    age_end = (n - 1 - np.arange(n)) * dt
    weights = np.exp(-age_end / tau) - np.exp(-(age_end + dt) / tau)
    return float(history @ weights)


def _drive_fn(pulse_current, pulse_duration, pre_current, history, dt):
    if history is not None:
        history = np.asarray(history, dtype=float)
        return lambda tau: _history_drive(tau, history, dt)
    if pulse_current is None or pulse_duration is None:
        raise ValidationError("give either the pulse current and duration or the current history")
    return lambda tau: _pulse_drive(tau, pulse_current, pulse_duration, pre_current)


def _branch_resistance(amplitude, tau, drive):
    d = drive(tau)
    if d == 0:
        raise DegenerateFitError("current history gives no RC excitation")
    return amplitude / d


def fit_rc_pairs(
    t,
    voltage,
    pulse_current=None,
    pulse_duration=None,
    pre_current=0.0,
    history=None,
    max_iter=200,
) -> RcFit:
    """Fit the two RC branches to a zero-current relaxation window.

    The window must start at the first sample after the pulse. The voltage is
    modelled as ``V_inf - A1·exp(-t/T1) - A2·exp(-t/T2)``. Each amplitude is
    the branch voltage when the rest began, which is converted to a
    resistance either from the complete current ``history`` preceding the
    window (held samples at the window's spacing, exact) or from the pulse
    alone, assuming the branches had settled at ``pre_current`` beforehand.
    """
    t = _check_time(t)
    v = np.asarray(voltage, dtype=float)
    if t.size < 50 or v.size != t.size:
        raise ValidationError("relaxation window needs at least 50 aligned samples")
    drive = _drive_fn(pulse_current, pulse_duration, pre_current, history, float(t[1] - t[0]))
    tau = t - t[0]
    span = float(np.max(v) - np.min(v))
    if span <= 1e-9 * max(1.0, abs(float(v[0]))):
        raise DegenerateFitError("relaxation voltage is flat")

    theta0 = _initial_guess(tau, v)
    res = levenberg_marquardt(
        lambda th: _biexp(th, tau)[0] - v,
        lambda th: _biexp_jac(th, tau),
        theta0,
        max_iter=max_iter,
    )
    rms = math.sqrt(res.cost / v.size)
    if not res.converged:
        raise FitError(f"relaxation fit did not converge in {max_iter} iterations", residual=rms)

    v_inf, a1, lt1, a2, lt2 = res.x
    t1, t2 = math.exp(lt1), math.exp(lt2)
    if abs(t1 - t2) <= 0.01 * max(t1, t2):
        warnings.warn("time constants coincide within 1 %; falling back to a single RC branch", stacklevel=2)
        return _single_branch(tau, v, drive, max_iter)
    if t1 > t2:
        a1, t1, a2, t2 = a2, t2, a1, t1
    r_s = _branch_resistance(a1, t1, drive)
    r_f = _branch_resistance(a2, t2, drive)
    if r_s <= 0 or r_f <= 0:
        raise FitError("fitted branch resistance is not positive", residual=rms)
    return RcFit(r_s, t1 / r_s, r_f, t2 / r_f, float(v_inf), rms)


def _single_branch(tau, v, drive, max_iter):
    def model(th):
        return th[0] - th[1] * np.exp(-tau / math.exp(th[2]))

    def jac(th):
        tc = math.exp(th[2])
        e = np.exp(-tau / tc)
        return np.column_stack([np.ones_like(tau), -e, -th[1] * e * tau / tc])

    v_inf = _asymptote(v)
    guess = _log_linear(tau, v_inf - v) or (v_inf - v[0], tau[-1] / 5)
    res = levenberg_marquardt(lambda th: model(th) - v, jac, [v_inf, guess[0], math.log(guess[1])], max_iter=max_iter)
    rms = math.sqrt(res.cost / v.size)
    if not res.converged:
        raise FitError("single-branch relaxation fit did not converge", residual=rms)
    tc = math.exp(res.x[2])
    r = _branch_resistance(res.x[1], tc, drive)
    if r <= 0:
        raise FitError("fitted branch resistance is not positive", residual=rms)
    # two identical branches of half the resistance reproduce one RC exactly
    return RcFit(r / 2, 2 * tc / r, r / 2, 2 * tc / r, float(res.x[0]), rms, single_branch=True)


def fit_ocv_polynomial(soc, ocv, degree=9) -> OcvPolynomial:
    """Least-squares OCV polynomial, returned as 10 coefficients (highest first).

    Lower degrees are zero-padded at the front. Solved by QR on a
    column-normalised Vandermonde matrix.
    """
    z = np.asarray(soc, dtype=float)
    y = np.asarray(ocv, dtype=float)
    if not 0 <= degree <= 9:
        raise ValidationError("degree must be between 0 and 9")
    if z.shape != y.shape or z.ndim != 1:
        raise ValidationError("soc and ocv must be 1-D arrays of equal length")
    if z.size < 10 or np.unique(z).size < degree + 1:
        raise ValidationError(f"need at least {max(10, degree + 1)} distinct SoC samples, got {np.unique(z).size}")
    if not np.all(np.isfinite(z)) or not np.all(np.isfinite(y)):
        raise ValidationError("non-finite samples")
    vander = np.vander(z, degree + 1)
    scale = np.linalg.norm(vander, axis=0)
    scale[scale == 0] = 1.0
    q, r = np.linalg.qr(vander / scale)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-13 * diag.max():
        raise FitError("Vandermonde matrix is rank deficient")
    coef = solve_triangular(r, q.T @ y) / scale
    return OcvPolynomial(tuple(np.concatenate([np.zeros(9 - degree), coef])))


def ocv_fit_residual(poly: OcvPolynomial, soc, ocv) -> float:
    z = np.asarray(soc, dtype=float)
    return float(np.sqrt(np.mean((poly(z) - np.asarray(ocv, dtype=float)) ** 2)))


@dataclass(frozen=True)
class IdentRow:
    soc: float
    params: CellParams
    residual_v: float

    def to_dict(self):
        p = self.params
        return {
            "soc": float(self.soc),
            "r_int_ohm": float(p.r_int),
            "r_s_ohm": float(p.r_s),
            "c_s_farad": float(p.c_s),
            "r_f_ohm": float(p.r_f),
            "c_f_farad": float(p.c_f),
            "residual_v": float(self.residual_v),
        }


@dataclass
class IdentResult:
    rows: list = field(default_factory=list)

    def __post_init__(self):
        for row in self.rows:
            if row.residual_v < 0:
                raise ValidationError("residual must be non-negative")

    def to_json(self) -> str:
        return json.dumps([r.to_dict() for r in self.rows], indent=2)

    @classmethod
    def from_json(cls, text: str, q_total=2.85 * 3600.0) -> "IdentResult":
        rows = []
        for d in json.loads(text):
            params = CellParams(d["r_int_ohm"], d["r_s_ohm"], d["c_s_farad"], d["r_f_ohm"], d["c_f_farad"], q_total)
            rows.append(IdentRow(d["soc"], params, d["residual_v"]))
        return cls(rows)

    def nearest(self, soc) -> IdentRow:
        return min(self.rows, key=lambda r: abs(r.soc - soc))


def find_pulses(current, threshold=None) -> list:
    """``(start, end)`` index pairs of discharge pulses followed by a rest."""
    i = np.asarray(current, dtype=float)
    if i.size == 0:
        return []
    if threshold is None:
        threshold = 0.5 * float(np.max(np.abs(i)))
    high = np.abs(i) >= threshold
    if threshold <= 0 or not high.any():
        return []
    pulses = []
    k = 0
    while k < i.size:
        if high[k]:
            start = k
            while k < i.size and high[k]:
                k += 1
            if k < i.size and i[k] == 0:
                pulses.append((start, k))
        else:
            k += 1
    return pulses


def identify(t, current, voltage, q_total, z0=1.0, window=8, min_rest=50) -> IdentResult:
    """Run the two-stage identification on every pulse in a telemetry record."""
    t = _check_time(t)
    i = np.asarray(current, dtype=float)
    v = np.asarray(voltage, dtype=float)
    if not (t.size == i.size == v.size):
        raise ValidationError("telemetry columns differ in length")
    dt = float(np.median(np.diff(t))) if t.size > 1 else 1.0
    soc = coulomb_count(i, q_total, z0, dt)
    rows = []
    for start, end in find_pulses(i):
        _, rest_end = _run_bounds(i, end, +1)
        if rest_end - end < min_rest:
            continue
        r_int = fit_rint(t, i, v, edge=end, window=window)
        # the record is assumed to start with relaxed RC branches
        rc = fit_rc_pairs(t[end:rest_end], v[end:rest_end], history=i[:end])
        params = CellParams(r_int, rc.r_s, rc.c_s, rc.r_f, rc.c_f, q_total)
        rows.append(IdentRow(float(soc[end]), params, rc.residual_v))
    if not rows:
        raise NoPulseError("no pulse followed by a rest window was found")
    return IdentResult(rows)
