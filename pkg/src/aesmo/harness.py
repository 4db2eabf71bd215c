"""Evaluation harness: drive cycles, truth simulation, noise, estimator runs and metrics."""

from __future__ import annotations

import bisect
import io
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .ecm import (
    CellParams,
    OcvPolynomial,
    _rhs,
    build_matrices,
    rk4,
    secant_alpha1,
)
from .errors import TelemetryFormatError, ValidationError
from .ident import coulomb_count
from .lmi import LmiCertificate, SynthesisConfig, synthesize_gain
from .observer import AesmoGains, UkfConfig, default_ukf_config, ukf_step
from .reference import (
    NOMINAL_VOLTAGE,
    PUBLISHED_BASELINE_GAIN,
    Q_TOTAL,
    ParamTable,
    default_ocv,
    nominal_params,
    table1_params,
)

HEADER = ("t_s", "current_a", "voltage_v")
TRUTH_COLUMN = "true_soc"
ONE_C_RATE = 1.0 / 3600.0  # SoC per second at 1C

# Gain design used by default. The observer model is one fixed parameter row
# while the cell's RC constants drift with SoC, so the SoC injection is kept
# small (heavier SoC floor weight) and the voltage injection near one per
# second, the largest that stays stable with a 1 s held correction.
TRACKING_SYNTHESIS = SynthesisConfig(alpha=1e-4, eps=1.0, mu=1e-10, gain_bound=2.0, floor_weights=(1.0, 3.0, 1.0, 1.0))


# ---- data types ----------------------------------------------------------------


@dataclass(frozen=True)
class Telemetry:
    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    true_soc: np.ndarray | None = None
    states: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        cols = {"t": self.t, "current": self.current, "voltage": self.voltage}
        if self.true_soc is not None:
            cols["true_soc"] = self.true_soc
        n = None
        for name, col in cols.items():
            arr = np.asarray(col, dtype=float)
            if arr.ndim != 1:
                raise ValidationError(f"{name} must be one-dimensional")
            if n is None:
                n = arr.size
            elif arr.size != n:
                raise ValidationError("telemetry columns differ in length")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        if n == 0:
            raise ValidationError("telemetry is empty")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise ValidationError("timestamps must be strictly increasing")

    def __len__(self):
        return self.t.size

    @property
    def dt(self) -> float:
        return float(np.median(np.diff(self.t))) if self.t.size > 1 else 1.0

    def replace(self, **changes) -> "Telemetry":
        d = {"t": self.t, "current": self.current, "voltage": self.voltage, "true_soc": self.true_soc, "states": self.states}
        d.update(changes)
        return Telemetry(**d)


@dataclass(frozen=True)
class DisturbanceSpec:
    """Additive disturbance d(t) on every state rate.

    ``amplitude`` is a fraction of ``scale`` (default: the 1C SoC rate), so
    0.05 means 5 % of the 1C discharge rate.
    """

    kind: str = "none"
    amplitude: float = 0.0
    frequency: float = 0.27e-3
    seed: int | None = None
    scale: float = ONE_C_RATE

    def __post_init__(self):
        if self.kind not in ("none", "sinusoid", "gaussian"):
            raise ValidationError(f"unknown disturbance kind {self.kind!r}")
        if not (self.amplitude >= 0 and math.isfinite(self.amplitude)):
            raise ValidationError("disturbance amplitude must be non-negative")
        if self.kind == "sinusoid" and not self.frequency > 0:
            raise ValidationError("sinusoid frequency must be positive")

    @property
    def bound(self) -> float:
        """Sup-norm bound D₊ of d(t) (3σ for the Gaussian kind)."""
        if self.kind == "none":
            return 0.0
        k = 3.0 if self.kind == "gaussian" else 1.0
        return k * self.amplitude * self.scale

    def sampler(self, n_samples: int, dt: float):
        """Callable d(t); Gaussian values are held per sample."""
        amp = self.amplitude * self.scale
        if self.kind == "none" or amp == 0.0:
            return None
        if self.kind == "sinusoid":
            w = 2.0 * math.pi * self.frequency
            return lambda t: amp * math.sin(w * t)
        draws = amp * np.random.default_rng(self.seed).standard_normal(n_samples + 1)
        return lambda t: float(draws[min(int(t / dt + 1e-9), n_samples)])

    @classmethod
    def parse(cls, text: str) -> "DisturbanceSpec":
        """``none``, ``sinusoid:<amp>[@<hz>]`` or ``gaussian:<amp>[:<seed>]``."""
        text = text.strip()
        if text in ("", "none"):
            return cls()
        try:
            kind, _, rest = text.partition(":")
            if kind == "sinusoid":
                amp, _, freq = rest.partition("@")
                return cls("sinusoid", float(amp), float(freq) if freq else 0.27e-3)
            if kind == "gaussian":
                amp, _, seed = rest.partition(":")
                return cls("gaussian", float(amp), seed=int(seed) if seed else None)
        except ValueError as exc:
            raise ValidationError(f"bad disturbance spec {text!r}") from exc
        raise ValidationError(f"bad disturbance spec {text!r}")


@dataclass(frozen=True)
class RunReport:
    iae: float
    ise: float
    max_abs_err: float
    time_to_2pct: float
    final_err: float
    samples: int
    settled_max_err: float = 0.0
    diverged: bool = False

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = None if isinstance(v, float) and not math.isfinite(v) else v
        return out


# ---- cycles --------------------------------------------------------------------


def generate_hppc_eval(
    q_total=Q_TOTAL,
    pulse_count=30,
    amplitudes=(2.85,),
    depth=0.9,
    rest=1200,
    initial_rest=60,
    dt=1.0,
):
    """Discharge pulse / rest profile removing about ``depth``·Q in ``pulse_count`` pulses.

    Pulse lengths are sized for the largest amplitude, so smaller amplitudes
    remove proportionally less charge. Returns ``(t, current)``.
    """
    if int(pulse_count) != pulse_count or pulse_count < 1:
        raise ValidationError("pulse_count must be a positive integer")
    amps = np.atleast_1d(np.asarray(amplitudes, dtype=float))
    if amps.size == 0 or np.any(amps < 0):
        raise ValidationError("amplitudes must be non-negative discharge currents")
    if not (0.0 < depth <= 1.0):
        raise ValidationError("depth must lie in (0, 1]")
    if rest < 0 or initial_rest < 0 or dt <= 0:
        raise ValidationError("durations must be non-negative")
    i_ref = float(amps.max()) if amps.max() > 0 else q_total / 3600.0
    n_pulse = int(math.floor(depth * q_total / (pulse_count * i_ref * dt) + 1e-9))
    n_rest = int(round(rest / dt))
    parts = [np.zeros(int(round(initial_rest / dt)))]
    for k in range(int(pulse_count)):
        parts.append(np.full(n_pulse, amps[k % amps.size]))
        parts.append(np.zeros(n_rest))
    current = np.concatenate(parts)
    return dt * np.arange(current.size), current


def generate_dynamic_cycle(seed=0, duration=5000.0, peak_current=5.7, dt=1.0):
    """Seeded piecewise-constant urban-style profile with regenerative segments."""
    if not duration > 0 or not peak_current > 0 or not dt > 0:
        raise ValidationError("duration, peak_current and dt must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration / dt))
    current = np.empty(n)
    k = 0
    while k < n:
        seg = max(1, int(round(rng.uniform(5.0, 60.0) / dt)))
        r = rng.random()
        if r < 0.25:
            level = 0.0
        elif r < 0.80:
            level = rng.uniform(0.0, peak_current)
        else:
            level = -rng.uniform(0.0, 0.4 * peak_current)
        current[k : k + seg] = level
        k += seg
    return dt * np.arange(n), current


# ---- truth ---------------------------------------------------------------------


class _Rows:
    """Fast per-step parameter lookup for a fixed cell or a SoC-indexed table."""

    FIELDS = ("r_int", "a2", "a3", "b1", "b2", "b3")

    def __init__(self, params):
        if isinstance(params, CellParams):
            self.socs = None
            self.fixed = tuple(float(getattr(params, f)) for f in self.FIELDS)
        elif isinstance(params, ParamTable):
            self.socs = list(params.socs)
            raw = np.array([[c.r_int, c.r_s, c.c_s, c.r_f, c.c_f] for c in params.cells])
            self.raw = raw
            self.q = params.cells[0].q_total
        else:
            raise ValidationError("params must be CellParams or ParamTable")

    def __call__(self, z):
        if self.socs is None:
            return self.fixed
        s = self.socs
        if z <= s[0]:
            row = self.raw[0]
        elif z >= s[-1]:
            row = self.raw[-1]
        else:
            j = bisect.bisect_right(s, z) - 1
            w = (z - s[j]) / (s[j + 1] - s[j])
            row = (1.0 - w) * self.raw[j] + w * self.raw[j + 1]
        r_int, r_s, c_s, r_f, c_f = (float(x) for x in row)
        return (r_int, 1.0 / (r_s * c_s), 1.0 / (r_f * c_f), 1.0 / self.q, 1.0 / c_s, 1.0 / c_f)


def _simulate_physical(current, rows, poly, z0, dist, dt):
    n = current.size
    z = np.empty(n)
    v1 = np.empty(n)
    v2 = np.empty(n)
    rint = np.empty(n)
    s = [float(z0), 0.0, 0.0]
    h = 0.5 * dt
    for k in range(n):
        i = float(current[k])
        r_int, a2, a3, b1, b2, b3 = rows(s[0])
        z[k], v1[k], v2[k], rint[k] = s[0], s[1], s[2], r_int
        t = k * dt
        if dist is None:
            d0 = d1 = d2 = 0.0
        else:
            d0, d1, d2 = dist(t), dist(t + h), dist(t + dt)
        # RK4 on the decoupled linear rates, written out for speed
        dz = -b1 * i
        zn = s[0] + dt * dz + dt * (d0 + 4.0 * d1 + d2) / 6.0
        x1, x2 = s[1], s[2]
        k1a, k1b = -a2 * x1 + b2 * i + d0, -a3 * x2 + b3 * i + d0
        k2a, k2b = -a2 * (x1 + h * k1a) + b2 * i + d1, -a3 * (x2 + h * k1b) + b3 * i + d1
        k3a, k3b = -a2 * (x1 + h * k2a) + b2 * i + d1, -a3 * (x2 + h * k2b) + b3 * i + d1
        k4a, k4b = -a2 * (x1 + dt * k3a) + b2 * i + d2, -a3 * (x2 + dt * k3b) + b3 * i + d2
        s = [
            min(max(zn, 0.0), 1.0),
            x1 + dt * (k1a + 2.0 * k2a + 2.0 * k3a + k4a) / 6.0,
            x2 + dt * (k1b + 2.0 * k2b + 2.0 * k3b + k4b) / 6.0,
        ]
    voltage = poly(z) - v1 - v2 - rint * current
    return z, v1, v2, rint, voltage


def _exhausted_at(z, current):
    hit = np.nonzero((z <= 0.0) & (current > 0))[0]
    return int(hit[0]) if hit.size else None


def simulate_truth(
    current,
    params=None,
    poly: OcvPolynomial | None = None,
    z0=1.0,
    disturbance: DisturbanceSpec | None = None,
    dt=1.0,
    model="physical",
) -> Telemetry:
    """Simulate the reference cell under a sampled current profile.

    ``model="physical"`` integrates [z, V_RC1, V_RC2] with voltage from the
    terminal equation; ``params`` may be a :class:`ParamTable` (parameters
    follow the SoC, the default) or a fixed :class:`CellParams`.
    ``model="state_space"`` integrates the four-state form with the
    disturbance entering through D and reports V as the measurement; the full
    state history is kept in ``Telemetry.states``.
    """
    current = np.asarray(current, dtype=float)
    if current.ndim != 1 or current.size == 0:
        raise ValidationError("current must be a non-empty 1-D series")
    if not (0.0 <= z0 <= 1.0):
        raise ValidationError("z0 must lie in [0, 1]")
    poly = poly or default_ocv()
    params = table1_params() if params is None else params
    dist = (disturbance or DisturbanceSpec()).sampler(current.size, dt)
    t = dt * np.arange(current.size)

    if model == "physical":
        z, v1, v2, _, voltage = _simulate_physical(current, _Rows(params), poly, z0, dist, dt)
        states = None
    elif model == "state_space":
        if not isinstance(params, CellParams):
            raise ValidationError("the state-space model needs fixed CellParams")
        x = np.array([float(poly(z0)), z0, 0.0, 0.0])
        states = np.empty((current.size, 4))
        for k, i in enumerate(current):
            states[k] = x
            tk = k * dt
            if dist is None:
                x = rk4(lambda s: _rhs(s, i, params, poly), x, dt)
            else:
                # time enters through d(t); carry it alongside the state
                xt = np.append(x, tk)
                xt = rk4(lambda s: np.append(_rhs(s[:4], i, params, poly) + dist(s[4]), 1.0), xt, dt)
                x = xt[:4]
            x[1] = min(max(x[1], 0.0), 1.0)
        z, voltage = states[:, 1].copy(), states[:, 0].copy()
    else:
        raise ValidationError(f"unknown model {model!r}")

    cut = _exhausted_at(z, current)
    if cut is not None:
        warnings.warn(f"cell exhausted at t = {t[cut]:.0f} s; series truncated", RuntimeWarning, stacklevel=2)
        cut = max(cut, 1)
        t, current, voltage, z = t[:cut], current[:cut], voltage[:cut], z[:cut]
        states = None if states is None else states[:cut]
    return Telemetry(t, current.copy(), voltage, z, states)


def add_noise(telemetry: Telemetry, current_pct=5.0, voltage_pct=1.0, seed=None) -> Telemetry:
    """Zero-mean Gaussian sensor noise; std is a percentage of full scale.

    Full scale is max |I| for current and the nominal 3.65 V for voltage.
    """
    if current_pct < 0 or voltage_pct < 0:
        raise ValidationError("noise percentages must be non-negative")
    rng = np.random.default_rng(seed)
    n = len(telemetry)
    i_std = current_pct / 100.0 * float(np.max(np.abs(telemetry.current)))
    v_std = voltage_pct / 100.0 * NOMINAL_VOLTAGE
    current = telemetry.current + (i_std * rng.standard_normal(n) if i_std > 0 else 0.0)
    voltage = telemetry.voltage + (v_std * rng.standard_normal(n) if v_std > 0 else 0.0)
    return telemetry.replace(current=current, voltage=voltage)


# ---- estimation ----------------------------------------------------------------


@lru_cache(maxsize=None)
def _default_certificate() -> LmiCertificate:
    poly = default_ocv()
    return synthesize_gain(build_matrices(nominal_params(), secant_alpha1(poly)), TRACKING_SYNTHESIS)


def default_gains() -> AesmoGains:
    """AESMO gains synthesized for the nominal cell with the tracking design."""
    return AesmoGains.from_certificate(_default_certificate())


def _as_gains(gains) -> AesmoGains:
    if gains is None:
        return default_gains()
    if isinstance(gains, AesmoGains):
        return gains
    if isinstance(gains, LmiCertificate):
        return AesmoGains.from_certificate(gains)
    return AesmoGains.luenberger(gains)


def _observer_run(current, voltage, gains: AesmoGains, params, poly, z0_guess, dt, jump=True):
    """Run the observer over ``n`` samples; ``voltage`` may be (n,) or (n, m) for m runs.

    With ``jump`` the voltage state follows the −Rint·ΔI step of the output
    whenever the held current changes. Returns the SoC estimates with the
    same shape as ``voltage``; runs that blow up are filled with NaN from
    that point on.
    """
    v = np.asarray(voltage, dtype=float)
    batch = v.ndim == 2
    vv = v if batch else v[:, None]
    n, m = vv.shape
    x = np.zeros((4, m))
    x[0] = vv[0]
    x[1] = z0_guess
    out = np.empty((n, m))
    lcol = gains.l[:, None]
    lscol = gains.ls[:, None]
    use_sign = gains.mu != 0.0
    alive = np.ones(m, dtype=bool)
    i_prev = current[0]
    with np.errstate(all="ignore"):
        for k in range(n):
            out[k] = x[1]
            i = current[k]
            if jump:
                x[0] -= params.r_int * (i - i_prev)
            i_prev = i
            sigma = vv[k] - x[0]
            corr = lcol * sigma
            if use_sign:
                corr = corr + lscol * np.sign(sigma)
            x = rk4(lambda s: _rhs(s, i, params, poly) + corr, x, dt)
            bad = ~np.all(np.isfinite(x), axis=0) | (np.abs(x[1]) > 1e3)
            if np.any(bad & alive):
                alive &= ~bad
                x[:, ~alive] = np.nan
    return out if batch else out[:, 0]


def _observer_run_scalar(current, voltage, gains: AesmoGains, params, poly, z0_guess, dt, jump=True):
    """Single-run fast path of :func:`_observer_run` on plain floats (same RK4 scheme)."""
    c0 = poly.coeffs
    c1 = poly._d1
    a2, a3, b1, b2, b3 = params.a2, params.a3, params.b1, params.b2, params.b3
    k_rb = b1 * params.r_bar
    bv = b2 + b3 + a2 * params.r_int
    l0, l1, l2, l3 = (float(v) for v in gains.l)
    s0, s1, s2, s3 = (float(v) for v in gains.ls)
    use_sign = gains.mu != 0.0

    def f(v, z, x1, x2, i, g0, g1, g2, g3):
        voc = c0[0]
        for c in c0[1:]:
            voc = voc * z + c
        dvoc = c1[0]
        for c in c1[1:]:
            dvoc = dvoc * z + c
        return (
            a2 * voc - a2 * v + (a3 - a2) * x2 - (b1 * dvoc + bv) * i + g0,
            -k_rb * (voc - v - x1 - x2) + g1,
            -a2 * x1 + b2 * i + g2,
            -a3 * x2 + b3 * i + g3,
        )

    n = current.size
    out = np.empty(n)
    v, z, x1, x2 = float(voltage[0]), float(z0_guess), 0.0, 0.0
    r_int = float(params.r_int)
    i_prev = float(current[0])
    h = 0.5 * dt
    w = dt / 6.0
    k = 0
    try:
        for k in range(n):
            out[k] = z
            i = float(current[k])
            if jump:
                v -= r_int * (i - i_prev)
            i_prev = i
            sig = float(voltage[k]) - v
            sg = (sig > 0) - (sig < 0) if use_sign else 0
            g0, g1, g2, g3 = l0 * sig + s0 * sg, l1 * sig + s1 * sg, l2 * sig + s2 * sg, l3 * sig + s3 * sg
            p1 = f(v, z, x1, x2, i, g0, g1, g2, g3)
            p2 = f(v + h * p1[0], z + h * p1[1], x1 + h * p1[2], x2 + h * p1[3], i, g0, g1, g2, g3)
            p3 = f(v + h * p2[0], z + h * p2[1], x1 + h * p2[2], x2 + h * p2[3], i, g0, g1, g2, g3)
            p4 = f(v + dt * p3[0], z + dt * p3[1], x1 + dt * p3[2], x2 + dt * p3[3], i, g0, g1, g2, g3)
            v += w * (p1[0] + 2.0 * p2[0] + 2.0 * p3[0] + p4[0])
            z += w * (p1[1] + 2.0 * p2[1] + 2.0 * p3[1] + p4[1])
            x1 += w * (p1[2] + 2.0 * p2[2] + 2.0 * p3[2] + p4[2])
            x2 += w * (p1[3] + 2.0 * p2[3] + 2.0 * p3[3] + p4[3])
            if not (abs(z) <= 1e3 and math.isfinite(v + x1 + x2)):
                out[k + 1 :] = np.nan
                break
    except OverflowError:
        out[k + 1 :] = np.nan
    return out


def _ukf_run(current, voltage, config: UkfConfig, params, poly, z0_guess, dt):
    mean = np.array([z0_guess, 0.0, 0.0])
    cov = config.p0.copy()
    out = np.empty(current.size)
    for k in range(current.size):
        out[k] = mean[0]
        mean, cov = ukf_step(mean, cov, float(current[k]), float(voltage[k]), dt, config, params, poly)
    return out


def soc_metrics(t, estimate, truth, settle_fraction=0.2) -> RunReport:
    """IAE/ISE (rectangle sums), peak error and time after which |e| stays ≤ 2 %."""
    t = np.asarray(t, dtype=float)
    e = np.asarray(estimate, dtype=float) - np.asarray(truth, dtype=float)
    n = e.size
    dt = np.diff(t, append=t[-1] + (t[-1] - t[-2] if n > 1 else 1.0))
    finite = np.isfinite(e)
    ae = np.where(finite, np.abs(e), np.inf)
    bad = np.nonzero(ae > 0.02)[0]
    if bad.size == 0:
        t2 = 0.0
    elif bad[-1] == n - 1:
        t2 = math.inf
    else:
        t2 = float(t[bad[-1] + 1] - t[0])
    start = int(math.floor(settle_fraction * n))
    return RunReport(
        iae=float(np.sum(ae * dt)),
        ise=float(np.sum(ae * ae * dt)),
        max_abs_err=float(np.max(ae)),
        time_to_2pct=t2,
        final_err=float(e[-1]) if finite[-1] else math.nan,
        samples=n,
        settled_max_err=float(np.max(ae[start:])) if start < n else 0.0,
        diverged=not bool(np.all(finite)),
    )


def _truth_or_count(telemetry: Telemetry, q_total, z0=1.0):
    if telemetry.true_soc is not None:
        return telemetry.true_soc
    if q_total is None:
        raise ValidationError("telemetry has no true_soc and no q_total was given for coulomb counting")
    return coulomb_count(telemetry.current, q_total, z0, telemetry.dt)


def run_estimation(
    telemetry: Telemetry,
    estimator="aesmo",
    gains=None,
    z0_guess=0.6,
    params: CellParams | None = None,
    poly: OcvPolynomial | None = None,
    q_total=None,
    settle_fraction=0.2,
    jump=True,
):
    """Run one estimator over a telemetry record.

    ``gains`` is an :class:`AesmoGains` / certificate for ``aesmo``, a gain
    vector for ``luenberger`` (default: the published baseline gain) and a
    :class:`UkfConfig` for ``ukf``. ``jump`` lets the two observers follow
    the −Rint·ΔI output step when the current changes. Returns
    ``(soc_estimate, RunReport)``.
    """
    params = params or nominal_params()
    poly = poly or default_ocv()
    truth = _truth_or_count(telemetry, q_total)
    dt = telemetry.dt
    if estimator == "aesmo":
        est = _observer_run_scalar(telemetry.current, telemetry.voltage, _as_gains(gains), params, poly, z0_guess, dt, jump)
    elif estimator == "luenberger":
        l_fixed = PUBLISHED_BASELINE_GAIN if gains is None else gains
        g = AesmoGains.luenberger(l_fixed.l if isinstance(l_fixed, AesmoGains) else l_fixed)
        est = _observer_run_scalar(telemetry.current, telemetry.voltage, g, params, poly, z0_guess, dt, jump)
    elif estimator == "ukf":
        cfg = gains if isinstance(gains, UkfConfig) else default_ukf_config()
        est = _ukf_run(telemetry.current, telemetry.voltage, cfg, params, poly, z0_guess, dt)
    else:
        raise ValidationError(f"unknown estimator {estimator!r}")
    return est, soc_metrics(telemetry.t, est, truth, settle_fraction)


def monte_carlo_rint(
    base_params=None,
    pct=20.0,
    trials=50,
    seed=0,
    cycle=None,
    gains=None,
    poly: OcvPolynomial | None = None,
    z0=1.0,
    z0_guess=0.6,
    observer_params: CellParams | None = None,
    jump=True,
):
    """Internal-resistance Monte-Carlo: truth Rint scaled by U(1 − pct%, 1 + pct%).

    The observer keeps the nominal model. Each trial draws its factor from its
    own child seed, so results do not depend on the trial count. All trials
    are integrated together as one batch. Returns a list of RunReport.
    """
    if int(trials) != trials or trials < 1:
        raise ValidationError("trials must be a positive integer")
    if pct < 0:
        raise ValidationError("pct must be non-negative")
    poly = poly or default_ocv()
    base = table1_params() if base_params is None else base_params
    if cycle is None:
        _, cycle = generate_hppc_eval()
    current = np.asarray(cycle, dtype=float)
    dt = 1.0
    children = np.random.SeedSequence(seed).spawn(int(trials))
    factors = np.array([np.random.default_rng(c).uniform(1 - pct / 100, 1 + pct / 100) for c in children])

    z, v1, v2, rint, voltage = _simulate_physical(current, _Rows(base), poly, z0, None, dt)
    cut = _exhausted_at(z, current)
    if cut is not None:
        z, rint, voltage, current = z[:cut], rint[:cut], voltage[:cut], current[:cut]
    # Rint affects only the output equation, so one state trajectory serves every trial
    volts = voltage[:, None] - np.outer(rint * current, factors - 1.0)
    est = _observer_run(current, volts, _as_gains(gains), observer_params or nominal_params(), poly, z0_guess, dt, jump)
    t = dt * np.arange(current.size)
    return [soc_metrics(t, est[:, j], z) for j in range(int(trials))]


def compare(telemetry: Telemetry, z0_guess=0.6, params=None, poly=None, q_total=None, gains=None, l_fixed=None, ukf=None):
    """Run all three estimators on the same record; plot-ready series plus reports."""
    truth = _truth_or_count(telemetry, q_total)
    out = {"t": telemetry.t, "true_soc": truth, "reports": {}}
    for name, g in (("aesmo", gains), ("luenberger", l_fixed), ("ukf", ukf)):
        est, rep = run_estimation(telemetry, name, g, z0_guess, params, poly, q_total)
        out[name] = est
        out["reports"][name] = rep
    return out


# ---- CSV I/O -------------------------------------------------------------------


def save_telemetry(path, telemetry: Telemetry):
    cols = [telemetry.t, telemetry.current, telemetry.voltage]
    header = list(HEADER)
    if telemetry.true_soc is not None:
        cols.append(telemetry.true_soc)
        header.append(TRUTH_COLUMN)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        np.savetxt(fh, np.column_stack(cols), fmt="%.17g", delimiter=",", header=",".join(header), comments="")


def _parse_header(line: str):
    names = [h.strip() for h in line.strip().lstrip("﻿").split(",")]
    if names[:3] != list(HEADER) or len(names) > 4 or (len(names) == 4 and names[3] != TRUTH_COLUMN):
        raise TelemetryFormatError(f"expected header {','.join(HEADER)}[,{TRUTH_COLUMN}], got {line.strip()!r}", line=1)
    return len(names)


def _slow_parse(lines, ncol):
    rows = []
    for lineno, raw in enumerate(lines, start=2):
        if not raw.strip():
            continue
        parts = raw.strip().split(",")
        if len(parts) != ncol:
            raise TelemetryFormatError(f"expected {ncol} fields, got {len(parts)}", line=lineno)
        try:
            row = [float(p) for p in parts]
        except ValueError:
            raise TelemetryFormatError(f"non-numeric field in {raw.strip()!r}", line=lineno) from None
        if not all(math.isfinite(x) for x in row):
            raise TelemetryFormatError("non-finite value", line=lineno)
        rows.append(row)
    return np.array(rows, dtype=float).reshape(-1, ncol)


def load_telemetry(path) -> Telemetry:
    """Read ``t_s,current_a,voltage_v[,true_soc]`` CSV; errors carry the line number."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    head, _, body = text.partition("\n")
    if not head.strip():
        raise TelemetryFormatError("missing header", line=1)
    ncol = _parse_header(head)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            data = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2, dtype=float)
        if data.size == 0 or data.shape[1] != ncol or not np.all(np.isfinite(data)):
            raise ValueError
    except ValueError:
        data = _slow_parse(body.splitlines(), ncol)
    if data.shape[0] == 0:
        raise TelemetryFormatError("no data rows", line=2)
    t = data[:, 0]
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        raise TelemetryFormatError("timestamps must be strictly increasing", line=int(bad[0]) + 3)
    return Telemetry(t, data[:, 1], data[:, 2], data[:, 3] if ncol == 4 else None)
