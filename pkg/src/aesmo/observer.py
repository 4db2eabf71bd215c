"""State observers: the sliding-mode AESMO, a fixed-gain Luenberger baseline and a UKF.

The observer drift is ``A·x̂ + B·u + φ(x̂, u)``, which is identical to the
model derivative, plus the output-injection terms ``L·σ + Ls·sign(σ)`` with
``σ = y − C·x̂`` held constant over each sample.

All step functions accept a single state of shape ``(4,)`` or a batch of
shape ``(4, n)`` with per-column measurements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ecm import C_ROW, CellParams, OcvPolynomial, SystemMatrices, _rhs, rk4, terminal_voltage
from .errors import ValidationError
from .lmi import LmiCertificate


def output_error(y, x_hat, c_row=C_ROW):
    """σ = y − C·x̂ (scalar output)."""
    x = np.asarray(x_hat, dtype=float)
    c = np.asarray(c_row, dtype=float).reshape(-1)
    return y - np.tensordot(c, x, axes=1)


def sign_vec(sigma):
    """Componentwise sign with sign(0) = 0."""
    return np.sign(sigma)


def compute_ls(p, c_row, mu):
    """Switching gain (μ/2)·P⁻¹·Cᵀ."""
    c = np.asarray(c_row, dtype=float).reshape(-1)
    try:
        return 0.5 * mu * np.linalg.solve(np.asarray(p, dtype=float), c)
    except np.linalg.LinAlgError as exc:
        raise ValidationError("P is singular") from exc


@dataclass(frozen=True)
class AesmoGains:
    l: np.ndarray
    ls: np.ndarray
    mu: float
    p: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "l", np.asarray(self.l, dtype=float).reshape(4))
        object.__setattr__(self, "ls", np.asarray(self.ls, dtype=float).reshape(4))
        if self.p is not None:
            expected = compute_ls(self.p, C_ROW, self.mu)
            scale = max(float(np.linalg.norm(expected)), 1e-300)
            if float(np.linalg.norm(self.ls - expected)) > 1e-9 * scale:
                raise ValidationError("ls does not equal (mu/2)·P⁻¹·Cᵀ")

    @classmethod
    def from_certificate(cls, cert: LmiCertificate, mu: float | None = None) -> "AesmoGains":
        mu = cert.mu if mu is None else mu
        return cls(cert.l, compute_ls(cert.p, C_ROW, mu), mu, cert.p)

    @classmethod
    def luenberger(cls, l) -> "AesmoGains":
        return cls(l, np.zeros(4), 0.0)


def _check_step(x, y, dt):
    if not dt > 0:
        raise ValidationError("dt must be positive")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("non-finite observer input")


def _switch(sigma, saturation):
    if saturation is None or saturation <= 0:
        return np.sign(sigma)
    return np.clip(sigma / saturation, -1.0, 1.0)


def _injection(gain, scalar_field):
    # gain (4,) times a scalar or (n,) field -> (4,) or (4, n)
    return np.multiply.outer(gain, scalar_field) if np.ndim(scalar_field) else gain * scalar_field


def aesmo_step(
    x_hat,
    u,
    y,
    dt,
    gains: AesmoGains,
    matrices: SystemMatrices,
    params: CellParams,
    poly: OcvPolynomial,
    saturation: float | None = None,
    u_prev=None,
):
    """One RK4 step of the sliding-mode observer.

    ``saturation`` replaces sign(σ) by clip(σ/width, −1, 1); off by default.
    Passing the previous sample's current as ``u_prev`` first shifts the
    voltage estimate by −Rint·(u − u_prev), so it follows the instantaneous
    output step of a zero-order-held current instead of reading it as error.
    """
    x = np.asarray(x_hat, dtype=float)
    _check_step(x, y, dt)
    if u_prev is not None:
        x = x.copy()
        x[0] = x[0] - params.r_int * (u - u_prev)
    sigma = output_error(y, x, matrices.c)
    corr = _injection(gains.l, sigma)
    if gains.mu != 0.0:
        corr = corr + _injection(gains.ls, _switch(sigma, saturation))
    return rk4(lambda s: _rhs(s, u, params, poly) + corr, x, dt)


def luenberger_step(x_hat, u, y, dt, l_fixed, matrices: SystemMatrices, params: CellParams, poly: OcvPolynomial):
    """Fixed-gain observer: the AESMO step with the switching term removed."""
    return aesmo_step(x_hat, u, y, dt, AesmoGains.luenberger(l_fixed), matrices, params, poly)


# ---- unscented Kalman filter on [z, V_RC1, V_RC2] -----------------------------


@dataclass(frozen=True)
class UkfConfig:
    p0: np.ndarray
    q_proc: np.ndarray
    r_meas: float = 1e-4
    ut_alpha: float = 1.0
    ut_beta: float = 2.0
    ut_kappa: float = 0.0

    def __post_init__(self):
        for name in ("p0", "q_proc"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (3, 3) or not np.allclose(m, m.T, atol=1e-15):
                raise ValidationError(f"{name} must be a symmetric 3×3 matrix")
            if np.linalg.eigvalsh(m)[0] < -1e-15:
                raise ValidationError(f"{name} must be positive semidefinite")
            object.__setattr__(self, name, m)
        if not self.r_meas > 0:
            raise ValidationError("r_meas must be positive")
        if not self.ut_alpha > 0:
            raise ValidationError("ut_alpha must be positive")

    @property
    def lam(self) -> float:
        return self.ut_alpha**2 * (3 + self.ut_kappa) - 3

    def weights(self):
        """Mean and covariance weights of the 2n+1 sigma points."""
        n, lam = 3, self.lam
        wm = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = lam / (n + lam) + (1.0 - self.ut_alpha**2 + self.ut_beta)
        return wm, wc


def default_ukf_config() -> UkfConfig:
    from .reference import PUBLISHED_UKF_P0, PUBLISHED_UKF_Q

    return UkfConfig(PUBLISHED_UKF_P0, PUBLISHED_UKF_Q)


def _sqrt_psd(m, jitter=1e-12, tries=6):
    m = 0.5 * (m + m.T)
    for k in range(tries):
        try:
            return np.linalg.cholesky(m + (0.0 if k == 0 else jitter * 10 ** (k - 1)) * np.eye(m.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise ValidationError("UKF covariance lost positive definiteness")


def sigma_points(mean, cov, config: UkfConfig):
    n = mean.size
    s = _sqrt_psd((n + config.lam) * cov)
    pts = np.empty((n, 2 * n + 1))
    pts[:, 0] = mean
    pts[:, 1 : n + 1] = mean[:, None] + s
    pts[:, n + 1 :] = mean[:, None] - s
    return pts


def _ukf_process(pts, u, dt, params: CellParams):
    # exact model rates of the three physical states (no disturbance)
    def f(s):
        return np.array([-params.b1 * u + 0.0 * s[0], -params.a2 * s[1] + params.b2 * u, -params.a3 * s[2] + params.b3 * u])

    return rk4(f, pts, dt)


def ukf_update(mean, cov, u, y, config: UkfConfig, params: CellParams, poly: OcvPolynomial):
    """Measurement update with y = V_oc(z) − V1 − V2 − Rint·u."""
    wm, wc = config.weights()
    pts = sigma_points(mean, cov, config)
    yp = terminal_voltage(pts[0], pts[1], pts[2], u, params, poly)
    y_mean = float(wm @ yp)
    dy = yp - y_mean
    dx = pts - (pts @ wm)[:, None]
    s = float(wc @ (dy * dy)) + config.r_meas
    pxy = (dx * dy) @ wc
    k = pxy / s
    mean = mean + k * (y - y_mean)
    cov = cov - np.outer(k, k) * s
    return mean, 0.5 * (cov + cov.T)


def ukf_predict(mean, cov, u, dt, config: UkfConfig, params: CellParams):
    wm, wc = config.weights()
    pts = _ukf_process(sigma_points(mean, cov, config), u, dt, params)
    mean = pts @ wm
    d = pts - mean[:, None]
    cov = (d * wc) @ d.T + config.q_proc
    return mean, 0.5 * (cov + cov.T)


def ukf_step(mean, cov, u, y, dt, config: UkfConfig, params: CellParams, poly: OcvPolynomial):
    """Correct with the sample (u, y), then propagate over dt; returns the next prior."""
    mean = np.asarray(mean, dtype=float).reshape(3)
    cov = np.asarray(cov, dtype=float)
    if not dt > 0:
        raise ValidationError("dt must be positive")
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov)) and math.isfinite(u) and math.isfinite(y)):
        raise ValidationError("non-finite UKF input")
    mean, cov = ukf_update(mean, cov, u, y, config, params, poly)
    return ukf_predict(mean, cov, u, dt, config, params)
