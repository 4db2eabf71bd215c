"""Observer-gain synthesis from the attractive-ellipsoid matrix inequality.

The decision variables are a symmetric ``P`` (4×4) and ``Y = P·L`` (4-vector).
With ``Ξ = PA − YC + AᵀP − CᵀYᵀ + αP + εL_φ²I`` the inequality is

    W̃ = [[Ξ, P], [P, −εI]] ≺ 0,   P ≻ 0,

and the gain is recovered as ``L = P⁻¹Y``. Among feasible points the one with
the smallest ``tr(P)`` (equivalently the smallest trace of the ellipsoid
matrix ``(α/c)·P``) is sought with a small log-det barrier method.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .ecm import SystemMatrices
from .errors import InfeasibleError, ObservabilityError, ValidationError

N = 4
_TRIU = np.triu_indices(N)
N_P = len(_TRIU[0])  # 10 free entries of P
N_VARS = N_P + N  # plus Y


def eig_sym(m, vectors=False, tol=1e-12, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ascending eigenvalues, and the matching column eigenvectors
    when ``vectors`` is true.
    """
    a = np.array(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError("eig_sym needs a square matrix")
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if not np.all(np.isfinite(a)):
        raise ValidationError("matrix has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * max(scale, 1.0):
        raise ValidationError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    norm = float(np.linalg.norm(a)) or 1.0
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(1.0, theta))
                c = 1.0 / math.hypot(1.0, t)
                s = t * c
                # A <- Jᵀ A J acting on rows/columns p and q
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise ValidationError("Jacobi iteration did not converge")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    if vectors:
        return w[order], v[:, order]
    return w[order]


@dataclass(frozen=True)
class SynthesisConfig:
    """Design constants of the inequality.

    ``p_floor`` bounds P from below (P ≽ p_floor·I, default 1e-3·ε) and
    ``gain_bound`` caps ‖Y‖ ≤ gain_bound·p_floor, hence ‖L‖ ≤ gain_bound.
    Without these the trace objective drives P towards zero and the gain
    towards infinity. Scaling (P, Y, ε) together leaves the inequality
    invariant, so only the ratio p_floor/ε matters.

    ``floor_weights`` (each ≥ 1) reshapes the floor to P ≽ p_floor·diag(w).
    Since P ends up on its floor, the weights set the relative size of the
    gain entries: a heavier SoC weight gives a smaller SoC gain.
    """

    alpha: float
    eps: float
    mu: float = 1e-10
    l_phi: float = 0.0
    gamma: float = 0.0
    x_plus: float = 5.0
    d_plus: float = 0.0
    delta: float | None = None
    p_floor: float | None = None
    gain_bound: float | None = 1.0
    floor_weights: tuple | None = None

    def __post_init__(self):
        if self.floor_weights is not None:
            w = tuple(float(x) for x in self.floor_weights)
            if len(w) != N or not all(math.isfinite(x) and x >= 1.0 for x in w):
                raise ValidationError(f"floor_weights must be {N} finite values ≥ 1")
            object.__setattr__(self, "floor_weights", w)
        checks = {
            "alpha": self.alpha > 0,
            "eps": self.eps > 0,
            "mu": self.mu >= 0,
            "l_phi": self.l_phi >= 0,
            "gamma": self.gamma >= 0,
            "x_plus": self.x_plus > 0,
            "d_plus": self.d_plus >= 0,
            "delta": self.delta is None or self.delta > 0,
            "p_floor": self.p_floor is None or self.p_floor > 0,
            "gain_bound": self.gain_bound is None or self.gain_bound > 0,
        }
        for name, ok in checks.items():
            value = getattr(self, name)
            if not ok or (value is not None and not math.isfinite(value)):
                raise ValidationError(f"invalid {name} = {value}")

    @property
    def floor(self) -> float:
        return 1e-3 * self.eps if self.p_floor is None else self.p_floor

    def margin(self, matrices: SystemMatrices) -> float:
        if self.delta is not None:
            return self.delta
        return 1e-9 * (1.0 + float(np.linalg.norm(matrices.a, 2)))


def compute_c(config: SynthesisConfig) -> float:
    """Ultimate-bound constant c = ε·γ²·X₊² + 4·D₊²."""
    return config.eps * config.gamma**2 * config.x_plus**2 + 4.0 * config.d_plus**2


def p_attr(p, alpha, c):
    """Shape matrix (α/c)·P of the attractive ellipsoid."""
    if c <= 0:
        raise ValidationError("c must be positive to define the ellipsoid")
    return (alpha / c) * np.asarray(p, dtype=float)


def error_bound_envelope(t, v0, alpha, c, lambda_min_p):
    """Upper bound on ‖x̃(t)‖² from V(t) ≤ V0·e^(−αt) + (c/α)(1 − e^(−αt))."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValidationError("t must be non-negative")
    decay = np.exp(-alpha * t)
    out = (v0 * decay + (c / alpha) * (1.0 - decay)) / lambda_min_p
    return float(out) if out.ndim == 0 else out


def _y_vec(y):
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != N:
        raise ValidationError(f"y must have {N} entries, got {y.size}")
    return y


def assemble_w_tilde(p, y, matrices: SystemMatrices, config: SynthesisConfig):
    """The 8×8 symmetric matrix W̃(P, Y)."""
    p = np.asarray(p, dtype=float)
    if p.shape != (N, N):
        raise ValidationError(f"p must be {N}×{N}, got {p.shape}")
    y = _y_vec(y)
    a, c = matrices.a, matrices.c.reshape(1, N)
    yc = np.outer(y, c)
    xi = p @ a - yc + a.T @ p - yc.T + config.alpha * p + config.eps * config.l_phi**2 * np.eye(N)
    w = np.block([[xi, p], [p, -config.eps * np.eye(N)]])
    return 0.5 * (w + w.T)


@dataclass(frozen=True)
class FeasibilityReport:
    lambda_max_w: float
    lambda_min_p: float
    delta: float

    @property
    def feasible(self) -> bool:
        return self.lambda_max_w < -self.delta and self.lambda_min_p > self.delta


def check_feasible(p, y, matrices: SystemMatrices, config: SynthesisConfig) -> FeasibilityReport:
    p = np.asarray(p, dtype=float)
    w = assemble_w_tilde(p, y, matrices, config)
    return FeasibilityReport(
        lambda_max_w=float(eig_sym(w)[-1]),
        lambda_min_p=float(eig_sym(0.5 * (p + p.T))[0]),
        delta=config.margin(matrices),
    )


def is_observable(matrices: SystemMatrices) -> bool:
    a, c = matrices.a, matrices.c.reshape(1, N)
    stack = np.vstack([c @ np.linalg.matrix_power(a, k) for k in range(N)])
    s = np.linalg.svd(stack, compute_uv=False)
    return bool(s[-1] > 1e-10 * s[0])


@dataclass(frozen=True)
class LmiCertificate:
    p: np.ndarray
    y: np.ndarray
    l: np.ndarray
    lambda_max_w: float
    lambda_min_p: float
    trace_p_attr: float
    c: float
    alpha: float
    eps: float
    mu: float
    extra: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "p": self.p.tolist(),
            "y": self.y.tolist(),
            "l": self.l.tolist(),
            "lambda_max_w": self.lambda_max_w,
            "lambda_min_p": self.lambda_min_p,
            "trace_p_attr": self.trace_p_attr if math.isfinite(self.trace_p_attr) else None,
            "c": self.c,
            "alpha": self.alpha,
            "eps": self.eps,
            "mu": self.mu,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "LmiCertificate":
        try:
            tp = d.get("trace_p_attr")
            return cls(
                p=np.array(d["p"], dtype=float),
                y=np.array(d["y"], dtype=float),
                l=np.array(d["l"], dtype=float),
                lambda_max_w=float(d["lambda_max_w"]),
                lambda_min_p=float(d["lambda_min_p"]),
                trace_p_attr=math.inf if tp is None else float(tp),
                c=float(d["c"]),
                alpha=float(d["alpha"]),
                eps=float(d["eps"]),
                mu=float(d["mu"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed certificate: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "LmiCertificate":
        return cls.from_dict(json.loads(text))


# ---- barrier machinery -------------------------------------------------------
#
# Every constraint block is an affine symmetric matrix G(v) = G0 + Σ vᵢ·Gᵢ that
# must stay positive definite; v packs the upper triangle of P then Y.


def _p_basis():
    out = np.zeros((N_P, N, N))
    for k, (i, j) in enumerate(zip(*_TRIU)):
        out[k, i, j] = out[k, j, i] = 1.0
    return out


def _unpack(v):
    p = np.zeros((N, N))
    p[_TRIU] = v[:N_P]
    p = p + np.triu(p, 1).T
    return p, v[N_P:].copy()


def _pack(p, y):
    return np.concatenate([np.asarray(p)[_TRIU], _y_vec(y)])


class _Blocks:
    def __init__(self, matrices, config, delta, p_lo):
        self.const = []
        self.lin = []
        eb = _p_basis()

        def w_of(p, y, affine_part):
            # linear part of −W̃ (without the constant terms) when affine_part is False
            cfg = config if affine_part else _LinearOnly(config)
            return -assemble_w_tilde(p, y, matrices, cfg)

        w0 = w_of(np.zeros((N, N)), np.zeros(N), True) - delta * np.eye(2 * N)
        wl = []
        for k in range(N_P):
            wl.append(w_of(eb[k], np.zeros(N), False))
        for k in range(N):
            y = np.zeros(N)
            y[k] = 1.0
            wl.append(w_of(np.zeros((N, N)), y, False))
        self.const.append(w0)
        self.lin.append(np.array(wl))

        pl = [eb[k] for k in range(N_P)] + [np.zeros((N, N))] * N
        weights = np.ones(N) if config.floor_weights is None else np.asarray(config.floor_weights)
        self.const.append(-p_lo * np.diag(weights))
        self.lin.append(np.array(pl))

        if config.gain_bound is not None:
            r = config.gain_bound * p_lo
            g0 = r * np.eye(N + 1)
            gl = [np.zeros((N + 1, N + 1)) for _ in range(N_P)]
            for k in range(N):
                e = np.zeros((N + 1, N + 1))
                e[k, N] = e[N, k] = 1.0
                gl.append(e)
            self.const.append(g0)
            self.lin.append(np.array(gl))

    def mats(self, v, s=0.0):
        return [g0 + np.tensordot(v, gl, axes=1) + s * np.eye(g0.shape[0]) for g0, gl in zip(self.const, self.lin)]

    @property
    def barrier_dim(self):
        return sum(g.shape[0] for g in self.const)


class _LinearOnly:
    """Config view that drops the constant εL_φ²I and −εI terms."""

    def __init__(self, config):
        self.alpha = config.alpha
        self.eps = 0.0
        self.l_phi = 0.0


def _chol_ok(mats):
    try:
        for m in mats:
            np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return False
    return True


def _barrier_terms(blocks, v, s=None):
    """Value, gradient and Hessian of −Σ log det G over (v[, s])."""
    mats = blocks.mats(v, 0.0 if s is None else s)
    n = v.size + (0 if s is None else 1)
    val, grad, hess = 0.0, np.zeros(n), np.zeros((n, n))
    for g, gl in zip(mats, blocks.lin):
        chol = np.linalg.cholesky(g)
        val -= 2.0 * float(np.sum(np.log(np.diag(chol))))
        ginv = np.linalg.inv(g)
        fs = gl if s is None else np.concatenate([gl, np.eye(g.shape[0])[None]], axis=0)
        m = np.einsum("ab,kbc->kac", ginv, fs)
        grad -= np.einsum("kaa->k", m)
        hess += np.einsum("iab,jba->ij", m, m)
    return val, grad, hess


def _newton(obj_grad, blocks, x, t, split, max_iter=100, tol=1e-10):
    """Minimize t·(cᵀx) + barrier by damped Newton with a feasibility line search.

    ``split`` is None for the main problem or marks that the last entry of x
    is the Phase-I slack.
    """

    def parts(x):
        return (x, None) if split is None else (x[:-1], x[-1])

    def value(x):
        v, s = parts(x)
        mats = blocks.mats(v, 0.0 if s is None else s)
        if not _chol_ok(mats):
            return math.inf
        b = -sum(2.0 * float(np.sum(np.log(np.diag(np.linalg.cholesky(m))))) for m in mats)
        return t * float(obj_grad @ x) + b

    for _ in range(max_iter):
        v, s = parts(x)
        _, g, h = _barrier_terms(blocks, v, s)
        g = t * obj_grad + g
        try:
            dx = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            dx = -np.linalg.lstsq(h, g, rcond=None)[0]
        dec2 = float(-g @ dx)
        if dec2 / 2.0 <= tol:
            break
        f0 = value(x)
        step = 1.0
        while step > 1e-12:
            fn = value(x + step * dx)
            if fn <= f0 - 0.25 * step * dec2:
                break
            step *= 0.5
        else:
            break
        x = x + step * dx
    return x


def _phase_one(blocks, v0):
    """Find v with every block positive definite, via a slack barrier problem.

    Minimizes s subject to G(v) + s·I ≻ 0; any iterate with s < 0 is strictly
    feasible for the original blocks.
    """
    mats = blocks.mats(v0)
    worst = min(float(np.linalg.eigvalsh(m)[0]) for m in mats)
    s0 = max(0.0, -worst) + 1.0
    x = np.concatenate([v0, [s0]])
    c = np.zeros(x.size)
    c[-1] = 1.0
    t = 1.0
    for _ in range(40):
        x = _newton(c, blocks, x, t, split=True)
        if x[-1] < 0:
            return x[:-1], float(x[-1])
        t *= 5.0
    return x[:-1], float(x[-1])


def synthesize_gain(matrices: SystemMatrices, config: SynthesisConfig, seed=None) -> LmiCertificate:
    """Solve for (P, Y) minimizing tr(P) under W̃ ≺ −δI and P ≻ max(δ, floor)·I.

    ``seed`` randomizes the Phase-I starting point (used for restart checks).
    Raises :class:`InfeasibleError` when no strictly feasible point is found.
    """
    if not is_observable(matrices):
        raise ObservabilityError("(A, C) is not observable")
    delta = config.margin(matrices)
    p_lo = max(delta, config.floor)
    blocks = _Blocks(matrices, config, delta, p_lo)

    p_init = 2.0 * max(p_lo, 1e-6) * np.eye(N)
    y_init = np.zeros(N)
    if seed is not None:
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((N, N))
        p_init = p_init + max(p_lo, 1e-6) * (g @ g.T) / N
        r = (config.gain_bound or 1.0) * p_lo
        y_init = 0.2 * r * rng.standard_normal(N) / math.sqrt(N)
    v, slack = _phase_one(blocks, _pack(p_init, y_init))
    if slack >= 0:
        p, y = _unpack(v)
        report = check_feasible(p, y, matrices, config)
        raise InfeasibleError("matrix inequality has no strictly feasible point", report.lambda_max_w)

    obj = np.zeros(N_VARS)
    obj[[k for k, (i, j) in enumerate(zip(*_TRIU)) if i == j]] = 1.0
    scale = float(obj @ v)  # normalize so that η is relative to the starting trace
    obj_n = obj / scale

    best = (p_lo, v)
    eta = 1.0
    while eta >= 1e-9 * (1 - 1e-12):
        v = _newton(obj_n, blocks, v, 1.0 / eta, split=None)
        p, y = _unpack(v)
        if check_feasible(p, y, matrices, config).feasible:
            best = (eta, v.copy())
        eta *= 0.2
    v = best[1]
    p, y = _unpack(v)
    report = check_feasible(p, y, matrices, config)
    if not report.feasible:
        raise InfeasibleError("no iterate passed the feasibility check", report.lambda_max_w)
    l = np.linalg.solve(p, y)
    c = compute_c(config)
    trace_attr = (config.alpha / c) * float(np.trace(p)) if c > 0 else math.inf
    return LmiCertificate(
        p=p,
        y=y,
        l=l,
        lambda_max_w=report.lambda_max_w,
        lambda_min_p=report.lambda_min_p,
        trace_p_attr=trace_attr,
        c=c,
        alpha=config.alpha,
        eps=config.eps,
        mu=config.mu,
        extra={"delta": delta, "barrier_dim": blocks.barrier_dim},
    )
