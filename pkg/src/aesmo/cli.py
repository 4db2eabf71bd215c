"""Command-line entry point: ``aesmo <subcommand> ...``.

Exit codes: 0 success, 2 validation or I/O error, 3 infeasible LMI.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from .ecm import CellParams, OcvPolynomial, build_matrices, secant_alpha1
from .errors import AesmoError, InfeasibleError, ValidationError
from .harness import (
    DisturbanceSpec,
    Telemetry,
    add_noise,
    compare,
    generate_dynamic_cycle,
    generate_hppc_eval,
    load_telemetry,
    monte_carlo_rint,
    run_estimation,
    save_telemetry,
    simulate_truth,
)
from .ident import IdentResult, fit_ocv_polynomial, identify, ocv_fit_residual
from .lmi import LmiCertificate, SynthesisConfig, synthesize_gain
from .observer import AesmoGains, UkfConfig
from .reference import Q_TOTAL, default_ocv, nominal_params

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _finite_or_none(x):
    return float(x) if math.isfinite(x) else None


def _load_params(path, soc, q_total) -> CellParams:
    if path is None:
        return nominal_params()
    data = _read_json(path)
    if isinstance(data, list):
        if not data:
            raise ValidationError(f"{path}: empty identification result")
        return IdentResult.from_json(json.dumps(data), q_total).nearest(soc).params
    if isinstance(data, dict):
        try:
            return CellParams.from_dict(data)
        except KeyError as exc:
            raise ValidationError(f"{path}: missing field {exc}") from None
    raise ValidationError(f"{path}: expected an object or a list")


def _load_ocv(path) -> OcvPolynomial:
    if path is None:
        return default_ocv()
    data = _read_json(path)
    coeffs = data.get("coeffs") if isinstance(data, dict) else data
    if not isinstance(coeffs, list):
        raise ValidationError(f"{path}: expected a coefficient list")
    return OcvPolynomial(coeffs)


def _load_gains(path, observer):
    if path is None:
        return None
    data = _read_json(path)
    if observer == "ukf":
        if not isinstance(data, dict):
            raise ValidationError("UKF config must be a JSON object")
        return UkfConfig(
            np.array(data["p0"], dtype=float),
            np.array(data["q_proc"], dtype=float),
            float(data.get("r_meas", 1e-4)),
        )
    if isinstance(data, list):
        l = np.array(data, dtype=float)
        return l if observer == "luenberger" else AesmoGains.luenberger(l)
    if "p" in data:
        cert = LmiCertificate.from_dict(data)
        return cert.l if observer == "luenberger" else cert
    l = np.array(data["l"], dtype=float)
    if observer == "luenberger":
        return l
    return AesmoGains(l, np.array(data.get("ls", np.zeros(4)), dtype=float), float(data.get("mu", 0.0)))


# ---- subcommands ---------------------------------------------------------------


def cmd_identify(args):
    tel = load_telemetry(args.input)
    result = identify(tel.t, tel.current, tel.voltage, args.q_total, z0=args.z0)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(result.to_json() + "\n")
    print(f"identified {len(result.rows)} pulse(s)")


def _read_ocv_csv(path):
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().strip().lstrip("﻿")
        if [h.strip() for h in head.split(",")] != ["soc", "ocv_v"]:
            raise ValidationError(f"{path}: expected header soc,ocv_v")
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    if data.shape[1] != 2:
        raise ValidationError(f"{path}: expected two columns")
    return data[:, 0], data[:, 1]


def cmd_fit_ocv(args):
    soc, ocv = _read_ocv_csv(args.input)
    poly = fit_ocv_polynomial(soc, ocv, args.degree)
    rms = ocv_fit_residual(poly, soc, ocv)
    _write_json(args.out, {"coeffs": [float(c) for c in poly.coeffs], "degree": args.degree, "rms_residual_v": rms})
    print(f"rms residual {rms:.3e} V")


def cmd_synthesize(args):
    params = _load_params(args.params, args.soc, args.q_total)
    poly = _load_ocv(args.ocv)
    config = SynthesisConfig(
        alpha=args.alpha,
        eps=args.eps,
        mu=args.mu,
        l_phi=args.lphi,
        gamma=args.gamma,
        x_plus=args.xplus,
        d_plus=args.dplus,
        p_floor=args.p_floor,
        gain_bound=args.gain_bound,
        floor_weights=args.floor_weights,
    )
    cert = synthesize_gain(build_matrices(params, secant_alpha1(poly)), config, seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(cert.to_json() + "\n")
    print(f"lambda_max(W) = {cert.lambda_max_w:.6e}")
    print(f"trace(P_attr) = {cert.trace_p_attr:.6e}")
    print("L = [" + ", ".join(f"{v:.6g}" for v in cert.l) + "]")


def cmd_simulate(args):
    if args.cycle == "hppc":
        _, current = generate_hppc_eval(args.q_total)
    else:
        _, current = generate_dynamic_cycle(seed=args.seed, duration=args.duration)
    tel = simulate_truth(current, z0=args.z0, disturbance=DisturbanceSpec.parse(args.disturbance))
    if args.noise:
        tel = add_noise(tel, args.current_noise, args.voltage_noise, seed=args.seed)
    save_telemetry(args.out, tel)
    print(f"wrote {len(tel)} samples")


def cmd_estimate(args):
    tel = load_telemetry(args.input)
    params = _load_params(args.params, 0.1, args.q_total)
    est, report = run_estimation(
        tel,
        args.observer,
        _load_gains(args.gain, args.observer),
        args.z0,
        params,
        _load_ocv(args.ocv),
        args.q_total,
        jump=not args.no_jump,
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            np.savetxt(fh, np.column_stack([tel.t, est]), fmt="%.17g", delimiter=",", header="t_s,soc_est", comments="")
    if args.report:
        _write_json(args.report, report.to_dict())
    print(json.dumps(report.to_dict()))


def cmd_monte_carlo(args):
    reports = monte_carlo_rint(pct=args.pct, trials=args.trials, seed=args.seed, z0_guess=args.z0)
    worst = max(r.settled_max_err for r in reports)
    summary = {
        "pct": args.pct,
        "trials": args.trials,
        "seed": args.seed,
        "worst_settled_err": _finite_or_none(worst),
        "reports": [r.to_dict() for r in reports],
    }
    if args.report:
        _write_json(args.report, summary)
    print(f"worst settled |error| over {args.trials} trials: {worst:.4f}")


def cmd_compare(args):
    tel: Telemetry = load_telemetry(args.input)
    out = compare(tel, z0_guess=args.z0, q_total=args.q_total)
    doc = {
        "t_s": out["t"].tolist(),
        "true_soc": np.asarray(out["true_soc"]).tolist(),
        "series": {k: [_finite_or_none(v) for v in out[k]] for k in ("aesmo", "luenberger", "ukf")},
        "reports": {k: r.to_dict() for k, r in out["reports"].items()},
    }
    if args.report:
        _write_json(args.report, doc)
    for name, rep in out["reports"].items():
        print(f"{name:10s} iae={rep.iae:.4g} t2%={rep.time_to_2pct:.0f} settled={rep.settled_max_err:.4f}")


# ---- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aesmo", description="SoC estimation with an attractive-ellipsoid sliding-mode observer")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--q-total", type=float, default=Q_TOTAL, help="capacity in coulombs")
        return p

    p = cmd("identify", cmd_identify, "fit ECM parameters from pulse telemetry")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--z0", type=float, default=1.0)

    p = cmd("fit-ocv", cmd_fit_ocv, "fit an OCV polynomial to soc,ocv_v samples")
    p.add_argument("--input", required=True)
    p.add_argument("--degree", type=int, default=9)
    p.add_argument("--out", required=True)

    p = cmd("synthesize", cmd_synthesize, "solve the observer LMI for a gain")
    p.add_argument("--params", help="CellParams JSON or identification result (default: nominal cell)")
    p.add_argument("--soc", type=float, default=0.1, help="row to pick from an identification result")
    p.add_argument("--ocv", help="OCV coefficient JSON")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--mu", type=float, default=1e-10)
    p.add_argument("--lphi", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--xplus", type=float, default=5.0)
    p.add_argument("--dplus", type=float, default=0.0)
    p.add_argument("--p-floor", type=float, default=None)
    p.add_argument("--gain-bound", type=float, default=1.0)
    p.add_argument("--floor-weights", type=float, nargs=4, default=None, metavar="W")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = cmd("simulate", cmd_simulate, "simulate a truth record")
    p.add_argument("--cycle", choices=("hppc", "dynamic"), default="hppc")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=5000.0)
    p.add_argument("--z0", type=float, default=1.0)
    p.add_argument("--disturbance", default="none", help="none | sinusoid:AMP[@HZ] | gaussian:AMP[:SEED]")
    p.add_argument("--noise", action="store_true", help="add sensor noise")
    p.add_argument("--current-noise", type=float, default=5.0)
    p.add_argument("--voltage-noise", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = cmd("estimate", cmd_estimate, "run one estimator over a telemetry CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--observer", choices=("aesmo", "luenberger", "ukf"), default="aesmo")
    p.add_argument("--gain", help="certificate, gain or UKF config JSON")
    p.add_argument("--params", help="observer model parameters JSON")
    p.add_argument("--ocv", help="OCV coefficient JSON")
    p.add_argument("--z0", type=float, default=0.6)
    p.add_argument("--no-jump", action="store_true", help="do not shift the voltage estimate on current steps")
    p.add_argument("--out")
    p.add_argument("--report")

    p = cmd("monte-carlo", cmd_monte_carlo, "internal-resistance Monte-Carlo study")
    p.add_argument("--pct", type=float, default=20.0)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--z0", type=float, default=0.6)
    p.add_argument("--report")

    p = cmd("compare", cmd_compare, "run all three estimators side by side")
    p.add_argument("--input", required=True)
    p.add_argument("--z0", type=float, default=0.6)
    p.add_argument("--report")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (AesmoError, OSError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
