"""Command line entry point.

    vdpbc run <scenario> [--dt DT] [--t-end T] [--out DIR] [--seed N]
    vdpbc verify [--model table1|two-link] [--fault gyroscopic-sign]
    vdpbc sweep --param NAME --values V1,V2,... <scenario>

Exit codes: 0 success, 1 validation error, 2 divergence, 3 failed
certificate or controller synthesis.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .control import derive_beta
from .exceptions import CertificateError, DivergenceError, DomainError, SynthesisError
from .scenario import Scenario, ScenarioError, load_scenario
from .sim import simulate_closed_loop
from .verify import FAULTS, run_suite

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_CERTIFICATE = 0, 1, 2, 3

CSV_HEADER = "t,q_l,q_m,p_l,p_m,u,u_ff,u_fb,err_q_l,err_q_m,sigma_l,sigma_m,H,V,dVdt".split(",")
SWEEP_HEADER = ["value", "beta", "beta_hat", "transient_time", "peak_u", "status"]


def _fmt(x):
    return repr(float(x))


def _apply_flags(sc: Scenario, args) -> Scenario:
    overrides = {}
    if getattr(args, "dt", None) is not None:
        overrides["integrator.dt"] = args.dt
    if getattr(args, "t_end", None) is not None:
        overrides["integrator.t_end"] = args.t_end
    if getattr(args, "out", None) is not None:
        overrides["output.dir"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return sc.with_overrides(overrides) if overrides else sc


def execute(sc: Scenario):
    """Simulate a scenario; returns (record, summary dict)."""
    model = sc.build_model()
    cfg = sc.build_controller()
    traj = sc.build_trajectory()
    integ = sc.build_integrator()
    rec = simulate_closed_loop(model, cfg, traj, integ, sc.initial_state(model, cfg, traj))
    summary = rec.summary()
    bound = derive_beta(cfg, model)
    summary.update(
        scenario=sc.name,
        seed=sc.seed,
        beta_l=bound.beta_l,
        beta_m=bound.beta_m,
        beta_blockwise=bound.blockwise,
        dt=integ.dt,
        t_end=integ.t_end,
    )
    return rec, summary


def write_csv(path: Path, rec):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row in rec.rows():
            w.writerow([_fmt(v) for v in row])


def write_summary(path: Path, summary: dict):
    with open(path, "w") as fh:
        for k, v in summary.items():
            fh.write(f"{k}: {v}\n")


def cmd_run(args) -> int:
    sc = _apply_flags(load_scenario(args.scenario), args)
    rec, summary = execute(sc)
    out = Path(sc.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / (sc.output.csv or f"{sc.name}.csv")
    summary_path = out / (sc.output.summary or f"{sc.name}_summary.txt")
    write_csv(csv_path, rec)
    write_summary(summary_path, summary)
    print(f"{sc.name}: transient {summary['transient_time']:.4g} s, peak |u| {summary['peak_u']:.4g}, "
          f"beta {summary['beta']:.4g}, beta_hat {summary['beta_hat']:.4g}")
    print(f"wrote {csv_path} and {summary_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    kwargs = {"model": args.model, "fault": args.fault, "seed": args.seed or 0}
    if args.dt is not None:
        kwargs["dt"] = args.dt
    if args.t_end is not None:
        kwargs["t_end"] = args.t_end
    report = run_suite(**kwargs)
    print(report.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"verify_{args.model}.json").write_text(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK if report.passed else EXIT_CERTIFICATE


def _resolve_param(name: str) -> str:
    if "." in name or name in Scenario.model_fields:
        return name
    hits = [f"{sec}.{name}" for sec, f in Scenario.model_fields.items()
            if hasattr(f.annotation, "model_fields") and name in f.annotation.model_fields]
    if len(hits) != 1:
        raise ScenarioError(f"unknown sweep parameter {name!r}")
    return hits[0]


def _sweep_one(sc: Scenario, key: str, value: str):
    try:
        run = sc.with_overrides({key: value})
        _, s = execute(run)
        return [value, _fmt(s["beta"]), _fmt(s["beta_hat"]), _fmt(s["transient_time"]), _fmt(s["peak_u"]), "ok"], EXIT_OK
    except DivergenceError as exc:
        return [value, "", "", "", "", f"diverged at t={exc.time:.6g}"], EXIT_DIVERGENCE
    except (SynthesisError, CertificateError) as exc:
        return [value, "", "", "", "", f"synthesis: {exc}"], EXIT_CERTIFICATE
    except DomainError as exc:
        return [value, "", "", "", "", f"invalid: {exc}"], EXIT_VALIDATION


def cmd_sweep(args) -> int:
    sc = _apply_flags(load_scenario(args.scenario), args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ScenarioError("--values: empty value list")
    key = _resolve_param(args.param)
    with ThreadPoolExecutor() as pool:
        results = list(pool.map(lambda v: _sweep_one(sc, key, v), values))
    out = Path(sc.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{sc.name}_sweep_{key.split('.')[-1]}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for row, _ in results:
            w.writerow(row)
            print(",".join(row))
    print(f"wrote {path}")
    codes = [code for _, code in results]
    if all(c != EXIT_OK for c in codes):
        return codes[0]
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vdpbc", description="Flexible-joint tracking simulator and verifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--dt", type=float, help="integration step [s]")
        p.add_argument("--t-end", type=float, dest="t_end", help="horizon [s]")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="random seed")

    p = sub.add_parser("run", help="simulate a scenario and write CSV + summary")
    p.add_argument("scenario", help="scenario file or bundled name (table1_k31, table1_k3p1)")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="run the numerical certificate suite")
    p.add_argument("--model", choices=["table1", "two-link"], default="table1")
    p.add_argument("--fault", choices=sorted(FAULTS), help="inject a deliberate model fault")
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="run a scenario over a list of parameter values")
    p.add_argument("--param", required=True, help="scenario key, dotted or bare (e.g. stiffness)")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("scenario")
    common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (SynthesisError, CertificateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
