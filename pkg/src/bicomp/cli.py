"""Command-line front end: run, sweep, constants, report.

Exit codes: 0 success, 1 configuration error, 2 divergence.  Plot
rendering is out of scope; `report` emits a tidy long-format CSV for any
plotting tool.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import engine, problems, theory
from .algorithms import ALGORITHMS  # noqa: F401  (documented interface)
from .compressors import alpha_of, omega_of
from .engine import ConfigError, load_config, merge_reports, resolve


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if obj == math.inf:
        return "inf"
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _dump(obj, stream=None):
    stream = sys.stdout if stream is None else stream
    json.dump(obj, stream, indent=2, default=_json_default, allow_nan=True)
    stream.write("\n")


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config["seed"] = args.seed
        rc = resolve(config)
        result = engine.run(rc, threads=args.threads)
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = args.out or "metrics.csv"
    result.write_csv(out)
    _dump(result.summary)
    if result.status == "diverged":
        print(f"run diverged at round {result.summary['rounds']}", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(args) -> int:
    try:
        config = load_config(args.config)
        rc = resolve(config)
        gammas = [2.0**i for i in range(args.grid_min, args.grid_max + 1)]
        report = engine.sweep(rc, gammas, threads=args.threads, target=args.target)
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            _dump(report, fh)
    _dump(report)
    return 0


def cmd_constants(args) -> int:
    try:
        config = load_config(args.config)
        rc = resolve(config)
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    problem = rc.problem
    consts = problem.constants
    alpha = alpha_of(rc.primal_spec)
    omega = omega_of(rc.dual_spec)
    theory_cfg = config.get("theory", {})
    eps = theory_cfg.get("eps", rc.stop_eps if rc.stop_mode == 1 else None)
    sigma_sq = theory_cfg.get("sigma_sq", 0.0)
    D = theory_cfg.get("D")

    ref = rc.reference
    delta0 = delta_star = None
    mean_sq_grad_opt = None
    if ref is not None and ref.usable:
        f0 = problem.value(rc.x0)
        delta0 = f0 - ref.f_star
        fmins = problems.worker_min_values(problem)
        delta_star = ref.f_star - float(np.mean(fmins))
        mean_sq_grad_opt = ref.mean_sq_grad_at_opt
    elif problem.reg_lambda > 0:
        f0 = problem.value(rc.x0)
        delta0 = f0  # f >= 0: upper bound on f(x0) - f*
        delta_star = f0

    ti = theory.TheoryInputs(
        n=problem.n_workers, omega=omega, alpha=alpha,
        L=consts.L, L_max=consts.L_max, L_hat=consts.L_hat, mu=consts.mu,
        sigma_sq=sigma_sq, delta0=delta0, delta_star=delta_star, D=D, eps=eps,
    )
    report = {
        "inputs": {
            "n": ti.n, "omega": omega, "alpha": alpha,
            "L": consts.L, "L_max": consts.L_max, "L_hat": consts.L_hat,
            "mu": consts.mu, "sigma_sq": sigma_sq,
            "delta0": delta0, "delta_star": delta_star, "D": D, "eps": eps,
            "constants_are_upper_bounds": dict(consts.is_upper_bound),
        },
        "beta": theory.beta_shift(omega),
        "gamma_bounds": {
            "gd": theory.stepsize_gd(ti).__dict__,
            "ef21p_strongly_convex": theory.stepsize_ef21p_strong(ti).__dict__,
            "shift_strongly_convex": theory.stepsize_diana_strong(ti).__dict__,
            "zero_shift_strongly_convex": theory.stepsize_dcgd_strong(ti).__dict__,
            "convex_general": theory.stepsize_convex_general(ti).__dict__,
        },
        "lemma_audit": theory.lemma1_audit(consts, problem.n_workers),
        "kappa_nu": theory.kappa_nu_bounds(
            rc.gamma, theory.beta_shift(omega), omega, ti.n, alpha, consts.L, consts.L_hat
        ),
        "gamma_resolved": rc.gamma,
    }
    if mean_sq_grad_opt is not None and consts.mu > 0:
        report["zero_shift_neighborhood"] = theory.dcgd_strong_neighborhood(ti, mean_sq_grad_opt)
    if eps is not None and delta0 is not None and delta_star is not None:
        abc_table = {}
        for case in theory.ABC_CASES:
            try:
                abc = theory.abc_constants(case, ti)
            except ValueError:
                continue
            T, T_real, t_terms = theory.horizon_abc(ti, abc)
            gamma = theory.stepsize_abc(ti, abc, T=T)
            abc_table[case] = {
                "A": abc.A, "B": abc.B, "C": abc.C,
                "T": T, "T_bound": T_real, "T_terms": t_terms,
                "gamma": gamma.value, "gamma_terms": gamma.terms,
            }
        report["abc"] = abc_table
    _dump(report)
    return 0


def cmd_report(args) -> int:
    try:
        texts = []
        for path in args.inputs:
            with open(path, "r", encoding="utf-8") as fh:
                texts.append(fh.read())
        labels = args.labels or [os.path.splitext(os.path.basename(p))[0] for p in args.inputs]
        if len(labels) != len(texts):
            raise ValueError("labels must match inputs")
        merged = merge_reports(texts, labels, x_axis=args.x)
    except (ValueError, OSError) as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(merged)
    else:
        sys.stdout.write(merged)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bicomp",
        description="bidirectionally compressed distributed optimization, desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None, help="metrics CSV path (default metrics.csv)")
    p_run.add_argument("--threads", type=int, default=None,
                       help="worker pool size (default BICOMP_THREADS or 1)")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="stepsize grid sweep")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--grid-min", type=int, default=-10)
    p_sweep.add_argument("--grid-max", type=int, default=10)
    p_sweep.add_argument("--target", default="final_f",
                         choices=("final_f", "coords_to_stop"))
    p_sweep.add_argument("--threads", type=int, default=None)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_const = sub.add_parser("constants", help="print rate bounds and audits as JSON")
    p_const.add_argument("--config", required=True)
    p_const.set_defaults(func=cmd_constants)

    p_rep = sub.add_parser("report", help="merge metric CSVs into long format")
    p_rep.add_argument("--inputs", nargs="+", required=True)
    p_rep.add_argument("--labels", nargs="*", default=None)
    p_rep.add_argument("--x", default="round", choices=("round", "total_coords", "downlink"))
    p_rep.add_argument("--out", default=None)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
