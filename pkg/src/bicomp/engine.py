"""Synchronous multi-round simulation driver.

One resolved configuration runs through either of two equivalent paths:

* the fused kernel loop (default, single-threaded, numba-compiled), or
* a per-round loop whose worker tasks go through a thread pool
  (``threads > 1`` or the ``BICOMP_THREADS`` env var).

Both paths call the same kernels in the same order with a fixed-order
server reduction, so metric streams are byte-identical for every pool
size.  Communication is counted in coordinates: a sparse message of k
stored entries costs k, a broadcast is counted once per round by default
(``downlink_times_n`` counts it per worker).
"""

import concurrent.futures
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import algorithms, compressors, kernels, problems, theory
from .compressors import CompressorSpec, alpha_of, omega_of, spec_from_config
from .dataio import parse_libsvm, partition, synthetic_logreg_dataset
from .kernels import K_IDENTITY, S_DIVERGED, S_RAN, S_STOPPED
from .problems import ProblemOracle, compute_opt_reference

CSV_HEADER = "round,f,grad_norm_sq,dist_sq,lyapunov,w_drift,uplink_cum,downlink_cum"

SHIFT_ALGOS = ("diana", "ef21p_diana")
DUAL_ALGOS = ("dcgd", "diana", "ef21p_dcgd", "ef21p_diana")
PRIMAL_ALGOS = ("ef21p", "ef21p_dcgd", "ef21p_diana")


class ConfigError(ValueError):
    pass


@dataclass
class RoundMetrics:
    round: int
    f: float
    grad_norm_sq: float
    dist_sq: Optional[float]
    lyapunov: Optional[float]
    w_drift: float
    uplink_cum: int
    downlink_cum: int

    def csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return ",".join(
            [
                str(self.round), fmt(self.f), fmt(self.grad_norm_sq), fmt(self.dist_sq),
                fmt(self.lyapunov), fmt(self.w_drift),
                str(self.uplink_cum), str(self.downlink_cum),
            ]
        )


@dataclass
class RunResult:
    status: str  # ok | stopped | diverged
    rows: List[RoundMetrics]
    summary: dict
    state: dict

    def to_csv(self) -> str:
        return "\n".join([CSV_HEADER] + [r.csv_row() for r in self.rows]) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)


@dataclass
class ResolvedRun:
    problem: ProblemOracle
    algo: str
    dual_spec: CompressorSpec
    primal_spec: CompressorSpec
    gamma: float
    beta: float
    use_shifts: bool
    h_init: str
    batch_size: int
    seed: int
    rounds: int
    stop_mode: int  # 0 none, 1 grad_norm_sq, 2 suboptimality
    stop_eps: float
    metric_stride: int
    downlink_times_n: bool
    x0: np.ndarray
    reference: Optional[problems.OptReference]
    theory_caps: dict = field(default_factory=dict)
    label: str = "run"


def _build_problem(cfg: dict) -> ProblemOracle:
    kind = cfg.get("kind")
    if kind == "quadratic":
        return problems.make_quadratic_ensemble(
            dim=int(cfg["dim"]), n_workers=int(cfg["n_workers"]),
            seed=int(cfg.get("seed", 0)), style=cfg.get("style", "spread"),
            mu=float(cfg.get("mu", 0.5)), L=float(cfg.get("L", 2.0)),
            hetero=float(cfg.get("hetero", 1.0)),
            interpolation=bool(cfg.get("interpolation", False)),
            noise_sigma=float(cfg.get("noise_sigma", 0.0)),
        )
    if kind == "logreg":
        ds_cfg = cfg.get("dataset")
        if isinstance(ds_cfg, dict) and "synthetic" in ds_cfg:
            syn = ds_cfg["synthetic"]
            dataset = synthetic_logreg_dataset(
                n_samples=int(syn["n_samples"]), d_features=int(syn["d_features"]),
                n_classes=int(syn["classes"]), seed=int(syn.get("seed", 0)),
                separation=float(syn.get("separation", 1.0)),
                label_noise=float(syn.get("label_noise", 0.0)),
            )
        elif isinstance(ds_cfg, (str, os.PathLike)):
            dataset = parse_libsvm(ds_cfg)
        else:
            raise ConfigError("problem.dataset must be a path or {'synthetic': {...}}")
        part_cfg = cfg.get("partition", {"strategy": "contiguous", "seed": 0})
        part = partition(
            dataset, int(cfg["n_workers"]), part_cfg.get("strategy", "contiguous"),
            int(part_cfg.get("seed", 0)),
        )
        reg = cfg.get("regularizer")
        lam = float(reg["lambda"]) if reg else 0.0
        return problems.logreg_problem(
            dataset, part, n_classes=cfg.get("classes"), reg_lambda=lam,
            d_features=cfg.get("d_features_override"),
        )
    raise ConfigError(f"unknown problem kind {kind!r}")


def _resolve_theory_gamma(
    algo: str, problem: ProblemOracle, dual_spec, primal_spec,
    eps: Optional[float], rounds: Optional[int], x0: np.ndarray,
):
    """Map (algorithm, problem class) to its closed-form stepsize bound.

    Returns (gamma, rounds_or_None, caps_dict).  Nonconvex problems use the
    stationarity-budget pair and require a grad_norm_sq stop target.
    """
    consts = problem.constants
    alpha = alpha_of(primal_spec)
    omega = omega_of(dual_spec)
    nonconvex = problem.reg_lambda > 0
    if nonconvex:
        if algo in SHIFT_ALGOS:
            raise ConfigError(
                "no closed-form stepsize for shifted estimators on nonconvex problems; "
                "set algo.gamma numerically"
            )
        if eps is None:
            raise ConfigError("gamma='theory' on a nonconvex problem needs a grad_norm_sq stop")
        f0 = problem.value(x0)
        # f >= 0 for cross-entropy plus penalty: f(x0) upper-bounds both
        # delta0 = f(x0) - f* and delta* = f* - mean_i f_i*
        ti = theory.TheoryInputs(
            n=problem.n_workers, omega=omega, alpha=alpha,
            L=consts.L, L_max=consts.L_max, L_hat=consts.L_hat, mu=0.0,
            delta0=f0, delta_star=f0, eps=eps,
        )
        if algo in ("dcgd", "ef21p_dcgd"):
            bound, T, _, t_terms = theory.rate_dcgd_nonconvex(ti)
            caps = {"family": "nonconvex_zero_shift", "terms": bound.terms,
                    "T": T, "T_terms": t_terms, "delta0_bound": f0}
            return bound.value, T, caps
        abc = theory.ABCConstants(A=0.0, B=1.0, C=0.0, case="full_grad")
        T, _, _ = theory.horizon_abc(ti, abc)
        bound = theory.stepsize_abc(ti, abc, T=T)
        caps = {"family": "nonconvex_uncompressed", "terms": bound.terms, "T": T}
        return bound.value, T, caps
    ti = theory.TheoryInputs(
        n=problem.n_workers, omega=omega, alpha=alpha,
        L=consts.L, L_max=consts.L_max, L_hat=consts.L_hat, mu=consts.mu,
    )
    if algo == "gd":
        bound, family = theory.stepsize_gd(ti), "gd"
    elif algo == "ef21p":
        bound, family = theory.stepsize_ef21p_strong(ti), "ef21p"
    elif algo in SHIFT_ALGOS:
        if consts.mu > 0:
            bound, family = theory.stepsize_diana_strong(ti), "shift_strongly_convex"
        else:
            bound, family = theory.stepsize_convex_general(ti, "diana"), "shift_convex"
    else:
        if consts.mu > 0:
            bound, family = theory.stepsize_dcgd_strong(ti), "zero_shift_strongly_convex"
        else:
            bound, family = theory.stepsize_convex_general(ti, "dcgd"), "zero_shift_convex"
    return bound.value, None, {"family": family, "terms": bound.terms}


def resolve(config: dict) -> ResolvedRun:
    """Validate a run config and construct problem, specs, and rates."""
    if "problem" not in config or "algo" not in config:
        raise ConfigError("config requires 'problem' and 'algo' sections")
    problem = _build_problem(config["problem"])
    algo_cfg = config["algo"]
    algo = algo_cfg.get("algo")
    if algo not in algorithms.ALGORITHMS:
        raise ConfigError(f"algo.algo must be one of {algorithms.ALGORITHMS}, got {algo!r}")

    comp_cfg = config.get("compressors", {})
    dim = problem.dim
    if algo in DUAL_ALGOS:
        if "dual" not in comp_cfg:
            raise ConfigError(f"{algo} requires compressors.dual")
        dual_spec = spec_from_config(comp_cfg["dual"], dim)
        if not dual_spec.is_unbiased():
            raise ConfigError(
                f"compressors.dual: {dual_spec.kind} is not unbiased; the dual slot of "
                f"{algo} requires the unbiased class (shifted estimators can diverge "
                "under contractive uplinks)"
            )
    else:
        dual_spec = algorithms.identity_spec(dim)
    if algo in PRIMAL_ALGOS:
        if "primal" not in comp_cfg:
            raise ConfigError(f"{algo} requires compressors.primal")
        primal_spec = spec_from_config(comp_cfg["primal"], dim)
        if not primal_spec.is_contractive():
            raise ConfigError(
                f"compressors.primal: {primal_spec.kind} is not contractive; the primal "
                f"slot of {algo} requires the contractive class"
            )
    else:
        primal_spec = algorithms.identity_spec(dim)

    seed = int(config.get("seed", 0))
    x0_cfg = config.get("x0")
    x0 = np.zeros(dim) if x0_cfg is None else np.asarray(x0_cfg, dtype=np.float64)
    if x0.shape != (dim,):
        raise ConfigError(f"x0 must have dimension {dim}")

    stop_cfg = config.get("stop")
    stop_mode, stop_eps = 0, 0.0
    if stop_cfg:
        metric = stop_cfg.get("metric", "grad_norm_sq")
        if metric == "grad_norm_sq":
            stop_mode = 1
        elif metric == "suboptimality":
            stop_mode = 2
        else:
            raise ConfigError(f"unknown stop metric {metric!r}")
        stop_eps = float(stop_cfg["eps"])

    batch_cfg = algo_cfg.get("batch_size", "full")
    if batch_cfg in ("full", None, 0):
        batch_size = 0
    else:
        batch_size = int(batch_cfg)
        if batch_size < 1 or batch_size > 2**32:
            raise ConfigError("algo.batch_size must be in [1, 2^32] or 'full'")

    omega = omega_of(dual_spec)
    beta_cfg = algo_cfg.get("beta", "theory")
    beta = theory.beta_shift(omega) if beta_cfg == "theory" else float(beta_cfg)
    if algo in SHIFT_ALGOS and not (0.0 <= beta <= 1.0):
        raise ConfigError("algo.beta must be in [0, 1]")

    rounds_cfg = config.get("rounds")
    eps_for_theory = stop_eps if stop_mode == 1 else None
    gamma_cfg = algo_cfg.get("gamma", "theory")
    theory_caps = {}
    if gamma_cfg == "theory":
        gamma, theory_rounds, theory_caps = _resolve_theory_gamma(
            algo, problem, dual_spec, primal_spec, eps_for_theory, rounds_cfg, x0
        )
        gamma *= float(algo_cfg.get("gamma_multiplier", 1.0))
        if rounds_cfg is None:
            rounds_cfg = theory_rounds
    else:
        gamma = float(gamma_cfg) * float(algo_cfg.get("gamma_multiplier", 1.0))
    if gamma <= 0 or not math.isfinite(gamma):
        raise ConfigError(f"resolved gamma must be positive and finite, got {gamma}")
    if rounds_cfg is None and stop_mode == 0:
        raise ConfigError("config needs 'rounds' or a stop rule")
    rounds = int(rounds_cfg) if rounds_cfg is not None else 10**7
    if rounds < 1 and stop_mode == 0:
        raise ConfigError("rounds must be >= 1")

    ref_cfg = config.get("reference", "auto")
    reference = None
    if ref_cfg == "auto":
        if problem.pkind == kernels.P_QUAD or problem.reg_lambda == 0.0:
            reference = compute_opt_reference(problem)
    elif ref_cfg:
        reference = compute_opt_reference(problem)
    if stop_mode == 2 and (reference is None or not reference.usable):
        raise ConfigError("suboptimality stop rule needs a usable optimum reference")

    stride_cfg = config.get("metric_stride")
    if stride_cfg is None:
        stride = 1 if rounds <= 10**4 else int(math.ceil(rounds / 10**4))
    else:
        stride = int(stride_cfg)
        if stride < 1:
            raise ConfigError("metric_stride must be >= 1")

    return ResolvedRun(
        problem=problem, algo=algo, dual_spec=dual_spec, primal_spec=primal_spec,
        gamma=gamma, beta=beta, use_shifts=algo in SHIFT_ALGOS,
        h_init=algo_cfg.get("h_init", "zero"), batch_size=batch_size,
        seed=seed, rounds=rounds, stop_mode=stop_mode, stop_eps=stop_eps,
        metric_stride=stride, downlink_times_n=bool(config.get("downlink_times_n", False)),
        x0=x0, reference=reference, theory_caps=theory_caps,
        label=str(config.get("label", "run")),
    )


def _threads_from_env(threads: Optional[int]) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("BICOMP_THREADS")
    return max(1, int(env)) if env else 1


def run(rc, threads: Optional[int] = None, seed: Optional[int] = None) -> RunResult:
    """Execute a run; accepts a config dict or a ResolvedRun.

    The metric stream gets a row for round 0, every metric_stride rounds,
    and the final round.  Identical (config, seed) produce byte-identical
    CSV for any thread count.
    """
    if isinstance(rc, dict):
        rc = resolve(rc)
    problem = rc.problem
    n, dim = problem.n_workers, problem.dim
    run_seed = rc.seed if seed is None else int(seed)

    state = algorithms.make_state(problem, rc.x0, rc.gamma, rc.beta, rc.h_init)
    x, w = state.x, state.w_server
    h, h_srv = state.h_workers, state.h_server
    shifts_on = bool(rc.use_shifts and not (rc.beta == 0.0 and not np.any(h)))

    grads = np.empty((n, dim))
    msgs = np.empty((n, dim))
    vtmp = np.empty((n, dim))
    widx = np.empty((n, dim), np.int64)
    wpool = np.empty((n, dim), np.int64)
    logits = np.empty((n, max(problem.ncls, 1)))
    gtmp = np.empty(dim)
    mtmp = np.empty(dim)
    dtmp = np.empty(dim)
    ptmp = np.empty(dim)
    gbar = np.empty(dim)
    sidx = np.empty(dim, np.int64)
    spool = np.empty(dim, np.int64)

    up_inc = n * rc.dual_spec.stored_coords
    down_inc = rc.primal_spec.stored_coords * (n if rc.downlink_times_n else 1)
    ref = rc.reference if (rc.reference is not None and rc.reference.usable) else None
    omega = omega_of(rc.dual_spec)
    f_star = ref.f_star if ref is not None else 0.0

    def metric_row(t: int) -> RoundMetrics:
        f = kernels.eval_mean_value_grad(*problem.kernel_args, x, gbar, gtmp, logits[0])
        gnsq = kernels.sq_norm(gbar)
        dist_sq = lyap = None
        if ref is not None:
            dist_sq = kernels.sq_dist(x, ref.x_star)
            subopt = f - ref.f_star
            if shifts_on:
                shift_sq = kernels.shift_error_sq_sum(h, ref.grad_at_opt)
                lyap = theory.lyapunov_diana(rc.gamma, omega, n, dist_sq, subopt, shift_sq)
            else:
                lyap = dist_sq / (2.0 * rc.gamma) + subopt
        return RoundMetrics(
            round=t, f=float(f), grad_norm_sq=float(gnsq),
            dist_sq=None if dist_sq is None else float(dist_sq),
            lyapunov=None if lyap is None else float(lyap),
            w_drift=float(kernels.sq_dist(w, x)),
            uplink_cum=t * up_inc, downlink_cum=t * down_inc,
        )

    row0 = metric_row(0)
    f_guard = 1e3 * abs(row0.f) + 1e3
    rows = [row0]
    min_gnsq_seen = row0.grad_norm_sq
    status = "ok"
    n_threads = _threads_from_env(threads)
    pool = (
        concurrent.futures.ThreadPoolExecutor(max_workers=min(n_threads, n))
        if n_threads > 1 else None
    )
    worker_tail = (
        h, shifts_on, rc.beta, rc.dual_spec.code, rc.dual_spec.k or 0,
        rc.dual_spec.c or 0.0,
    )

    def block_fused(t0: int, todo: int):
        return kernels.run_chunk(
            *problem.kernel_args, n, x, w, h, h_srv,
            shifts_on, rc.beta, rc.gamma,
            rc.dual_spec.code, rc.dual_spec.k or 0, rc.dual_spec.c or 0.0,
            rc.primal_spec.code, rc.primal_spec.k or 0, rc.primal_spec.c or 0.0,
            run_seed, t0, todo, rc.batch_size, problem.noise_sigma,
            rc.stop_mode, rc.stop_eps, f_guard, f_star,
            grads, msgs, vtmp, widx, wpool, logits,
            gtmp, mtmp, dtmp, ptmp, gbar, sidx, spool,
        )

    def block_pooled(t0: int, todo: int):
        min_g = np.inf
        t = t0
        args = problem.kernel_args
        for _ in range(todo):
            if rc.stop_mode > 0:
                fx = kernels.eval_mean_value_grad(*args, x, gbar, gtmp, logits[0])
                gnsq = kernels.sq_norm(gbar)
                if not np.isfinite(fx) or fx > f_guard:
                    return t, S_DIVERGED, min_g
                if gnsq < min_g:
                    min_g = gnsq
                if rc.stop_mode == 1 and gnsq <= rc.stop_eps:
                    return t, S_STOPPED, min_g
                if rc.stop_mode == 2 and fx - f_star <= rc.stop_eps:
                    return t, S_STOPPED, min_g
            futures = [
                pool.submit(
                    kernels.worker_one, *args, i, w, *worker_tail,
                    run_seed, t, rc.batch_size, problem.noise_sigma,
                    grads, msgs, vtmp, widx, wpool, logits,
                )
                for i in range(n)
            ]
            for fut in futures:
                fut.result()
            kernels.server_phase(
                n, grads, msgs, h_srv, x, w, rc.gamma, rc.beta,
                shifts_on, rc.dual_spec.code,
                rc.primal_spec.code, rc.primal_spec.k or 0, rc.primal_spec.c or 0.0,
                run_seed, t,
                gtmp, mtmp, dtmp, ptmp, sidx, spool,
            )
            t += 1
        return t, S_RAN, min_g

    block = block_pooled if pool is not None else block_fused
    t = 0
    try:
        while t < rc.rounds:
            todo = min(rc.metric_stride, rc.rounds - t)
            t_new, block_status, block_min = block(t, todo)
            if rc.stop_mode > 0 and block_min < min_gnsq_seen:
                min_gnsq_seen = block_min
            advanced = t_new > t
            t = t_new
            if advanced or block_status != S_RAN:
                row = metric_row(t)
                if advanced:
                    rows.append(row)
                if block_status == S_DIVERGED:
                    status = "diverged"
                    break
                if block_status == S_STOPPED:
                    status = "stopped"
                    break
                if not np.isfinite(row.f) or row.f > f_guard:
                    status = "diverged"
                    break
                if row.grad_norm_sq < min_gnsq_seen:
                    min_gnsq_seen = row.grad_norm_sq
    finally:
        if pool is not None:
            pool.shutdown()

    summary = {
        "status": status,
        "label": rc.label,
        "algo": rc.algo,
        "rounds": rows[-1].round,
        "final_f": rows[-1].f,
        "final_grad_norm_sq": rows[-1].grad_norm_sq,
        "min_grad_norm_sq": float(min_gnsq_seen),
        "uplink_cum": rows[-1].uplink_cum,
        "downlink_cum": rows[-1].downlink_cum,
        "gamma_used": rc.gamma,
        "beta_used": rc.beta if shifts_on else 0.0,
        "seed": run_seed,
        "threads": n_threads,
        "theory_caps": rc.theory_caps,
    }
    final_state = {"x": x.copy(), "w": w.copy(), "h": h.copy(), "h_server": h_srv.copy(), "t": t}
    return RunResult(status=status, rows=rows, summary=summary, state=final_state)


def sweep(rc, gammas, threads: Optional[int] = None, target: str = "final_f") -> dict:
    """Run every stepsize in `gammas`, report per-cell summaries and the best
    non-diverged cell under the target metric (final_f, or coords_to_stop
    when a stop rule is active)."""
    if isinstance(rc, dict):
        rc = resolve(rc)
    if len(gammas) == 0:
        raise ConfigError("sweep grid must be nonempty")
    cells = []
    for g in gammas:
        import dataclasses

        cell_rc = dataclasses.replace(rc, gamma=float(g))
        result = run(cell_rc, threads=threads)
        cell = dict(result.summary)
        cell["gamma"] = float(g)
        cell["diverged"] = result.status == "diverged"
        if rc.stop_mode > 0:
            cell["coords_to_stop"] = (
                cell["uplink_cum"] + cell["downlink_cum"]
                if result.status == "stopped" else None
            )
        cells.append(cell)
    def score(cell):
        if cell["diverged"]:
            return math.inf
        if target == "coords_to_stop":
            v = cell.get("coords_to_stop")
            return math.inf if v is None else v
        v = cell.get(target)
        return math.inf if v is None or not math.isfinite(v) else v
    best = min(range(len(cells)), key=lambda i: score(cells[i]))
    return {
        "cells": cells,
        "best_index": best if score(cells[best]) < math.inf else None,
        "target": target,
        "n_diverged": sum(c["diverged"] for c in cells),
    }


def multi_seed(rc, seeds, threads: Optional[int] = None) -> dict:
    """Aligned per-round mean and standard error of the metric streams.

    Streams truncated by stop rules are aligned on the common prefix (with
    a warning)."""
    if isinstance(rc, dict):
        rc = resolve(rc)
    if len(seeds) < 1:
        raise ConfigError("multi_seed needs at least one seed")
    results = [run(rc, threads=threads, seed=s) for s in seeds]
    lengths = [len(r.rows) for r in results]
    m = min(lengths)
    truncated = any(l != m for l in lengths)
    if truncated:
        warnings.warn("metric streams differ in length; aligning on the common prefix")
    cols = ("f", "grad_norm_sq", "dist_sq", "lyapunov", "w_drift")
    out = {
        "rounds": [results[0].rows[j].round for j in range(m)],
        "seeds": list(seeds),
        "truncated": truncated,
        "mean": {},
        "stderr": {},
        "results": results,
    }
    for col in cols:
        data = []
        for r in results:
            vals = [getattr(r.rows[j], col) for j in range(m)]
            if any(v is None for v in vals):
                data = None
                break
            data.append(vals)
        if data is None:
            continue
        arr = np.array(data)
        out["mean"][col] = arr.mean(axis=0)
        if arr.shape[0] > 1 and np.any(arr != arr[0]):
            out["stderr"][col] = arr.std(axis=0, ddof=1) / math.sqrt(arr.shape[0])
        else:
            out["stderr"][col] = np.zeros(m)
    return out


def merge_reports(csv_texts, labels, x_axis: str = "round") -> str:
    """Merge per-run metric CSVs into one long-format CSV with columns
    run_label, x, f, grad_norm_sq.  x_axis: round | total_coords | downlink."""
    if x_axis not in ("round", "total_coords", "downlink"):
        raise ValueError(f"unknown x axis {x_axis!r}")
    out_lines = ["run_label,x,f,grad_norm_sq"]
    for text, label in zip(csv_texts, labels):
        lines = [ln for ln in text.strip().split("\n") if ln]
        if lines[0] != CSV_HEADER:
            raise ValueError(f"{label}: unexpected CSV header {lines[0]!r}")
        for ln in lines[1:]:
            parts = ln.split(",")
            rnd, f, gnsq = parts[0], parts[1], parts[2]
            up, down = int(parts[6]), int(parts[7])
            if x_axis == "round":
                xv = rnd
            elif x_axis == "total_coords":
                xv = str(up + down)
            else:
                xv = str(down)
            out_lines.append(f"{label},{xv},{f},{gnsq}")
    return "\n".join(out_lines) + "\n"


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
