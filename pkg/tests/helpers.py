"""Shared test utilities: independent oracles and run builders."""

import numpy as np

from bicomp import algorithms, problems
from bicomp.engine import ResolvedRun


def central_diff_grad(f, x, h=1e-6):
    """Central finite differences; the independent gradient oracle."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def make_resolved(
    problem, algo, gamma, *, dual=None, primal=None, beta=0.0, h_init="zero",
    batch_size=0, seed=0, rounds=100, stop_mode=0, stop_eps=0.0, stride=None,
    x0=None, reference=None, downlink_times_n=False, label="run",
):
    """Hand-assembled run description for engine tests on custom problems."""
    d = problem.dim
    dual = dual if dual is not None else algorithms.identity_spec(d)
    primal = primal if primal is not None else algorithms.identity_spec(d)
    if stride is None:
        stride = 1 if rounds <= 10**4 else -(-rounds // 10**4)
    if reference == "auto":
        reference = problems.compute_opt_reference(problem)
    return ResolvedRun(
        problem=problem, algo=algo, dual_spec=dual, primal_spec=primal,
        gamma=gamma, beta=beta,
        use_shifts=algo in ("diana", "ef21p_diana"),
        h_init=h_init, batch_size=batch_size, seed=seed, rounds=rounds,
        stop_mode=stop_mode, stop_eps=stop_eps, metric_stride=stride,
        downlink_times_n=downlink_times_n,
        x0=np.zeros(d) if x0 is None else np.asarray(x0, dtype=np.float64),
        reference=reference, label=label,
    )


def single_quadratic(a=1.0, b=0.0):
    """One worker, f(x) = 0.5 a x^2 - b x."""
    return problems.quadratic_problem([np.array([[a]])], [np.array([b])])
