"""Round-exact reference implementations of the six algorithms.

Everything is one template: workers send (possibly shifted, compressed)
gradients up, the server averages, steps, and broadcasts a compressed model
correction down.  The named algorithms are parameter presets of the
template, and the collapses are exact by construction:

* identity downlink keeps w = x (assignment, not w += (x - w));
* identity uplink makes the gradient estimator the plain average;
* zero shift stepsize with zero initial shifts skips the shift machinery.

Consequently e.g. the shifted-estimator run with an identity downlink is
bit-identical to its downlink-free counterpart under shared draws.  The
fast engine path (kernels.run_chunk) reuses the same kernels in the same
order, so reference and engine trajectories match bitwise as well.
"""

from dataclasses import dataclass, replace
from typing import Callable, List, Optional

import numpy as np

from . import kernels
from .compressors import (
    CompressorClassError,
    CompressorSpec,
    CompressorStream,
    SparseVector,
)
from .kernels import K_IDENTITY, R_DUAL, R_PRIMAL
from .problems import ProblemOracle

ALGORITHMS = ("gd", "ef21p", "dcgd", "diana", "ef21p_dcgd", "ef21p_diana")


class DivergenceError(RuntimeError):
    pass


class InvariantViolation(RuntimeError):
    pass


@dataclass
class AlgoState:
    """Replicated state of one algorithm instance.

    w_workers holds each worker's copy of the model shift; after every
    broadcast it must equal w_server exactly.  h_server tracks the running
    average of the worker shifts."""

    x: np.ndarray
    w_server: np.ndarray
    w_workers: np.ndarray
    h_workers: np.ndarray
    h_server: np.ndarray
    t: int
    gamma: float
    beta: float

    def check_replicas(self):
        gap = float(np.max(np.abs(self.w_workers - self.w_server[None, :]))) if self.w_workers.size else 0.0
        if gap != 0.0:
            raise InvariantViolation(f"model-shift replicas desynchronized (gap {gap})")

    def shift_drift(self) -> float:
        """Infinity-norm gap between h_server and the worker-shift average."""
        return float(np.max(np.abs(self.h_server - self.h_workers.mean(axis=0))))


@dataclass
class RoundMessages:
    uplink: List[SparseVector]
    downlink: SparseVector
    uplink_coords: int
    downlink_coords: int


def make_state(
    problem: ProblemOracle, x0: np.ndarray, gamma: float, beta: float = 0.0,
    h_init: str = "zero",
) -> AlgoState:
    """Fresh state with w^0 = x^0 on the server and every worker.

    h_init='grad' starts the shifts at the exact worker gradients at x^0
    (the warm start used by the convex complexity accounting)."""
    n, dim = problem.n_workers, problem.dim
    x = np.ascontiguousarray(x0, dtype=np.float64).copy()
    if x.shape != (dim,):
        raise ValueError(f"x0 must have shape ({dim},)")
    if h_init == "zero":
        h = np.zeros((n, dim))
    elif h_init == "grad":
        h = np.stack([problem.grad_i(i, x) for i in range(n)])
    else:
        raise ValueError(f"unknown h_init {h_init!r}")
    h_srv = np.zeros(dim)
    for i in range(n):
        h_srv += h[i]
    h_srv /= float(n)
    return AlgoState(
        x=x, w_server=x.copy(), w_workers=np.tile(x, (n, 1)),
        h_workers=h, h_server=h_srv, t=0, gamma=gamma, beta=beta,
    )


def identity_spec(d: int) -> CompressorSpec:
    return CompressorSpec(kind="identity", d=d)


def make_dual_streams(spec: CompressorSpec, seed: int, n: int) -> List[CompressorStream]:
    return [CompressorStream(spec, seed=seed, role=R_DUAL, endpoint=i) for i in range(n)]


def make_primal_stream(spec: CompressorSpec, seed: int) -> CompressorStream:
    return CompressorStream(spec, seed=seed, role=R_PRIMAL, endpoint=0)


def _require_unbiased(spec: CompressorSpec):
    if not spec.is_unbiased():
        raise CompressorClassError(
            f"dual (worker-to-server) slot requires an unbiased compressor, got {spec.kind}; "
            "shifted-gradient averaging can diverge with contractive uplinks"
        )


def _require_contractive(spec: CompressorSpec):
    if not spec.is_contractive():
        raise CompressorClassError(
            f"primal (server-to-worker) slot requires a contractive compressor, got {spec.kind}"
        )


def _check_streams(dual_streams, primal_stream, n: int):
    seeds = set()
    if dual_streams is not None:
        if len(dual_streams) != n:
            raise ValueError(f"need {n} dual streams, got {len(dual_streams)}")
        for i, s in enumerate(dual_streams):
            if s.role != R_DUAL or s.endpoint != i:
                raise ValueError("dual streams must be make_dual_streams(spec, seed, n)")
            seeds.add(s.seed)
    if primal_stream is not None:
        if primal_stream.role != R_PRIMAL or primal_stream.endpoint != 0:
            raise ValueError("primal stream must be make_primal_stream(spec, seed)")
        seeds.add(primal_stream.seed)
    if len(seeds) > 1:
        raise ValueError("all streams of one run must share the run seed")
    return seeds.pop() if seeds else 0


def _sparse_from_slot(dim: int, values: np.ndarray, idx: np.ndarray, count: int) -> SparseVector:
    kept = np.sort(idx[:count].copy())
    return SparseVector(dim=dim, indices=kept, values=values[kept].copy())


def template_round(
    state: AlgoState,
    problem: ProblemOracle,
    dual_spec: CompressorSpec,
    primal_spec: CompressorSpec,
    seed: int,
    use_shifts: bool,
    batch_size: int = 0,
    pool=None,
):
    """One synchronous round; returns (state', messages, metrics).

    Worker slots are independent, so the gradient/compression tasks may run
    on a thread pool; the server reduction is a fixed-order sum, making the
    result independent of scheduling.
    """
    n, dim = problem.n_workers, problem.dim
    t = state.t
    gamma, beta = state.gamma, state.beta
    h = state.h_workers.copy()
    x = state.x.copy()
    w = state.w_server.copy()
    h_srv = state.h_server.copy()

    # zero-learning-rate shifts that start at zero stay zero: identical to
    # the shift-free estimator, so take that branch exactly
    shifts_on = bool(use_shifts and not (beta == 0.0 and not np.any(h)))

    grads = np.empty((n, dim))
    msgs = np.empty((n, dim))
    vtmp = np.empty((n, dim))
    widx = np.empty((n, dim), np.int64)
    wpool = np.empty((n, dim), np.int64)
    logits = np.empty((n, max(problem.ncls, 1)))
    sigma = problem.noise_sigma

    args = problem.kernel_args
    worker_args = (
        h, shifts_on, beta, dual_spec.code, dual_spec.k or 0, dual_spec.c or 0.0,
        seed, t, batch_size, sigma, grads, msgs, vtmp, widx, wpool, logits,
    )
    if pool is None:
        for i in range(n):
            kernels.worker_one(*args, i, w, *worker_args)
    else:
        futures = [pool.submit(kernels.worker_one, *args, i, w, *worker_args) for i in range(n)]
        for fut in futures:
            fut.result()

    gtmp = np.empty(dim)
    mtmp = np.empty(dim)
    dtmp = np.empty(dim)
    ptmp = np.empty(dim)
    sidx = np.empty(dim, np.int64)
    spool = np.empty(dim, np.int64)
    kernels.server_phase(
        n, grads, msgs, h_srv, x, w, gamma, beta,
        shifts_on, dual_spec.code,
        primal_spec.code, primal_spec.k or 0, primal_spec.c or 0.0,
        seed, t,
        gtmp, mtmp, dtmp, ptmp, sidx, spool,
    )
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite iterate after round {t}")

    if primal_spec.code == K_IDENTITY:
        w_workers = np.tile(x, (n, 1))
        downlink = SparseVector(dim, np.arange(dim, dtype=np.int64), x.copy())
    else:
        w_workers = state.w_workers + ptmp[None, :]
        downlink = _sparse_from_slot(dim, ptmp, sidx, primal_spec.stored_coords)

    uplink = []
    for i in range(n):
        count = dual_spec.stored_coords
        uplink.append(_sparse_from_slot(dim, msgs[i], widx[i], count))

    new_state = AlgoState(
        x=x, w_server=w, w_workers=w_workers,
        h_workers=h, h_server=h_srv, t=t + 1, gamma=gamma, beta=beta,
    )
    new_state.check_replicas()

    metrics = {
        "uplink_coords": n * dual_spec.stored_coords,
        "downlink_coords": primal_spec.stored_coords,
    }
    if primal_spec.code != K_IDENTITY:
        metrics["pre_gap_sq"] = float(np.sum((x - state.w_server) ** 2))
        metrics["zeta_sq"] = float(np.sum((w - x) ** 2))
    messages = RoundMessages(
        uplink=uplink, downlink=downlink,
        uplink_coords=metrics["uplink_coords"],
        downlink_coords=metrics["downlink_coords"],
    )
    return new_state, messages, metrics


# -- presets ---------------------------------------------------------------


def gd_round(state: AlgoState, problem: ProblemOracle, batch_size: int = 0, seed: int = 0):
    """x' = x - gamma * mean_i grad f_i(x); full model up and down."""
    d = problem.dim
    state2, _, metrics = template_round(
        state, problem, identity_spec(d), identity_spec(d), seed, use_shifts=False,
        batch_size=batch_size,
    )
    return state2, metrics


def ef21p_round(
    state: AlgoState, problem: ProblemOracle, primal_stream: CompressorStream,
    batch_size: int = 0,
):
    """Model-shift error feedback: gradients at w, compressed model correction."""
    _require_contractive(primal_stream.spec)
    seed = _check_streams(None, primal_stream, problem.n_workers)
    state2, _, metrics = template_round(
        state, problem, identity_spec(problem.dim), primal_stream.spec, seed,
        use_shifts=False, batch_size=batch_size,
    )
    return state2, metrics


def diana_round(
    state: AlgoState, problem: ProblemOracle, dual_streams: List[CompressorStream],
    batch_size: int = 0,
):
    """Shifted compressed gradients up, full model down."""
    _require_unbiased(dual_streams[0].spec)
    if not (0.0 <= state.beta <= 1.0):
        raise ValueError("shift stepsize beta must be in [0, 1]")
    seed = _check_streams(dual_streams, None, problem.n_workers)
    return template_round(
        state, problem, dual_streams[0].spec, identity_spec(problem.dim), seed,
        use_shifts=True, batch_size=batch_size,
    )


def ef21p_diana_round(
    state: AlgoState, problem: ProblemOracle,
    dual_streams: List[CompressorStream], primal_stream: CompressorStream,
    batch_size: int = 0,
):
    """Bidirectional: shifted compressed gradients up, compressed model down."""
    _require_unbiased(dual_streams[0].spec)
    _require_contractive(primal_stream.spec)
    seed = _check_streams(dual_streams, primal_stream, problem.n_workers)
    return template_round(
        state, problem, dual_streams[0].spec, primal_stream.spec, seed,
        use_shifts=True, batch_size=batch_size,
    )


def ef21p_dcgd_round(
    state: AlgoState, problem: ProblemOracle,
    dual_streams: List[CompressorStream], primal_stream: CompressorStream,
    batch_size: int = 0,
):
    """Bidirectional, zero shifts: compressed gradients up, compressed model down."""
    _require_unbiased(dual_streams[0].spec)
    _require_contractive(primal_stream.spec)
    seed = _check_streams(dual_streams, primal_stream, problem.n_workers)
    return template_round(
        state, problem, dual_streams[0].spec, primal_stream.spec, seed,
        use_shifts=False, batch_size=batch_size,
    )


def dcgd_round(
    state: AlgoState, problem: ProblemOracle, dual_streams: List[CompressorStream],
    batch_size: int = 0,
):
    """Compressed gradients up, full model down."""
    _require_unbiased(dual_streams[0].spec)
    seed = _check_streams(dual_streams, None, problem.n_workers)
    return template_round(
        state, problem, dual_streams[0].spec, identity_spec(problem.dim), seed,
        use_shifts=False, batch_size=batch_size,
    )


def attach_stochastic(round_op: Callable, batch_size: int) -> Callable:
    """Same round structure with minibatch/noisy worker gradients.

    batch_size='full' (or 0) keeps the exact deterministic sweep."""
    if batch_size == "full":
        batch = 0
    else:
        batch = int(batch_size)
        if batch < 1:
            raise ValueError("batch_size must be >= 1 or 'full'")
        if batch > 2**32:
            raise ValueError("batch_size above 2^32 is rejected")

    def wrapped(*args, **kwargs):
        kwargs["batch_size"] = batch
        return round_op(*args, **kwargs)

    wrapped.batch_size = batch
    return wrapped
