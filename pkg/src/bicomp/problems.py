"""Per-worker differentiable oracles with certified smoothness constants.

Two families: strongly convex quadratics (all constants exact, closed-form
minimizer) and multiclass softmax logistic regression over a partitioned
dataset, optionally with the smooth nonconvex penalty
``lam * sum_j t_j^2 / (1 + t_j^2)`` (per-coordinate curvature at most
``2 * lam``).  The global objective is the plain average of the worker
objectives.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import kernels
from .dataio import Dataset, Partition
from .kernels import P_LOGREG, P_QUAD


@dataclass
class SmoothnessConstants:
    L: float
    L_i: List[float]
    L_max: float
    L_hat: float
    mu: float
    is_upper_bound: dict = field(default_factory=dict)
    power_iteration_converged: bool = True

    def exact(self, name: str) -> bool:
        return not self.is_upper_bound.get(name, False)


@dataclass
class OptReference:
    x_star: np.ndarray
    f_star: float
    grad_at_opt: np.ndarray  # (n_workers, dim)
    grad_norms_at_opt: np.ndarray  # ||grad f_i(x*)||^2 per worker
    tolerance: float
    usable: bool = True
    iterations: int = 0

    @property
    def mean_sq_grad_at_opt(self) -> float:
        return float(np.mean(self.grad_norms_at_opt))


class ProblemOracle:
    """Bundle of worker oracles plus kernel-ready arrays.

    Immutable after construction; gradient evaluations are pure functions of
    (worker, point), so they are safe to run concurrently.
    """

    def __init__(
        self, pkind, n_workers, dim, qA, qB, X, y, wptr, ncls, dfeat, reg_lambda,
        noise_sigma=0.0, constants=None,
    ):
        self.pkind = pkind
        self.n_workers = n_workers
        self.dim = dim
        self.qA = qA
        self.qB = qB
        self.X = X
        self.y = y
        self.wptr = wptr
        self.ncls = ncls
        self.dfeat = dfeat
        self.reg_lambda = reg_lambda
        self.noise_sigma = noise_sigma
        self.constants = constants
        self.reference: Optional[OptReference] = None
        self._logits = np.empty(max(ncls, 1))

    @property
    def kernel_args(self):
        return (
            self.pkind, self.qA, self.qB, self.X, self.y, self.wptr,
            self.ncls, self.dfeat, self.reg_lambda,
        )

    def worker_sizes(self) -> List[int]:
        if self.pkind == P_QUAD:
            return [1] * self.n_workers
        return [int(self.wptr[i + 1] - self.wptr[i]) for i in range(self.n_workers)]

    def value_grad_i(self, i: int, x: np.ndarray):
        x = np.ascontiguousarray(x, dtype=np.float64)
        out = np.empty(self.dim)
        if self.pkind == P_QUAD:
            val = kernels.quad_value_grad(self.qA[i], self.qB[i], x, out)
        else:
            val = kernels.logreg_value_grad(
                self.X, self.y, self.wptr[i], self.wptr[i + 1],
                self.ncls, self.dfeat, self.reg_lambda, x, out, self._logits,
            )
        return float(val), out

    def value_i(self, i: int, x: np.ndarray) -> float:
        return self.value_grad_i(i, x)[0]

    def grad_i(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.value_grad_i(i, x)[1]

    def full_value_grad(self, x: np.ndarray):
        """Exact f(x) and grad f(x), averaging workers in index order."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        gbar = np.empty(self.dim)
        gtmp = np.empty(self.dim)
        val = kernels.eval_mean_value_grad(*self.kernel_args, x, gbar, gtmp, self._logits)
        return float(val), gbar

    def value(self, x: np.ndarray) -> float:
        return self.full_value_grad(x)[0]


def logreg_value_grad(problem: ProblemOracle, worker: int, x: np.ndarray):
    """Worker softmax cross-entropy value/gradient (penalty included)."""
    if problem.pkind != P_LOGREG:
        raise ValueError("logreg_value_grad requires a logistic-regression oracle")
    return problem.value_grad_i(worker, x)


def nonconvex_reg_value_grad(x: np.ndarray, lam: float):
    """Value and gradient of lam * sum_j x_j^2 / (1 + x_j^2) (flat input)."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    x = np.ascontiguousarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    val = kernels.reg_value_grad_add(x, lam, grad)
    return float(val), grad


def power_iteration(matvec, dim: int, iterations: int = 100, tol: float = 1e-8, seed: int = 0):
    """Largest eigenvalue of a PSD operator given as matvec; returns
    (value, converged).  Non-convergence reports the last Rayleigh quotient."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam_old = 0.0
    for _ in range(iterations):
        w = matvec(v)
        lam = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        v = w / nw
        if abs(lam - lam_old) <= tol * max(1.0, abs(lam)):
            return lam, True
        lam_old = lam
    return lam_old, False


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


def quadratic_problem(
    A_list, b_list, noise_sigma: float = 0.0, symmetry_tol: float = 1e-10
) -> ProblemOracle:
    """Workers hold f_i(x) = 0.5 x'A_i x - b_i'x with SPD/PSD A_i.

    Constants are exact: L_i = lambda_max(A_i), L = lambda_max(mean A_i),
    mu = lambda_min(mean A_i), L_hat^2 = lambda_max(mean A_i^2).
    """
    qA = np.ascontiguousarray(np.stack(A_list), dtype=np.float64)
    qB = np.ascontiguousarray(np.stack(b_list), dtype=np.float64)
    n, d, d2 = qA.shape
    if d != d2 or qB.shape != (n, d):
        raise ValueError("matrix/vector shape mismatch")
    for i in range(n):
        if np.max(np.abs(qA[i] - qA[i].T)) > symmetry_tol:
            raise ValueError(f"A_{i} is not symmetric")
        if np.linalg.eigvalsh(qA[i])[0] < -symmetry_tol:
            raise ValueError(f"A_{i} is not positive semidefinite")
    problem = ProblemOracle(
        P_QUAD, n, d, qA, qB,
        np.zeros((1, 1)), np.zeros(1, np.int64), np.zeros(2, np.int64),
        0, 0, 0.0, noise_sigma=noise_sigma,
    )
    problem.constants = estimate_constants(problem)
    return problem


def quadratic_interpolation_problem(A_list, x_hat, noise_sigma: float = 0.0) -> ProblemOracle:
    """Shared-minimizer variant: b_i = A_i x_hat, so grad f_i(x*) = 0 for all i."""
    b_list = [np.asarray(A) @ np.asarray(x_hat, dtype=np.float64) for A in A_list]
    return quadratic_problem(A_list, b_list, noise_sigma=noise_sigma)


def make_quadratic_ensemble(
    dim: int, n_workers: int, seed: int = 0, style: str = "spread",
    mu: float = 0.5, L: float = 2.0, hetero: float = 1.0,
    interpolation: bool = False, noise_sigma: float = 0.0,
) -> ProblemOracle:
    """Seeded synthetic quadratic testbed.

    style='identity' gives A_i = mu * I for every worker (all constants
    collapse to mu); style='spread' draws per-worker rotated spectra in
    [mu, L].  hetero scales the b_i spread; interpolation replaces b_i by
    A_i x_hat with a shared x_hat.
    """
    rng = np.random.default_rng(seed)
    A_list = []
    for _ in range(n_workers):
        if style == "identity":
            A_list.append(np.eye(dim) * mu)
        elif style == "spread":
            q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            eigs = np.exp(rng.uniform(np.log(mu), np.log(L), size=dim))
            eigs[0], eigs[-1] = mu, L
            A_list.append((q * eigs) @ q.T)
        else:
            raise ValueError(f"unknown quadratic style {style!r}")
    if interpolation:
        x_hat = rng.standard_normal(dim) / np.sqrt(dim)
        return quadratic_interpolation_problem(A_list, x_hat, noise_sigma=noise_sigma)
    b_list = [hetero * rng.standard_normal(dim) / np.sqrt(dim) for _ in range(n_workers)]
    return quadratic_problem(A_list, b_list, noise_sigma=noise_sigma)


def logreg_problem(
    dataset: Dataset, part: Partition, n_classes: Optional[int] = None,
    reg_lambda: float = 0.0, d_features: Optional[int] = None,
) -> ProblemOracle:
    """Softmax logistic regression over a partitioned dataset.

    Raw labels are mapped to contiguous class ids by sorted order of the
    distinct values; the flattened model has dim = n_classes * d_features,
    class-major.
    """
    if reg_lambda < 0:
        raise ValueError("regularizer lambda must be >= 0")
    distinct = sorted(set(float(v) for v in dataset.labels))
    remap = {v: i for i, v in enumerate(distinct)}
    ncls = n_classes if n_classes is not None else len(distinct)
    if len(distinct) > ncls:
        raise ValueError(f"{len(distinct)} distinct labels exceed declared classes {ncls}")
    if ncls < 2:
        raise ValueError("softmax regression needs at least 2 classes")
    dfeat = dataset.d_features if d_features is None else d_features
    dense = dataset.to_dense(dfeat)
    ids = np.array([remap[float(v)] for v in dataset.labels], dtype=np.int64)
    rows, labels, wptr = [], [], [0]
    for i, samples in enumerate(part.worker_samples):
        if len(samples) == 0:
            raise ValueError(f"worker {i} received an empty sample block")
        rows.append(dense[samples])
        labels.append(ids[samples])
        wptr.append(wptr[-1] + len(samples))
    X = np.ascontiguousarray(np.vstack(rows))
    y = np.ascontiguousarray(np.concatenate(labels))
    problem = ProblemOracle(
        P_LOGREG, part.n_workers, ncls * dfeat,
        np.zeros((1, 1, 1)), np.zeros((1, 1)),
        X, y, np.array(wptr, dtype=np.int64), ncls, dfeat, reg_lambda,
    )
    problem.constants = estimate_constants(problem)
    return problem


def estimate_constants(problem: ProblemOracle) -> SmoothnessConstants:
    """Exact constants for quadratics; certified upper bounds for logistic
    regression (L_i <= lambda_max(A_i'A_i)/(2 m_i) + 2 lambda via power
    iteration, L <= mean L_i, L_hat <= sqrt(mean L_i^2))."""
    if problem.pkind == P_QUAD:
        L_i = [float(np.linalg.eigvalsh(problem.qA[i])[-1]) for i in range(problem.n_workers)]
        Abar = problem.qA.mean(axis=0)
        eigs = np.linalg.eigvalsh(Abar)
        Msq = np.mean([A @ A for A in problem.qA], axis=0)
        L_hat = float(np.sqrt(max(np.linalg.eigvalsh(Msq)[-1], 0.0)))
        return SmoothnessConstants(
            L=float(eigs[-1]), L_i=L_i, L_max=max(L_i), L_hat=L_hat,
            mu=float(max(eigs[0], 0.0)), is_upper_bound={},
        )
    L_i = []
    all_converged = True
    for i in range(problem.n_workers):
        block = problem.X[problem.wptr[i] : problem.wptr[i + 1]]
        m_i = block.shape[0]
        lam_max, converged = power_iteration(
            lambda v: block.T @ (block @ v), problem.dfeat, iterations=100, tol=1e-8, seed=i
        )
        all_converged &= converged
        L_i.append(lam_max / (2.0 * m_i) + 2.0 * problem.reg_lambda)
    flags = {k: True for k in ("L", "L_i", "L_max", "L_hat")}
    return SmoothnessConstants(
        L=float(np.mean(L_i)), L_i=L_i, L_max=float(np.max(L_i)),
        L_hat=float(np.sqrt(np.mean(np.square(L_i)))), mu=0.0,
        is_upper_bound=flags, power_iteration_converged=all_converged,
    )


def compute_opt_reference(
    problem: ProblemOracle, tolerance: Optional[float] = None, max_iterations: int = 10**6
) -> OptReference:
    """Minimizer reference: direct solve for quadratics, full-gradient descent
    with step 1/L to ||grad f|| <= tolerance for (convex) logistic regression.
    A capped descent yields a reference flagged unusable for distance metrics.
    """
    if problem.pkind == P_QUAD:
        tol = 1e-10 if tolerance is None else tolerance
        Abar = problem.qA.mean(axis=0)
        bbar = problem.qB.mean(axis=0)
        try:
            x_star = np.linalg.solve(Abar, bbar)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"mean quadratic operator is singular: {exc}")
        iters, converged = 0, True
    else:
        if problem.reg_lambda > 0:
            raise ValueError("optimum reference requires a convex problem (lambda = 0)")
        tol = 1e-8 if tolerance is None else tolerance
        x_star = np.zeros(problem.dim)
        gbar = np.empty(problem.dim)
        gtmp = np.empty(problem.dim)
        iters, converged = kernels.gd_to_stationarity(
            *problem.kernel_args, x_star, 1.0 / problem.constants.L, tol * tol,
            max_iterations, gbar, gtmp, problem._logits,
        )
    f_star, gfull = problem.full_value_grad(x_star)
    grad_at_opt = np.stack([problem.grad_i(i, x_star) for i in range(problem.n_workers)])
    reference = OptReference(
        x_star=x_star, f_star=f_star, grad_at_opt=grad_at_opt,
        grad_norms_at_opt=np.sum(grad_at_opt**2, axis=1),
        tolerance=tol, usable=bool(converged), iterations=int(iters),
    )
    if converged and float(np.linalg.norm(gfull)) > tol:
        reference.usable = False
    problem.reference = reference
    return reference


def stochastic_grad(
    problem: ProblemOracle, worker: int, x: np.ndarray, batch_size: int, seed: int, t: int = 0
) -> np.ndarray:
    """Unbiased stochastic gradient of f_i at x.

    Logistic regression samples `batch_size` points uniformly with
    replacement; quadratics add isotropic Gaussian noise with
    E||noise||^2 = noise_sigma^2 / batch_size.  The penalty gradient is
    always added exactly.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if batch_size > 2**32:
        raise ValueError("batch_size above 2^32 is rejected")
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty(problem.dim)
    if problem.pkind == P_QUAD:
        if problem.noise_sigma <= 0.0:
            return problem.grad_i(worker, x)
        kernels.quad_grad_noisy(
            problem.qA[worker], problem.qB[worker], x, out,
            seed, worker, t, batch_size, problem.noise_sigma,
        )
    else:
        kernels.logreg_grad_batch(
            problem.X, problem.y, problem.wptr[worker], problem.wptr[worker + 1],
            problem.ncls, problem.dfeat, problem.reg_lambda, x, out, problem._logits,
            seed, worker, t, batch_size,
        )
    return out


def worker_min_values(problem: ProblemOracle):
    """Per-worker infima f_i*: closed form for quadratics (least-squares
    minimizer of each worker block), the generic lower bound 0 for the
    nonnegative cross-entropy objectives."""
    if problem.pkind == P_QUAD:
        out = []
        for i in range(problem.n_workers):
            xi = np.linalg.lstsq(problem.qA[i], problem.qB[i], rcond=None)[0]
            out.append(problem.value_i(i, xi))
        return out
    return [0.0] * problem.n_workers


def estimate_grad_variance(
    problem: ProblemOracle, x: np.ndarray, batch_size: int, draws: int = 1000, seed: int = 0
) -> dict:
    """Sample-variance diagnostic sigma_hat^2 = E||g_i - grad f_i||^2 per worker."""
    per_worker = []
    for i in range(problem.n_workers):
        exact = problem.grad_i(i, x)
        errs = [
            float(np.sum((stochastic_grad(problem, i, x, batch_size, seed, t) - exact) ** 2))
            for t in range(draws)
        ]
        per_worker.append(float(np.mean(errs)))
    return {
        "per_worker": per_worker,
        "mean": float(np.mean(per_worker)),
        "max": float(np.max(per_worker)),
        "draws": draws,
        "batch_size": batch_size,
    }
