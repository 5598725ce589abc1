"""Closed-form stepsize bounds, ABC constants, Lyapunov values, audits.

Every bound follows the division-by-zero convention: a term whose
denominator contains a zero factor is +inf and never selected by the min.
That makes the parameter collapses (omega = 0, mu = 0, C = 0) exact.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .problems import SmoothnessConstants


@dataclass
class TheoryInputs:
    n: int
    omega: float
    alpha: float
    L: float
    L_max: float
    L_hat: float
    mu: float = 0.0
    sigma_sq: float = 0.0
    delta0: Optional[float] = None  # f(x^0) - f*
    delta_star: Optional[float] = None  # f* - mean_i f_i*
    D: Optional[float] = None  # strong-growth factor
    eps: Optional[float] = None
    T: Optional[int] = None

    def __post_init__(self):
        if self.L <= 0:
            raise ValueError("L must be positive")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.omega < 0 or self.mu < 0 or self.sigma_sq < 0:
            raise ValueError("omega, mu, sigma_sq must be nonnegative")
        if self.mu > self.L * (1 + 1e-12):
            raise ValueError("mu cannot exceed L")


@dataclass
class ABCConstants:
    """Second-moment envelope E||g||^2 <= 2A(f - f*) + B ||grad f||^2 + C."""

    A: float
    B: float
    C: float
    case: str


@dataclass
class Bound:
    value: float
    terms: dict = field(default_factory=dict)


def _safe_div(num: float, den: float) -> float:
    return math.inf if den == 0.0 else num / den


def beta_shift(omega: float) -> float:
    """Shift-learning rate companion 1/(omega + 1)."""
    return 1.0 / (omega + 1.0)


def stepsize_gd(ti: TheoryInputs) -> Bound:
    return Bound(1.0 / ti.L, {"one_over_L": 1.0 / ti.L})


def stepsize_ef21p_strong(ti: TheoryInputs) -> Bound:
    """Model-shift error feedback alone, strongly convex: alpha / (16 L)."""
    v = ti.alpha / (16.0 * ti.L)
    return Bound(v, {"alpha_over_16L": v})


def _diana_terms(ti: TheoryInputs) -> dict:
    return {
        "uplink_variance": _safe_div(ti.n, 160.0 * ti.omega * ti.L_max),
        "mixed": _safe_div(
            math.sqrt(ti.n * ti.alpha), 20.0 * math.sqrt(ti.omega) * ti.L_hat
        ),
        "downlink_contraction": ti.alpha / (100.0 * ti.L),
    }


def stepsize_diana_strong(ti: TheoryInputs) -> Bound:
    """Strongly convex shifted-estimator bound; the companion shift rate is
    beta_shift(omega).  Returns the min of the four caps."""
    terms = _diana_terms(ti)
    terms["mu_cap"] = _safe_div(1.0, (ti.omega + 1.0) * ti.mu)
    return Bound(min(terms.values()), terms)


def stepsize_dcgd_strong(ti: TheoryInputs) -> Bound:
    """Strongly convex zero-shift bound (no mu cap)."""
    terms = _diana_terms(ti)
    return Bound(min(terms.values()), terms)


def stepsize_convex_general(ti: TheoryInputs, family: str = "diana") -> Bound:
    """General convex (mu = 0) bound; identical caps for both estimator
    families."""
    if family not in ("diana", "dcgd"):
        raise ValueError(f"unknown family {family!r}")
    terms = _diana_terms(ti)
    return Bound(min(terms.values()), terms)


def dcgd_strong_neighborhood(ti: TheoryInputs, mean_sq_grad_at_opt: float) -> float:
    """Radius of the zero-shift plateau: 8 omega / (n mu) * mean_i ||grad f_i(x*)||^2."""
    return _safe_div(8.0 * ti.omega, ti.n * ti.mu) * mean_sq_grad_at_opt


ABC_CASES = ("full_grad", "strong_growth", "bounded_var", "homogeneous")


def abc_constants(case: str, ti: TheoryInputs) -> ABCConstants:
    """(A, B, C) for the compressed-average estimator built from worker
    gradients: exact gradients, exact + strong growth, bounded-variance
    stochastic, and the homogeneous (identical f_i) stochastic regime."""
    if case == "full_grad":
        if ti.delta_star is None:
            raise ValueError("full_grad case needs delta_star")
        A = ti.omega * ti.L_max / ti.n
        return ABCConstants(A=A, B=1.0, C=2.0 * A * ti.delta_star, case=case)
    if case == "strong_growth":
        if ti.D is None:
            raise ValueError("strong_growth case needs D")
        return ABCConstants(A=0.0, B=ti.D * ti.omega / ti.n + 1.0, C=0.0, case=case)
    if case == "bounded_var":
        if ti.delta_star is None:
            raise ValueError("bounded_var case needs delta_star")
        A = ti.omega * ti.L_max / ti.n
        C = 2.0 * A * ti.delta_star + (ti.omega + 1.0) * ti.sigma_sq / ti.n
        return ABCConstants(A=A, B=1.0, C=C, case=case)
    if case == "homogeneous":
        return ABCConstants(
            A=0.0, B=ti.omega / ti.n + 1.0,
            C=(ti.omega + 1.0) * ti.sigma_sq / ti.n, case=case,
        )
    raise ValueError(f"unknown ABC case {case!r}; expected one of {ABC_CASES}")


def horizon_abc(ti: TheoryInputs, abc: ABCConstants):
    """Round budget T for a target eps: ceil of
    (48 delta0 L / eps) * max(8/alpha, 4B, 96 delta0 A / eps, 16 C / eps).

    Returns (T, real_valued_bound, terms).  delta0 <= 0 means the start is
    already stationary enough: T = 0.
    """
    if ti.eps is None or ti.eps <= 0:
        raise ValueError("horizon needs a positive eps")
    if ti.delta0 is None:
        raise ValueError("horizon needs delta0")
    if ti.delta0 <= 0:
        return 0, 0.0, {}
    terms = {
        "alpha": 8.0 / ti.alpha,
        "B": 4.0 * abc.B,
        "A": 96.0 * ti.delta0 * abc.A / ti.eps,
        "C": 16.0 * abc.C / ti.eps,
    }
    bound = (48.0 * ti.delta0 * ti.L / ti.eps) * max(terms.values())
    return int(math.ceil(bound)), bound, terms


def stepsize_abc(ti: TheoryInputs, abc: ABCConstants, T: Optional[int] = None) -> Bound:
    """gamma = min(alpha/8L, 1/4BL, 1/sqrt(2ALT), eps/16CL).

    The sqrt cap couples gamma to the horizon: when A > 0 and T is not
    given, T is first fixed from horizon_abc, then gamma evaluated at it.
    With A = 0 the sqrt cap is +inf and no horizon is needed.
    """
    terms = {
        "alpha": ti.alpha / (8.0 * ti.L),
        "B": _safe_div(1.0, 4.0 * abc.B * ti.L),
        "C": _safe_div(ti.eps if ti.eps is not None else math.inf, 16.0 * abc.C * ti.L),
    }
    if abc.A == 0.0:
        terms["A"] = math.inf
    else:
        if T is None:
            T = ti.T if ti.T is not None else horizon_abc(ti, abc)[0]
        terms["A"] = _safe_div(1.0, math.sqrt(2.0 * abc.A * ti.L * T)) if T > 0 else math.inf
    return Bound(min(terms.values()), terms)


def rate_dcgd_nonconvex(ti: TheoryInputs, T: Optional[int] = None):
    """General nonconvex zero-shift rate (exact worker gradients).

    Returns (gamma: Bound, T: int, T_real, T_terms); gamma's sqrt cap is
    evaluated at the returned horizon unless T is supplied.
    """
    if ti.delta_star is None or ti.delta0 is None or ti.eps is None:
        raise ValueError("nonconvex rate needs delta0, delta_star and eps")
    t_terms = {
        "alpha": 8.0 / ti.alpha,
        "A": 96.0 * ti.delta0 * ti.omega * ti.L_max / (ti.n * ti.eps),
        "C": 32.0 * ti.delta_star * ti.omega * ti.L_max / (ti.n * ti.eps),
    }
    T_real = (48.0 * ti.delta0 * ti.L / ti.eps) * max(t_terms.values()) if ti.delta0 > 0 else 0.0
    if T is None:
        T = int(math.ceil(T_real))
    g_terms = {
        "alpha": ti.alpha / (8.0 * ti.L),
        "A": (
            _safe_div(math.sqrt(ti.n), math.sqrt(2.0 * ti.omega * ti.L * ti.L_max * T))
            if T > 0 and ti.omega > 0 else math.inf
        ),
        "C": _safe_div(ti.n * ti.eps, 32.0 * ti.delta_star * ti.omega * ti.L * ti.L_max),
    }
    return Bound(min(g_terms.values()), g_terms), T, T_real, t_terms


def rate_dcgd_strong_growth(ti: TheoryInputs):
    """Strong-growth nonconvex rate, written with the full envelope constant
    B = D omega / n + 1 so the caps match the ABC machinery exactly."""
    if ti.D is None or ti.delta0 is None or ti.eps is None:
        raise ValueError("strong-growth rate needs D, delta0 and eps")
    B = ti.D * ti.omega / ti.n + 1.0
    g_terms = {
        "alpha": ti.alpha / (8.0 * ti.L),
        "B": 1.0 / (4.0 * B * ti.L),
    }
    t_terms = {"alpha": 8.0 / ti.alpha, "B": 4.0 * B}
    T_real = (48.0 * ti.delta0 * ti.L / ti.eps) * max(t_terms.values()) if ti.delta0 > 0 else 0.0
    return Bound(min(g_terms.values()), g_terms), int(math.ceil(T_real)), T_real, t_terms


def rate_dcgd_homogeneous(ti: TheoryInputs):
    """Homogeneous stochastic regime (f_i = f, bounded variance)."""
    if ti.delta0 is None or ti.eps is None:
        raise ValueError("homogeneous rate needs delta0 and eps")
    g_terms = {
        "alpha": ti.alpha / (8.0 * ti.L),
        "B": 1.0 / (4.0 * (ti.omega / ti.n + 1.0) * ti.L),
        "C": _safe_div(ti.n * ti.eps, 16.0 * (ti.omega + 1.0) * ti.sigma_sq * ti.L),
    }
    t_terms = {
        "alpha": 8.0 / ti.alpha,
        "B": 4.0 * (ti.omega / ti.n + 1.0),
        "C": 16.0 * (ti.omega + 1.0) * ti.sigma_sq / (ti.n * ti.eps),
    }
    T_real = (48.0 * ti.delta0 * ti.L / ti.eps) * max(t_terms.values()) if ti.delta0 > 0 else 0.0
    return Bound(min(g_terms.values()), g_terms), int(math.ceil(T_real)), T_real, t_terms


def lyapunov_diana(
    gamma: float, omega: float, n: int,
    dist_sq: float, subopt: float, shift_err_sq_sum: float,
) -> float:
    """V = ||x - x*||^2 / (2 gamma) + (f(x) - f*)
    + (8 gamma omega (omega+1) / n^2) sum_i ||h_i - grad f_i(x*)||^2."""
    weight = 8.0 * gamma * omega * (omega + 1.0) / (n * n)
    return dist_sq / (2.0 * gamma) + subopt + weight * shift_err_sq_sum


def lyapunov_diana_arrays(
    gamma: float, omega: float, x, x_star, f_x: float, f_star: float, h, grad_at_opt
) -> float:
    x = np.asarray(x)
    dist_sq = float(np.sum((x - np.asarray(x_star)) ** 2))
    shift = float(np.sum((np.asarray(h) - np.asarray(grad_at_opt)) ** 2)) if h is not None else 0.0
    n = np.asarray(grad_at_opt).shape[0]
    return lyapunov_diana(gamma, omega, n, dist_sq, f_x - f_star, shift)


def lemma1_audit(constants: SmoothnessConstants, n: int, slack: float = 1e-10) -> dict:
    """Ordering checks among the smoothness constants.

    Exact constants must satisfy L <= L_hat <= min(sqrt(n) L, L_max) and
    L_max <= n L; reported upper bounds only keep L <= L_hat <= L_max.
    """
    L, Lh, Lm = constants.L, constants.L_hat, constants.L_max
    exact = not any(constants.is_upper_bound.values())
    report = {
        "exact_constants": exact,
        "L_le_L_hat": L <= Lh + slack,
        "L_hat_le_L_max": Lh <= Lm + slack,
        "slack_L_le_L_hat": Lh - L,
        "slack_L_hat_le_L_max": Lm - Lh,
    }
    if exact:
        report["L_max_le_nL"] = Lm <= n * L + slack
        report["L_hat_le_sqrtn_L"] = Lh <= math.sqrt(n) * L + slack
        report["slack_L_max_le_nL"] = n * L - Lm
        report["slack_L_hat_le_sqrtn_L"] = math.sqrt(n) * L - Lh
    report["all_ok"] = all(
        v for k, v in report.items() if isinstance(v, bool) and k != "exact_constants"
    )
    return report


def kappa_nu_bounds(
    gamma: float, beta: float, omega: float, n: int, alpha: float, L: float, L_hat: float
) -> dict:
    """Read-only audit of the coupling weights used by the convergence
    argument; they drive no algorithm."""
    return {
        "kappa_max": _safe_div(8.0 * gamma * omega, n * beta),
        "nu_max": 192.0 * gamma * omega * L_hat**2 / (n * alpha) + 32.0 * L / alpha,
    }
