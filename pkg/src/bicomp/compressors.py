"""Sparsifying compressors: the contractive and unbiased operator classes.

A contractive compressor C with factor ``alpha`` in (0, 1] satisfies
``E||C(v) - v||^2 <= (1 - alpha) ||v||^2``; an unbiased compressor with
variance factor ``omega >= 0`` satisfies ``E C(v) = v`` and
``E||C(v) - v||^2 <= omega ||v||^2``.  TopK is contractive with
``alpha = k/d``, RandK is unbiased with ``omega = d/k - 1``, and any
unbiased compressor divided by ``omega + 1`` becomes contractive with
``alpha = 1/(omega + 1)``.
"""

import itertools
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import kernels
from .kernels import K_IDENTITY, K_RANDK, K_SCALE, K_SCALED_RANDK, K_TOPK

_KIND_CODES = {
    "identity": K_IDENTITY,
    "topk": K_TOPK,
    "randk": K_RANDK,
    "scale": K_SCALE,
    "scaled_unbiased": K_SCALED_RANDK,
}


class CompressorClassError(ValueError):
    """A compressor was used in a slot requiring the other operator class."""


@dataclass(frozen=True)
class CompressorSpec:
    """Immutable compressor definition bound to an ambient dimension d.

    kind is one of identity / topk / randk / scale / scaled_unbiased;
    scaled_unbiased is RandK rescaled into the contractive class.
    """

    kind: str
    d: int
    k: Optional[int] = None
    c: Optional[float] = None

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown compressor kind {self.kind!r}")
        if self.d < 1:
            raise ValueError(f"ambient dimension must be positive, got {self.d}")
        if self.kind in ("topk", "randk", "scaled_unbiased"):
            if self.k is None or self.k < 1:
                raise ValueError(f"{self.kind} requires k >= 1, got {self.k}")
            if self.k > self.d:
                raise ValueError(f"{self.kind} requires k <= d, got k={self.k}, d={self.d}")
        if self.kind == "scale":
            if self.c is None or not (0.0 < self.c <= 1.0):
                raise ValueError(f"scale requires 0 < c <= 1, got {self.c}")

    @property
    def code(self) -> int:
        return _KIND_CODES[self.kind]

    @property
    def stored_coords(self) -> int:
        """Coordinates stored per message (the per-message communication cost)."""
        if self.kind in ("topk", "randk", "scaled_unbiased"):
            return self.k
        return self.d

    def is_contractive(self) -> bool:
        return self.kind in ("identity", "topk", "scale", "scaled_unbiased")

    def is_unbiased(self) -> bool:
        return self.kind in ("identity", "randk")


def alpha_of(spec: CompressorSpec) -> float:
    """Contraction factor of a contractive spec; errors on class misuse."""
    if spec.kind == "identity":
        return 1.0
    if spec.kind == "topk":
        return spec.k / spec.d
    if spec.kind == "scale":
        return 1.0 - (1.0 - spec.c) ** 2
    if spec.kind == "scaled_unbiased":
        omega = spec.d / spec.k - 1.0
        return 1.0 / (omega + 1.0)
    raise CompressorClassError(
        f"{spec.kind} is declared unbiased, not contractive; "
        "wire it through a contractive slot only after rescaling (scaled_unbiased)"
    )


def omega_of(spec: CompressorSpec) -> float:
    """Variance factor of an unbiased spec; errors on class misuse."""
    if spec.kind == "identity":
        return 0.0
    if spec.kind == "randk":
        return spec.d / spec.k - 1.0
    raise CompressorClassError(
        f"{spec.kind} is declared contractive, not unbiased; "
        "shifted-gradient estimators require an unbiased compressor"
    )


def spec_from_config(cfg: dict, d: int) -> CompressorSpec:
    """Build a spec from its wire form {"kind": ..., "k": ..., "c": ...}."""
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ValueError(f"compressor config must be a dict with 'kind', got {cfg!r}")
    return CompressorSpec(kind=cfg["kind"], d=d, k=cfg.get("k"), c=cfg.get("c"))


def spec_to_config(spec: CompressorSpec) -> dict:
    cfg = {"kind": spec.kind}
    if spec.k is not None:
        cfg["k"] = spec.k
    if spec.c is not None:
        cfg["c"] = spec.c
    return cfg


@dataclass(frozen=True)
class CompressorStream:
    """A spec bound to one endpoint of one run: draws are keyed by
    (seed, role, endpoint, round), so replaying a round replays the draw."""

    spec: CompressorSpec
    seed: int
    role: int
    endpoint: int
    round: int = 0

    def at_round(self, t: int) -> "CompressorStream":
        return replace(self, round=t)


@dataclass(frozen=True)
class SparseVector:
    """Sorted (index, value) pairs plus the ambient dimension.

    The stored-coordinate count is the message's communication cost; RandK
    messages keep selected zeros, so their cost is always k.
    """

    dim: int
    indices: np.ndarray
    values: np.ndarray

    @property
    def stored_coords(self) -> int:
        return int(self.indices.shape[0])

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def tobytes(self) -> bytes:
        return self.indices.tobytes() + self.values.tobytes()


def compress(stream: CompressorStream, x: np.ndarray) -> SparseVector:
    """Apply the stream's compressor to x for the stream's round."""
    spec = stream.spec
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (spec.d,):
        raise ValueError(f"dimension mismatch: compressor d={spec.d}, vector shape {x.shape}")
    out = np.empty(spec.d)
    idx = np.empty(spec.d, np.int64)
    pool = np.empty(spec.d, np.int64)
    count = kernels.compress_into(
        x, spec.code, spec.k or 0, spec.c or 0.0,
        stream.seed, stream.role, stream.endpoint, stream.round,
        out, idx, pool,
    )
    kept = np.sort(idx[:count])
    return SparseVector(dim=spec.d, indices=kept, values=out[kept])


def enumerate_randk_outputs(x: np.ndarray, k: int):
    """All C(d, k) equally likely RandK outputs of x (dense); exact-law oracle."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    scale = d / k
    for subset in itertools.combinations(range(d), k):
        out = np.zeros(d)
        for j in subset:
            out[j] = x[j] * scale
        yield out


def empirical_class_check(
    spec: CompressorSpec, trials: int, dim: int, tolerance: float = 1e-12, seed: int = 0
) -> dict:
    """Measure a compressor against its declared class on random inputs.

    Reports worst_contraction_ratio = max_x E||C(x) - x||^2 / ||x||^2,
    mean_bias_norm = max_x ||E C(x) - x||, and variance_ratio =
    (E||C(x) - x||^2 / ||x||^2) / omega for unbiased specs.  RandK with
    d <= 12 is checked by exact enumeration over all subsets; everything
    else by Monte-Carlo over the stream draws.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if spec.d != dim:
        spec = replace(spec, d=dim)
    rng = np.random.default_rng(seed)
    exact = spec.kind in ("randk", "scaled_unbiased") and dim <= 12
    worst_ratio = 0.0
    worst_bias = 0.0
    worst_var_ratio = 0.0
    n_draws = 200
    for trial in range(trials):
        x = rng.standard_normal(dim)
        xsq = float(x @ x)
        if exact:
            outs = list(enumerate_randk_outputs(x, spec.k))
            if spec.kind == "scaled_unbiased":
                scale = dim / spec.k  # omega + 1
                outs = [o / scale for o in outs]
            mean_out = np.mean(outs, axis=0)
            mean_err = float(np.mean([np.sum((o - x) ** 2) for o in outs]))
        else:
            draws = []
            for r in range(1 if spec.kind in ("identity", "topk", "scale") else n_draws):
                stream = CompressorStream(spec, seed=seed, role=0, endpoint=trial, round=r)
                draws.append(compress(stream, x).to_dense())
            mean_out = np.mean(draws, axis=0)
            mean_err = float(np.mean([np.sum((o - x) ** 2) for o in draws]))
        ratio = mean_err / xsq
        worst_ratio = max(worst_ratio, ratio)
        worst_bias = max(worst_bias, float(np.linalg.norm(mean_out - x)))
        if spec.is_unbiased() and spec.kind != "identity":
            worst_var_ratio = max(worst_var_ratio, ratio / omega_of(spec))
    report = {
        "worst_contraction_ratio": worst_ratio,
        "mean_bias_norm": worst_bias,
        "variance_ratio": worst_var_ratio,
        "exact_enumeration": exact,
    }
    if spec.is_contractive():
        report["declared_alpha"] = alpha_of(spec)
        report["contraction_ok"] = worst_ratio <= (1.0 - alpha_of(spec)) + tolerance
    if spec.is_unbiased():
        report["declared_omega"] = omega_of(spec)
        report["unbiased_ok"] = worst_bias <= tolerance if exact else None
    return report
