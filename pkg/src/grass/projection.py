"""Projection matrices for subspace optimization.

A sparse projection stores ``P^T = rho B`` as two length-``r`` arrays: the
selected row indices ``sigma`` and their positive scales ``rho``. Projecting a
gradient is then a row gather plus a row scaling, and back-projecting an
update is a scatter-add into ``r`` rows. Dense (Gaussian, SVD) and
CountSketch projections are kept alongside as baselines.
"""

from __future__ import annotations

import contextlib
import enum
import itertools
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import InvalidInputError


class ProjectionKind(str, enum.Enum):
    FULL_RANK = "full_rank"
    TOP_R = "top_r"
    FROZEN_TOP_R = "frozen_top_r"
    UNIFORM_R = "uniform_r"
    UNIFORM_NR = "uniform_nr"
    MULTNORM_R = "multnorm_r"
    MULTNORM_NR = "multnorm_nr"
    MULTNORM2_R = "multnorm2_r"
    MULTNORM2_NR = "multnorm2_nr"
    DENSE_GAUSSIAN = "dense_gaussian"
    DENSE_SVD = "dense_svd"
    COUNT_SKETCH = "count_sketch"

    @property
    def is_sparse(self) -> bool:
        return self not in _DENSE_KINDS

    @property
    def is_sampled(self) -> bool:
        return self in _SAMPLED

    @property
    def replacement(self) -> bool:
        return self.value.endswith("_r") and self.is_sampled

    @property
    def q_kind(self) -> str | None:
        if self.value.startswith("multnorm2"):
            return "norm2"
        if self.value.startswith("multnorm"):
            return "norm"
        if self.value.startswith("uniform"):
            return "uniform"
        return None

    @property
    def needs_full_gradient(self) -> bool:
        """Whether computing P needs more than the gradient's row norms."""
        return self is ProjectionKind.DENSE_SVD


_DENSE_KINDS = {
    ProjectionKind.DENSE_GAUSSIAN,
    ProjectionKind.DENSE_SVD,
    ProjectionKind.COUNT_SKETCH,
}
_SAMPLED = {
    ProjectionKind.UNIFORM_R,
    ProjectionKind.UNIFORM_NR,
    ProjectionKind.MULTNORM_R,
    ProjectionKind.MULTNORM_NR,
    ProjectionKind.MULTNORM2_R,
    ProjectionKind.MULTNORM2_NR,
}


@dataclass(frozen=True)
class SparseProjection:
    m: int
    sigma: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.int64).ravel()
        rho = np.asarray(self.rho, dtype=linalg.DTYPE).ravel()
        if sigma.size != rho.size or sigma.size == 0:
            raise InvalidInputError("sigma and rho must be nonempty and of equal length")
        if np.any(sigma < 0) or np.any(sigma >= self.m):
            raise InvalidInputError(f"sigma entries must lie in [0, {self.m})")
        if not np.all(np.isfinite(rho)) or np.any(rho <= 0):
            raise InvalidInputError("rho entries must be positive and finite")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "rho", rho)

    @property
    def r(self) -> int:
        return int(self.sigma.size)

    def to_dense(self) -> np.ndarray:
        p = np.zeros((self.m, self.r))
        p[self.sigma, np.arange(self.r)] = self.rho
        return p


@dataclass(frozen=True)
class DenseProjection:
    p: np.ndarray

    @property
    def m(self) -> int:
        return self.p.shape[0]

    @property
    def r(self) -> int:
        return self.p.shape[1]

    def to_dense(self) -> np.ndarray:
        return self.p


@dataclass(frozen=True)
class CountSketchProjection:
    """``P[k, bucket[k]] = sign[k]``: one signed nonzero per row of ``P``."""

    bucket: np.ndarray
    sign: np.ndarray
    r: int

    def __post_init__(self):
        bucket = np.asarray(self.bucket, dtype=np.int64).ravel()
        sign = np.asarray(self.sign, dtype=linalg.DTYPE).ravel()
        if bucket.size != sign.size:
            raise InvalidInputError("bucket and sign must have equal length")
        if np.any(bucket < 0) or np.any(bucket >= self.r):
            raise InvalidInputError("bucket index out of range")
        if not np.all(np.abs(sign) == 1.0):
            raise InvalidInputError("signs must be +1 or -1")
        object.__setattr__(self, "bucket", bucket)
        object.__setattr__(self, "sign", sign)

    @property
    def m(self) -> int:
        return int(self.bucket.size)

    def to_dense(self) -> np.ndarray:
        p = np.zeros((self.m, self.r))
        p[np.arange(self.m), self.bucket] = self.sign
        return p


Projection = SparseProjection | DenseProjection | CountSketchProjection


def identity_projection(m: int) -> SparseProjection:
    return SparseProjection(m, np.arange(m), np.ones(m))


# ---------------------------------------------------------------------------
# construction

_rho_mutation = 1.0


@contextlib.contextmanager
def mutate_rho(factor: float):
    """Test hook: multiply every unbiased scale by ``factor`` while active."""
    global _rho_mutation
    prev = _rho_mutation
    _rho_mutation = float(factor)
    try:
        yield
    finally:
        _rho_mutation = prev


def compute_q(norms, kind: str) -> np.ndarray:
    """Sampling distribution from row norms: ``norm``, ``norm2`` or ``uniform``."""
    norms = np.asarray(norms, dtype=linalg.DTYPE).ravel()
    if np.any(norms < 0) or not np.all(np.isfinite(norms)):
        raise InvalidInputError("norms must be finite and nonnegative")
    if kind == "uniform":
        return np.full(norms.size, 1.0 / norms.size)
    if kind == "norm":
        w = norms.copy()
    elif kind == "norm2":
        w = norms * norms
    else:
        raise InvalidInputError(f"unknown sampling distribution {kind!r}")
    total = w.sum()
    if not total > 0:
        raise InvalidInputError("cannot normalize all-zero norms")
    return w / total


def unbiased_scales(q, sigma, r: int) -> np.ndarray:
    """``rho_j = 1 / sqrt(r q_{sigma_j})``, the scale making E[P P^T] = I."""
    q = np.asarray(q, dtype=linalg.DTYPE)
    qs = q[np.asarray(sigma)]
    if np.any(qs <= 0):
        raise InvalidInputError("selected index has zero probability")
    return _rho_mutation / np.sqrt(r * qs)


def compute_p_sparse(g, kind: ProjectionKind, r: int, rng=None, norms=None) -> SparseProjection:
    """Select ``r`` rows of ``g`` according to ``kind``.

    Only the row norms of ``g`` are used, so callers that already have them
    (e.g. from a sketch) may pass ``norms`` and ``g=None``.
    """
    kind = ProjectionKind(kind)
    if norms is None:
        norms = linalg.row_norms(g)
    norms = np.asarray(norms, dtype=linalg.DTYPE)
    m = norms.size
    if kind is ProjectionKind.FULL_RANK:
        return identity_projection(m)
    if not kind.is_sparse:
        raise InvalidInputError(f"{kind.value} is not a sparse projection")
    if not 1 <= r <= m:
        raise InvalidInputError(f"rank {r} out of range for {m} rows")
    if kind in (ProjectionKind.TOP_R, ProjectionKind.FROZEN_TOP_R):
        return SparseProjection(m, linalg.topk_indices(norms, r), np.ones(r))
    q = compute_q(norms, kind.q_kind)
    if rng is None:
        raise InvalidInputError(f"{kind.value} needs a random generator")
    if kind.replacement:
        if np.any(q == 0):
            raise InvalidInputError("zero-probability rows are not allowed with replacement sampling")
        sigma = linalg.sample_multinomial(q, r, True, rng)
        return SparseProjection(m, sigma, unbiased_scales(q, sigma, r))
    sigma = linalg.sample_multinomial(q, r, False, rng)
    return SparseProjection(m, sigma, np.ones(r))


def compute_p_dense(g, kind: ProjectionKind, r: int, rng=None, m: int | None = None):
    kind = ProjectionKind(kind)
    if kind is ProjectionKind.DENSE_SVD:
        return DenseProjection(linalg.topr_svd_left(g, r))
    m = m if m is not None else linalg.as_mat(g).shape[0]
    if rng is None:
        raise InvalidInputError(f"{kind.value} needs a random generator")
    if kind is ProjectionKind.DENSE_GAUSSIAN:
        return DenseProjection(linalg.gaussian_fill(m, r, 1.0 / r, rng))
    if kind is ProjectionKind.COUNT_SKETCH:
        bucket = rng.integers(0, r, size=m)
        sign = np.where(rng.random(m) < 0.5, -1.0, 1.0)
        return CountSketchProjection(bucket, sign, r)
    raise InvalidInputError(f"{kind.value} is not a dense projection")


def compute_p(g, kind: ProjectionKind, r: int, rng=None, norms=None) -> Projection:
    kind = ProjectionKind(kind)
    if kind.is_sparse:
        return compute_p_sparse(g, kind, r, rng, norms=norms)
    m = norms.size if norms is not None else None
    return compute_p_dense(g, kind, r, rng, m=m)


# ---------------------------------------------------------------------------
# application


def project(p: Projection, g) -> np.ndarray:
    """``P^T g`` (``r x n``)."""
    g = linalg.as_mat(g)
    if g.shape[0] != p.m:
        raise InvalidInputError(f"projection expects {p.m} rows, got {g.shape[0]}")
    n = g.shape[1]
    if isinstance(p, SparseProjection):
        out = g[p.sigma] * p.rho[:, None]
        linalg.note_alloc(out.shape, "project")
        linalg.record_ops("scale", p.r * n)
        return out
    if isinstance(p, CountSketchProjection):
        out = np.zeros((p.r, n))
        np.add.at(out, p.bucket, g * p.sign[:, None])
        linalg.record_ops("project", p.m * n)
        return out
    return linalg.matmul(p.p.T, g, label="project")


def reconstruct(p: Projection, gc) -> np.ndarray:
    """``P gc`` (``m x n``); duplicate sparse indices accumulate."""
    gc = linalg.as_mat(gc)
    if gc.shape[0] != p.r:
        raise InvalidInputError(f"expected {p.r} rows, got {gc.shape[0]}")
    if isinstance(p, SparseProjection):
        out = np.zeros((p.m, gc.shape[1]))
        np.add.at(out, p.sigma, gc * p.rho[:, None])
        return out
    if isinstance(p, CountSketchProjection):
        return gc[p.bucket] * p.sign[:, None]
    return linalg.matmul(p.p, gc, label="reconstruct")


def selection_residual(p: Projection, g) -> float:
    """``||P P^T g - g||_F^2``."""
    g = linalg.as_mat(g)
    d = reconstruct(p, project(p, g)) - g
    return float(np.sum(d * d))


# ---------------------------------------------------------------------------
# analysis


MAX_ENUMERATION = 100_000


def expected_reconstruction_exhaustive(q, r: int, m: int) -> np.ndarray:
    """``E[P P^T]`` for with-replacement sampling, by enumerating all ``m**r``
    index tuples."""
    q = linalg.validate_distribution(q)
    if q.size != m:
        raise InvalidInputError("q must have length m")
    if np.any(q <= 0):
        raise InvalidInputError("q must be strictly positive; rho diverges at zero")
    if m**r > MAX_ENUMERATION:
        raise InvalidInputError(f"{m}**{r} outcomes exceed the enumeration limit")
    total = np.zeros((m, m))
    for sigma in itertools.product(range(m), repeat=r):
        weight = float(np.prod(q[list(sigma)]))
        p = SparseProjection(m, np.array(sigma), unbiased_scales(q, sigma, r)).to_dense()
        total += weight * (p @ p.T)
    return total


def total_variance_analytic(g, q, r: int) -> float:
    """Total variance ``E||P P^T g - g||_F^2`` under with-replacement sampling."""
    g = linalg.as_mat(g)
    q = np.asarray(q, dtype=linalg.DTYPE).ravel()
    if q.size != g.shape[0]:
        raise InvalidInputError("q must have one entry per row")
    if np.any(q <= 0):
        raise InvalidInputError("q must be strictly positive")
    sq = linalg.row_norms(g) ** 2
    return float((np.sum(sq / q) - np.sum(sq)) / r)


def coverage_fraction(history, m: int) -> float:
    """Share of the ``m`` rows selected at least once across ``history``."""
    seen = set()
    for p in history:
        seen.update(int(i) for i in p.sigma)
    return len(seen) / m
