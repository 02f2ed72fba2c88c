"""Dense linear algebra and seeded sampling primitives.

Matrices are plain 2-D ``numpy.float64`` arrays. Every product that matters
for the cost model goes through :func:`matmul`, which reports to the
thread-local :class:`FlopCounter` when one is active. Temporary buffers that
the memory claims depend on are reported through :func:`note_alloc` to an
optional :class:`AllocationAudit`.
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

DTYPE = np.float64

_local = threading.local()


# ---------------------------------------------------------------------------
# instrumentation


@dataclass
class FlopCounter:
    """Operation counter.

    ``madds`` counts multiply-adds from matrix products, ``ops`` counts single
    elementwise operations (scalings, additions, optimizer arithmetic). The
    analytic tables count one multiply-add as one FLOP, so ``table_flops`` is
    ``madds + ops`` while ``flops`` is the conventional ``2 * madds + ops``.
    """

    madds: int = 0
    ops: int = 0
    by_label: dict = field(default_factory=lambda: defaultdict(int))
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record(self, label: str, madds: int = 0, ops: int = 0) -> None:
        with self._lock:
            self.madds += madds
            self.ops += ops
            self.by_label[label] += madds + ops

    @property
    def flops(self) -> int:
        return 2 * self.madds + self.ops

    @property
    def table_flops(self) -> int:
        return self.madds + self.ops

    def snapshot(self) -> dict:
        return {"madds": self.madds, "ops": self.ops, "by_label": dict(self.by_label)}

    def reset(self) -> None:
        self.madds = 0
        self.ops = 0
        self.by_label = defaultdict(int)


@dataclass
class AllocationAudit:
    """Records the largest temporary buffer requested while active."""

    peak: int = 0
    peak_label: str = ""
    events: list = field(default_factory=list)

    def note(self, shape: tuple, label: str) -> None:
        size = int(np.prod(shape))
        self.events.append((label, tuple(shape)))
        if size > self.peak:
            self.peak = size
            self.peak_label = label

    def saw_shape(self, shape: tuple) -> bool:
        return any(s == tuple(shape) for _, s in self.events)


def current_counter() -> FlopCounter | None:
    return getattr(_local, "counter", None)


def current_audit() -> AllocationAudit | None:
    return getattr(_local, "audit", None)


@contextlib.contextmanager
def count_flops(counter: FlopCounter | None = None):
    """Activate a FLOP counter for the current thread."""
    counter = counter if counter is not None else FlopCounter()
    prev = getattr(_local, "counter", None)
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


@contextlib.contextmanager
def audit_allocations():
    audit = AllocationAudit()
    prev = getattr(_local, "audit", None)
    _local.audit = audit
    try:
        yield audit
    finally:
        _local.audit = prev


def record_ops(label: str, ops: int) -> None:
    c = current_counter()
    if c is not None:
        c.record(label, ops=int(ops))


def note_alloc(shape: tuple, label: str) -> None:
    a = current_audit()
    if a is not None:
        a.note(shape, label)


# ---------------------------------------------------------------------------
# dense primitives


def as_mat(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name} must have positive dimensions, got {a.shape}")
    return a


def check_finite(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def matmul(a, b, label: str = "matmul") -> np.ndarray:
    """Dense product ``a @ b``; counts ``a.rows * a.cols * b.cols`` multiply-adds."""
    a = as_mat(a, "left operand")
    b = as_mat(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"cannot multiply {a.shape} by {b.shape}")
    p, q = a.shape
    s = b.shape[1]
    c = current_counter()
    if c is not None:
        c.record(label, madds=p * q * s)
    note_alloc((p, s), label)
    # contiguous inputs keep the BLAS path (and its rounding) independent of views
    return np.ascontiguousarray(a) @ np.ascontiguousarray(b)


def row_norms(g) -> np.ndarray:
    g = as_mat(g)
    return np.sqrt(np.einsum("ij,ij->i", g, g))


def col_norms(g) -> np.ndarray:
    g = as_mat(g)
    return np.sqrt(np.einsum("ij,ij->j", g, g))


def topk_indices(values, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, descending; ties go to the lower index."""
    v = np.asarray(values, dtype=DTYPE).ravel()
    if k < 0 or k > v.size:
        raise InvalidInputError(f"k={k} out of range for {v.size} values")
    order = np.lexsort((np.arange(v.size), -v))
    return order[:k].astype(np.int64)


# ---------------------------------------------------------------------------
# symmetric eigensolver and truncated SVD


def _round_robin(n: int) -> list[np.ndarray]:
    """Pairings for one parallel Jacobi sweep: n-1 rounds of disjoint pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [
            (players[i], players[size - 1 - i])
            for i in range(size // 2)
            if players[i] >= 0 and players[size - 1 - i] >= 0
        ]
        rounds.append(np.array(pairs, dtype=np.int64).reshape(-1, 2))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(s, tol: float = 1e-14, max_sweeps: int = 60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations within a round act on disjoint index pairs, so each round is a
    handful of vectorized updates. Returns eigenvalues in descending order and
    the matching orthonormal eigenvectors as columns.
    """
    a = as_mat(s).copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise InvalidInputError("jacobi_eigh needs a square matrix")
    a = 0.5 * (a + a.T)
    v = np.eye(n, dtype=DTYPE)
    eps = np.finfo(DTYPE).eps
    if n > 1:
        rounds = _round_robin(n)
        scale = max(np.linalg.norm(a), np.finfo(DTYPE).tiny)
        for _ in range(max_sweeps):
            off = np.linalg.norm(a - np.diag(np.diag(a)))
            if off <= tol * scale:
                break
            rotated = False
            for pairs in rounds:
                if pairs.size == 0:
                    continue
                p, q = pairs[:, 0], pairs[:, 1]
                apq = a[p, q]
                negligible = np.abs(apq) <= eps * np.sqrt(np.abs(a[p, p] * a[q, q]))
                a[p[negligible], q[negligible]] = 0.0
                a[q[negligible], p[negligible]] = 0.0
                live = (~negligible) & (apq != 0.0)
                if not np.any(live):
                    continue
                rotated = True
                p, q, apq = p[live], q[live], apq[live]
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                big = np.abs(theta) > 1e150
                th = np.where(big, 1.0, theta)
                t = np.sign(th) / (np.abs(th) + np.sqrt(th * th + 1.0))
                t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
                t[theta == 0] = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                # A <- J^T A J with J[p,p]=c, J[p,q]=s, J[q,p]=-s, J[q,q]=c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c[:, None] * rp - sn[:, None] * rq
                a[q, :] = sn[:, None] * rp + c[:, None] * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = cp * c - cq * sn
                a[:, q] = cp * sn + cq * c
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = vp * c - vq * sn
                v[:, q] = vp * sn + vq * c
            if not rotated:
                break
    w = np.diag(a).copy()
    order = np.lexsort((np.arange(n), -w))
    return w[order], v[:, order]


def _orthonormal_complete(u: np.ndarray, m: int) -> np.ndarray:
    """Modified Gram-Schmidt over ``u``'s columns, replacing null columns with
    standard basis vectors so the result always has full column rank."""
    out = []
    candidates = [u[:, j] for j in range(u.shape[1])]
    basis = iter(np.eye(m, dtype=DTYPE))
    for vec in candidates:
        x = vec.copy()
        for _ in range(2):
            for o in out:
                x -= (o @ x) * o
        nrm = np.linalg.norm(x)
        while nrm < 1e-10:
            x = next(basis).copy()
            for _ in range(2):
                for o in out:
                    x -= (o @ x) * o
            nrm = np.linalg.norm(x)
        out.append(x / nrm)
    return np.stack(out, axis=1)


def topr_svd_left(g, r: int) -> np.ndarray:
    """Top-``r`` left singular vectors of ``g`` as an ``m x r`` orthonormal matrix.

    Uses the Gram matrix of the smaller dimension: ``g g^T`` directly when
    ``m <= n``, otherwise ``g^T g`` followed by ``u = g v / s`` and
    re-orthonormalization.
    """
    g = as_mat(g)
    m, n = g.shape
    if not 1 <= r <= min(m, n):
        raise InvalidInputError(f"rank {r} out of range for {g.shape}")
    if m <= n:
        _, vecs = jacobi_eigh(g @ g.T)
        return np.ascontiguousarray(vecs[:, :r])
    vals, vecs = jacobi_eigh(g.T @ g)
    sv = np.sqrt(np.clip(vals[:r], 0.0, None))
    u = g @ vecs[:, :r]
    tiny = sv <= 1e-12 * max(sv[0], 1e-300)
    u[:, ~tiny] /= sv[~tiny]
    u[:, tiny] = 0.0
    return _orthonormal_complete(u, m)


def singular_values(g) -> np.ndarray:
    g = as_mat(g)
    gram = g.T @ g if g.shape[0] >= g.shape[1] else g @ g.T
    vals, _ = jacobi_eigh(gram)
    return np.sqrt(np.clip(vals, 0.0, None))


# ---------------------------------------------------------------------------
# randomness


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only source of randomness in the package."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for a (seed, key...) tuple, e.g. one per worker."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])
    return np.random.Generator(np.random.PCG64(ss))


def validate_distribution(q) -> np.ndarray:
    q = np.asarray(q, dtype=DTYPE).ravel()
    if q.size == 0 or not np.all(np.isfinite(q)) or np.any(q < 0):
        raise InvalidInputError("probability vector must be finite and nonnegative")
    if abs(q.sum() - 1.0) > 1e-9:
        raise InvalidInputError(f"probability vector sums to {q.sum()!r}, not 1")
    return q


def _draw(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.minimum(idx, cdf.size - 1)


def sample_multinomial(q, r: int, replacement: bool, rng: np.random.Generator) -> np.ndarray:
    """Draw ``r`` indices from ``q``.

    With replacement the draws are i.i.d. Without replacement each draw is
    taken from the current weights, after which the drawn index's mass is
    zeroed and the remainder renormalized.
    """
    q = validate_distribution(q)
    if r < 0:
        raise InvalidInputError("sample count must be nonnegative")
    if replacement:
        out = _draw(np.cumsum(q), rng.random(r))
        # zero-mass entries can only be hit through cumsum plateaus at float edges
        while np.any(q[out] == 0):
            bad = q[out] == 0
            out[bad] = _draw(np.cumsum(q), rng.random(int(bad.sum())))
        return out.astype(np.int64)
    support = int(np.count_nonzero(q))
    if r > support:
        raise InvalidInputError(f"cannot draw {r} distinct indices from support of size {support}")
    w = q.copy()
    out = np.empty(r, dtype=np.int64)
    for j in range(r):
        cdf = np.cumsum(w)
        k = int(_draw(cdf, rng.random(1))[0])
        while w[k] == 0:
            k = int(_draw(cdf, rng.random(1))[0])
        out[j] = k
        w[k] = 0.0
    return out


def gaussian_fill(rows: int, cols: int, variance: float, rng: np.random.Generator) -> np.ndarray:
    if not variance > 0:
        raise InvalidInputError("variance must be positive")
    return rng.standard_normal((rows, cols)) * np.sqrt(variance)
