import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grass import linalg
from grass.errors import InvalidInputError


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_hand_case():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal(linalg.matmul(np.eye(2), m), m)
    assert np.array_equal(linalg.matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])


def test_matmul_matches_triple_loop():
    rng = linalg.make_rng(1)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.abs(linalg.matmul(a, b) - triple_loop(a, b)).max() < 1e-12


def test_matmul_counts_flops():
    with linalg.count_flops() as c:
        linalg.matmul(np.ones((5, 7)), np.ones((7, 3)), label="x")
    assert c.madds == 105
    assert c.flops == 2 * 5 * 7 * 3
    assert c.by_label["x"] == 105


def test_matmul_rejects_mismatch():
    with pytest.raises(InvalidInputError):
        linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associativity():
    rng = linalg.make_rng(2)
    for _ in range(20):
        a, b, c = (rng.standard_normal((8, 8)) for _ in range(3))
        lhs = linalg.matmul(linalg.matmul(a, b), c)
        rhs = linalg.matmul(a, linalg.matmul(b, c))
        scale = np.linalg.norm(a) * np.linalg.norm(b) * np.linalg.norm(c)
        assert np.abs(lhs - rhs).max() <= 1e-10 * scale


def test_row_norms_examples():
    got = linalg.row_norms([[3, 0], [0, 1], [2, 2]])
    assert np.allclose(got, [3, 1, np.sqrt(8)], atol=1e-15)
    assert np.array_equal(linalg.row_norms(np.zeros((3, 4))), np.zeros(3))
    a, b = 1.25, -7.5
    assert linalg.row_norms([[a, b]])[0] == pytest.approx((a * a + b * b) ** 0.5, rel=1e-15)


def test_col_norms():
    assert np.allclose(linalg.col_norms([[3, 0], [0, 1], [2, 2]]), [np.sqrt(13), np.sqrt(5)])


def test_topk_examples():
    assert linalg.topk_indices([3, 1, 2.828], 2).tolist() == [0, 2]
    assert linalg.topk_indices([5, 5, 5], 2).tolist() == [0, 1]
    v = np.array([0.3, 2.0, -1.0, 0.7])
    assert linalg.topk_indices(v, 4).tolist() == [1, 3, 0, 2]
    with pytest.raises(InvalidInputError):
        linalg.topk_indices(v, 5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=12), st.data())
def test_topk_ties_prefer_lower_index(values, data):
    k = data.draw(st.integers(0, len(values)))
    got = linalg.topk_indices(values, k).tolist()
    want = sorted(range(len(values)), key=lambda i: (-values[i], i))[:k]
    assert got == want


# -- eigensolver and truncated SVD -------------------------------------------


def test_jacobi_eigh_matches_numpy():
    rng = linalg.make_rng(3)
    for n in (1, 2, 5, 9, 16):
        a = rng.standard_normal((n, n))
        s = a + a.T
        vals, vecs = linalg.jacobi_eigh(s)
        assert np.allclose(vals, np.sort(np.linalg.eigvalsh(s))[::-1], atol=1e-10)
        assert np.allclose(vecs.T @ vecs, np.eye(n), atol=1e-10)
        assert np.allclose(s @ vecs, vecs * vals, atol=1e-9)


def test_topr_svd_left_diagonal():
    p = linalg.topr_svd_left(np.diag([3.0, 2.0, 1.0]), 2)
    span = p @ p.T
    assert np.allclose(span, np.diag([1.0, 1.0, 0.0]), atol=1e-10)


def test_topr_svd_left_rank_one_recovery():
    rng = linalg.make_rng(4)
    g = np.outer(rng.standard_normal(6), rng.standard_normal(4))
    p = linalg.topr_svd_left(g, 1)
    assert np.abs(p @ p.T @ g - g).max() < 1e-8


@pytest.mark.parametrize("shape", [(6, 4), (4, 6), (7, 7), (12, 3)])
def test_topr_svd_left_orthonormal_and_optimal(shape):
    rng = linalg.make_rng(sum(shape))
    g = rng.standard_normal(shape)
    sv = np.linalg.svd(g, compute_uv=False)
    for r in range(1, min(shape) + 1):
        p = linalg.topr_svd_left(g, r)
        assert p.shape == (shape[0], r)
        assert np.abs(p.T @ p - np.eye(r)).max() < 1e-8
        resid = np.linalg.norm(p @ p.T @ g - g)
        best = np.sqrt(np.sum(sv[r:] ** 2))
        assert resid <= best + 1e-6 * np.linalg.norm(g)


def test_topr_svd_left_rejects_rank():
    with pytest.raises(InvalidInputError):
        linalg.topr_svd_left(np.ones((3, 2)), 3)
    with pytest.raises(InvalidInputError):
        linalg.topr_svd_left(np.ones((3, 2)), 0)


def _charpoly_roots_by_bisection(s):
    """Eigenvalues of a small SPD matrix from sign changes of det(s - x I)."""
    n = s.shape[0]
    f = lambda x: np.linalg.det(s - x * np.eye(n))  # noqa: E731
    hi = np.abs(s).sum() + 1.0
    grid = np.linspace(-1e-9, hi, 40001)
    vals = np.array([f(x) for x in grid])
    roots = []
    for i in np.nonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]:
        a, b = grid[i], grid[i + 1]
        for _ in range(200):
            mid = 0.5 * (a + b)
            if np.sign(f(mid)) == np.sign(f(a)):
                a = mid
            else:
                b = mid
        roots.append(0.5 * (a + b))
    return np.sort(roots)[::-1]


def test_singular_values_match_characteristic_polynomial_oracle():
    rng = linalg.make_rng(5)
    g = rng.standard_normal((6, 4))
    oracle = np.sqrt(_charpoly_roots_by_bisection(g.T @ g))
    assert oracle.size == 4
    assert np.allclose(linalg.singular_values(g), oracle, atol=1e-8)
    p = linalg.topr_svd_left(g, 2)
    assert np.allclose(np.linalg.svd(p.T @ g, compute_uv=False), oracle[:2], atol=1e-8)


# -- sampling -----------------------------------------------------------------


def test_sample_degenerate_distribution():
    rng = linalg.make_rng(0)
    for _ in range(50):
        assert linalg.sample_multinomial([1, 0, 0], 2, True, rng).tolist() == [0, 0]


def test_sample_fair_coin_frequency():
    rng = linalg.make_rng(6)
    draws = linalg.sample_multinomial([0.5, 0.5], 1_000_000, True, rng)
    assert abs(np.mean(draws == 0) - 0.5) <= 0.0016


def test_sample_frequencies_within_three_standard_errors():
    q = np.array([0.439, 0.146, 0.415])
    rng = linalg.make_rng(7)
    n = 1_000_000
    freq = np.bincount(linalg.sample_multinomial(q, n, True, rng), minlength=3) / n
    se = np.sqrt(q * (1 - q) / n)
    assert np.all(np.abs(freq - q) <= 3 * se)


def test_sample_without_replacement_exhausts_support():
    rng = linalg.make_rng(8)
    q = [0.439, 0.146, 0.415]
    for _ in range(20):
        assert sorted(linalg.sample_multinomial(q, 3, False, rng).tolist()) == [0, 1, 2]
    with pytest.raises(InvalidInputError):
        linalg.sample_multinomial([0.5, 0.5, 0.0], 3, False, rng)


def test_sample_nr_is_sequential_renormalization():
    # with q = [0.5, 0.25, 0.25] the first pick is 0 half the time, and then
    # the second pick splits the remaining mass evenly
    rng = linalg.make_rng(9)
    n = 40_000
    pairs = np.array([linalg.sample_multinomial([0.5, 0.25, 0.25], 2, False, rng) for _ in range(n)])
    p01 = np.mean((pairs[:, 0] == 0) & (pairs[:, 1] == 1))
    p10 = np.mean((pairs[:, 0] == 1) & (pairs[:, 1] == 0))
    assert abs(p01 - 0.25) < 0.01
    assert abs(p10 - 0.25 * 2 / 3) < 0.01


@pytest.mark.parametrize("q", [[0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0], []])
def test_sample_rejects_bad_distributions(q):
    with pytest.raises(InvalidInputError):
        linalg.sample_multinomial(q, 1, True, linalg.make_rng(0))


def test_sampling_is_reproducible():
    a = linalg.sample_multinomial([0.2, 0.3, 0.5], 100, True, linalg.make_rng(42))
    b = linalg.sample_multinomial([0.2, 0.3, 0.5], 100, True, linalg.make_rng(42))
    assert np.array_equal(a, b)
    x = linalg.derive_rng(3, 1).random(5)
    assert np.array_equal(x, linalg.derive_rng(3, 1).random(5))
    assert not np.array_equal(x, linalg.derive_rng(3, 2).random(5))


def test_gaussian_fill_statistics():
    rng = linalg.make_rng(10)
    z = linalg.gaussian_fill(1000, 1000, 0.25, rng)
    assert 0.245 <= z.var() <= 0.255
    assert abs(z.mean()) < 4 * 0.5 / 1000
    assert np.array_equal(linalg.gaussian_fill(3, 2, 1.0, linalg.make_rng(1)), linalg.gaussian_fill(3, 2, 1.0, linalg.make_rng(1)))
    assert np.isfinite(linalg.gaussian_fill(1, 1, 1.0, rng)).all()
    with pytest.raises(InvalidInputError):
        linalg.gaussian_fill(2, 2, 0.0, rng)


def test_allocation_audit_tracks_peak():
    with linalg.audit_allocations() as audit:
        linalg.matmul(np.ones((2, 3)), np.ones((3, 4)), label="a")
        linalg.matmul(np.ones((5, 3)), np.ones((3, 1)), label="b")
    assert audit.peak == 8 and audit.peak_label == "a"
    assert audit.saw_shape((5, 1)) and not audit.saw_shape((3, 3))
