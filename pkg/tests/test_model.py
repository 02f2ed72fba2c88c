import numpy as np
import pytest

from grass import linalg
from grass.errors import InvalidInputError, StateError
from grass.model import (
    LinearLayer,
    LoRALayer,
    TinyModel,
    lora_backward,
    lora_forward,
    relora_merge,
    softmax_xent,
)
from grass.projection import ProjectionKind, SparseProjection, compute_p_sparse, project, reconstruct


def half_sq(layer, x):
    y = layer.forward(x, train=False)
    return 0.5 * np.sum(y * y)


def central_diff(f, w, h=1e-5):
    g = np.zeros_like(w)
    for idx in np.ndindex(*w.shape):
        old = w[idx]
        w[idx] = old + h
        up = f()
        w[idx] = old - h
        down = f()
        w[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_forward_examples():
    assert np.array_equal(LinearLayer(np.eye(2)).forward([[1, 2]]), [[1, 2]])
    assert np.array_equal(LinearLayer([[1, 0], [1, 1]]).forward([[1, 1]]), [[1, 2]])
    assert not LinearLayer(np.ones((3, 2))).forward(np.zeros((4, 2))).any()
    with pytest.raises(InvalidInputError):
        LinearLayer(np.ones((3, 2))).forward(np.ones((1, 3)))


def test_backward_full_examples():
    layer = LinearLayer(np.ones((2, 2)))
    layer.forward([[3, 4]])
    gw, gi = layer.backward_full([[1, 2]])
    assert np.array_equal(gw, [[3, 4], [6, 8]])
    assert np.array_equal(gi, [[3, 3]])
    gw, gi = layer.backward_full(np.zeros((1, 2)))
    assert not gw.any() and not gi.any()
    with pytest.raises(StateError):
        LinearLayer(np.ones((2, 2))).backward_full([[1, 1]])


def test_backward_full_finite_differences():
    rng = linalg.make_rng(0)
    layer = LinearLayer(rng.standard_normal((4, 3)))
    x = rng.standard_normal((5, 3))
    y = layer.forward(x)
    gw, gi = layer.backward_full(y)
    assert rel_err(gw, central_diff(lambda: half_sq(layer, x), layer.w)) < 1e-6
    assert rel_err(gi, central_diff(lambda: half_sq(layer, x), x)) < 1e-6


def test_backward_projected_full_selection_equals_full():
    rng = linalg.make_rng(1)
    layer = LinearLayer(rng.standard_normal((3, 2)))
    x, go = rng.standard_normal((2, 2)), rng.standard_normal((2, 3))
    layer.forward(x)
    gw, _ = layer.backward_full(go)
    gc, _ = layer.backward_projected(go, SparseProjection(3, np.arange(3), np.ones(3)))
    assert np.allclose(gc, gw, atol=1e-14)
    p = compute_p_sparse(gw, ProjectionKind.TOP_R, 2)
    gc, _ = layer.backward_projected(go, p)
    assert np.abs(gc - project(p, gw)).max() < 1e-10
    gc, _ = layer.backward_projected(np.zeros((2, 3)), p)
    assert not gc.any()


def test_backward_projected_flops_and_audit():
    rng = linalg.make_rng(2)
    m, n, b, r = 40, 30, 4, 5
    layer = LinearLayer(rng.standard_normal((m, n)))
    layer.forward(rng.standard_normal((b, n)))
    p = compute_p_sparse(None, ProjectionKind.UNIFORM_NR, r, rng, norms=np.ones(m))
    with linalg.count_flops() as c, linalg.audit_allocations() as audit:
        layer.backward_projected(rng.standard_normal((b, m)), p)
    assert c.by_label["proj_matmul"] == r * b * n
    assert c.ops == r * n
    assert 2 * c.by_label["proj_matmul"] + r * n == 2 * r * b * n + r * n
    assert not audit.saw_shape((m, n)) and not audit.saw_shape((n, m))


def test_projected_associativity_and_peak_over_random_shapes():
    rng = linalg.make_rng(3)
    for _ in range(100):
        b = int(rng.integers(1, 9))
        m, n = (int(v) for v in rng.integers(2, 12, size=2))
        r = int(rng.integers(1, m + 1))
        layer = LinearLayer(rng.standard_normal((m, n)))
        x, go = rng.standard_normal((b, n)), rng.standard_normal((b, m))
        layer.forward(x)
        p = compute_p_sparse(None, ProjectionKind.MULTNORM_R, r, rng, norms=rng.random(m) + 0.1)
        with linalg.audit_allocations() as audit:
            gc, _ = layer.backward_projected(go, p)
        dense = p.to_dense().T @ (go.T @ x)
        assert np.abs(gc - dense).max() <= 1e-10 * max(1.0, np.abs(dense).max())
        # the grad_in product b x n is part of backward too
        assert audit.peak <= max(r * b, r * n, b * n)


def test_projected_composed_with_reconstruct_finite_differences():
    rng = linalg.make_rng(4)
    layer = LinearLayer(rng.standard_normal((4, 3)))
    x = rng.standard_normal((3, 3))
    y = layer.forward(x)
    p = SparseProjection(4, np.array([1, 3]), np.ones(2))
    gc, _ = layer.backward_projected(y, p)
    fd = central_diff(lambda: half_sq(layer, x), layer.w)
    assert rel_err(reconstruct(p, gc), p.to_dense() @ p.to_dense().T @ fd) < 1e-5


def test_backward_projected_transposed():
    rng = linalg.make_rng(5)
    layer = LinearLayer(rng.standard_normal((6, 3)))
    x, go = rng.standard_normal((4, 3)), rng.standard_normal((4, 6))
    layer.forward(x)
    gw, _ = layer.backward_full(go)
    p = SparseProjection(3, np.array([2, 0]), np.array([1.5, 0.5]))
    gc, _ = layer.backward_projected(go, p, transposed=True)
    assert gc.shape == (2, 6)
    assert np.allclose(gc, project(p, gw.T), atol=1e-12)
    with pytest.raises(InvalidInputError):
        layer.backward_projected(go, p)


def test_apply_sparse_update_examples():
    layer = LinearLayer(np.zeros((3, 2)))
    p = SparseProjection(3, np.array([0, 2]), np.ones(2))
    layer.apply_sparse_update(p, np.zeros((2, 2)), 0.25)
    assert not layer.w.any()
    layer.apply_sparse_update(p, [[4, 0], [0, 4]], 0.25)
    assert np.array_equal(layer.w, [[1, 0], [0, 0], [0, 1]])


def test_apply_sparse_update_dense_oracle_and_untouched_rows():
    rng = linalg.make_rng(6)
    w = rng.standard_normal((5, 3))
    layer = LinearLayer(w)
    p = SparseProjection(5, np.array([1, 1, 4]), np.array([0.5, 2.0, 1.0]))
    delta = rng.standard_normal((3, 3))
    with linalg.count_flops() as c:
        layer.apply_sparse_update(p, delta, 0.25)
    assert c.ops == 2 * 3 * 3
    assert np.abs(layer.w - (w + 0.25 * reconstruct(p, delta))).max() < 1e-12
    for row in (0, 2, 3):
        assert np.array_equal(layer.w[row], w[row])
    before = layer.w.copy()
    layer.apply_sparse_update(p, delta, 0.0)
    assert np.array_equal(layer.w, before)


def test_apply_sparse_update_transposed():
    layer = LinearLayer(np.zeros((3, 2)))
    p = SparseProjection(2, np.array([1]), np.array([2.0]))
    layer.apply_sparse_update(p, [[1, 2, 3]], 1.0, transposed=True)
    assert np.array_equal(layer.w, [[0, 2], [0, 4], [0, 6]])
    with pytest.raises(InvalidInputError):
        layer.apply_sparse_update(p, [[1, 2]], 1.0)


def test_lora_zero_adaptor_matches_frozen_path():
    rng = linalg.make_rng(7)
    w0 = rng.standard_normal((4, 3))
    layer = LoRALayer(w0, 2, rng)
    x = rng.standard_normal((5, 3))
    assert np.allclose(lora_forward(layer, x), x @ w0.T, atol=1e-14)


def test_lora_gradients_finite_differences():
    rng = linalg.make_rng(8)
    layer = LoRALayer(rng.standard_normal((4, 3)), 2, rng)
    layer.amat = rng.standard_normal((2, 3))
    x = rng.standard_normal((3, 3))
    y = lora_forward(layer, x)
    gb, ga, gi = lora_backward(layer, y)
    assert gb.shape == (4, 2) and ga.shape == (2, 3)
    f = lambda: half_sq(layer, x)  # noqa: E731
    assert rel_err(gb, central_diff(f, layer.bmat)) < 1e-6
    assert rel_err(ga, central_diff(f, layer.amat)) < 1e-6
    assert rel_err(gi, central_diff(f, x)) < 1e-6


def test_lora_rank_one_hand_case():
    layer = LoRALayer(np.zeros((1, 1)), 1, linalg.make_rng(0))
    layer.bmat[:] = 2.0
    layer.amat[:] = 3.0
    y = lora_forward(layer, [[1.0]])
    assert y[0, 0] == 6.0
    gb, ga, _ = lora_backward(layer, y)
    # d/dB of 0.5 (B A x)^2 = (B A x) A x
    assert gb[0, 0] == 18.0 and ga[0, 0] == 12.0


def test_relora_merge():
    rng = linalg.make_rng(9)
    layer = LoRALayer(rng.standard_normal((4, 3)), 2, rng)
    layer.amat = rng.standard_normal((2, 3))
    x = rng.standard_normal((5, 3))
    before = lora_forward(layer, x)
    oracle = layer.w0 + layer.bmat @ layer.amat
    relora_merge(layer, rng)
    assert np.abs(lora_forward(layer, x) - before).max() < 1e-12
    assert np.abs(layer.w0 - oracle).max() < 1e-12
    assert not layer.amat.any()
    w0 = layer.w0.copy()
    relora_merge(layer, rng)
    assert np.array_equal(layer.w0, w0)


def test_softmax_xent_soft_and_hard_targets():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    hard, gh = softmax_xent(logits, np.array([1, 2]))
    soft, gs = softmax_xent(logits, np.eye(3)[[1, 2]])
    assert hard == pytest.approx(soft, abs=1e-15)
    assert np.allclose(gh, gs)
    assert softmax_xent(np.zeros((1, 4)), np.full((1, 4), 0.25))[0] == pytest.approx(np.log(4))


@pytest.mark.parametrize("loss,linear_embed", [("mse", False), ("xent", False), ("xent", True)])
def test_tiny_model_gradients(loss, linear_embed):
    rng = linalg.make_rng(10)
    model = TinyModel.build([3, 4, 4, 2], rng, loss=loss, linear_embed=linear_embed)
    x = rng.standard_normal((5, 3))
    target = rng.standard_normal((5, 2)) if loss == "mse" else rng.integers(0, 2, size=5)
    model.loss_and_backward(x, target)
    for layer in model.layers:
        fd = central_diff(lambda: model.evaluate(x, target), layer.w)
        assert rel_err(layer.grad_w, fd) < 1e-6


def test_tiny_model_shape_checks():
    with pytest.raises(InvalidInputError):
        TinyModel([LinearLayer(np.ones((3, 2))), LinearLayer(np.ones((2, 4)))])
    with pytest.raises(InvalidInputError):
        TinyModel([LinearLayer(np.ones((3, 2)))], loss="hinge")
