"""Adam, learning-rate schedules and the subspace-optimization drivers.

:class:`MesoOptimizer` runs the memory-efficient loop over every projectable
layer of a :class:`~grass.model.TinyModel`: every ``k_freq`` steps it
recomputes the projection from the full gradient and applies the state
policy; on all other steps sparse kinds use the fused projected backward and
write the update into the selected rows only. :func:`reference_train_with_A`
is the slow twin that keeps the subspace variable ``A`` explicitly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import linalg
from .errors import InvalidInputError
from .model import LinearLayer, LoRALayer, TinyModel
from .projection import (
    ProjectionKind,
    SparseProjection,
    compute_p,
    identity_projection,
    project,
    reconstruct,
)

# elementwise operations per parameter in adam_update:
# M: 3, V: 4, two bias corrections: 2, sqrt, +eps, divide, times -lr: 4
ADAM_OPS_PER_ELEMENT = 13


@dataclass
class AdamState:
    m1: np.ndarray
    m2: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(shape, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(shape), np.zeros(shape), 0, beta1, beta2, eps)


def adam_update(state: AdamState, grad, lr: float):
    """One Adam step. Returns the new state and the additive update
    ``-lr * M_hat / (sqrt(V_hat) + eps)``; the input state is not modified."""
    grad = np.asarray(grad, dtype=linalg.DTYPE)
    if grad.shape != state.m1.shape:
        raise InvalidInputError(f"gradient shape {grad.shape} does not match state {state.m1.shape}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m1 = b1 * state.m1 + (1.0 - b1) * grad
    m2 = b2 * state.m2 + (1.0 - b2) * (grad * grad)
    m_hat = m1 / (1.0 - b1**t)
    v_hat = m2 / (1.0 - b2**t)
    update = -lr * m_hat / (np.sqrt(v_hat) + state.eps)
    linalg.record_ops("opt", ADAM_OPS_PER_ELEMENT * grad.size)
    return replace(state, m1=m1, m2=m2, t=t), update


class StatePolicy(str, enum.Enum):
    RESET = "reset"
    KEEP = "keep"
    FLORA_TRANSFER = "flora_transfer"


def update_state_policy(state: AdamState, old_p, new_p, policy) -> AdamState:
    """Adjust the subspace optimizer state after a projection refresh.

    ``flora_transfer`` maps the first moment through ``new_p^T old_p`` and
    zeroes the second moment, keeping the step count.
    """
    policy = StatePolicy(policy)
    if policy is StatePolicy.KEEP:
        return state
    if policy is StatePolicy.RESET or old_p is None:
        return adam_init(state.m1.shape, state.beta1, state.beta2, state.eps)
    if old_p.r != state.m1.shape[0] or new_p.m != old_p.m:
        raise InvalidInputError("projection shapes do not match the optimizer state")
    m1 = project(new_p, reconstruct(old_p, state.m1))
    return replace(state, m1=m1, m2=np.zeros_like(m1))


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class Schedule:
    """Linear warmup, cosine decay to ``floor * base_lr``, and a linear re-ramp
    for ``refresh_warmup`` steps after every projection refresh (``t >= k_freq``).
    The re-ramp multiplies the cosine value."""

    base_lr: float
    total: int
    warmup: int = 0
    refresh_warmup: int = 0
    k_freq: int = 0
    floor: float = 0.1


def lr_at(schedule: Schedule, t: int) -> float:
    if t < 0:
        raise InvalidInputError("step must be nonnegative")
    s = schedule
    if s.warmup > 0 and t < s.warmup:
        lr = s.base_lr * t / s.warmup
    else:
        span = max(s.total - s.warmup, 1)
        progress = min(max((t - s.warmup) / span, 0.0), 1.0)
        lr = s.base_lr * (s.floor + (1.0 - s.floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))
    if s.refresh_warmup > 0 and s.k_freq > 0 and t >= s.k_freq:
        since = t % s.k_freq
        if since < s.refresh_warmup:
            lr *= (since + 1) / s.refresh_warmup
    return max(lr, 0.0)


# ---------------------------------------------------------------------------
# drivers


@dataclass
class MesoConfig:
    r: int = 8
    k_freq: int = 200
    alpha: float = 0.25
    kind: ProjectionKind = ProjectionKind.TOP_R
    state_policy: StatePolicy = StatePolicy.RESET
    side_auto: bool = True
    fused: bool = True
    full_layers: tuple = ()
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.kind = ProjectionKind(self.kind)
        self.state_policy = StatePolicy(self.state_policy)
        if self.r < 1 or self.k_freq < 1 or not self.alpha > 0:
            raise InvalidInputError("need r >= 1, k_freq >= 1 and alpha > 0")

    def is_refresh(self, t: int) -> bool:
        return t % self.k_freq == 0


@dataclass
class LayerSlot:
    """Per-layer subspace state owned by :class:`MesoOptimizer`."""

    layer: LinearLayer
    transposed: bool
    state: AdamState
    projection: object = None
    history: list = field(default_factory=list)

    @property
    def side(self) -> int:
        return self.layer.w.shape[1] if self.transposed else self.layer.w.shape[0]

    def oriented_grad(self) -> np.ndarray:
        g = self.layer.grad_w
        return g.T if self.transposed else g


class FullAdam:
    """Plain Adam on every layer's full gradient."""

    def __init__(self, model: TinyModel, beta1=0.9, beta2=0.999, eps=1e-8):
        self.model = model
        self.states = [adam_init(layer.w.shape, beta1, beta2, eps) for layer in model.layers]

    def prepare(self, t: int) -> None:
        for layer in self.model.layers:
            layer.grad_mode = "full"

    def apply_full(self, i: int, grad, lr: float) -> None:
        self.states[i], update = adam_update(self.states[i], grad, lr)
        layer = self.model.layers[i]
        layer.w += update
        linalg.record_ops("update", update.size)

    def step(self, t: int, lr: float) -> None:
        for i, layer in enumerate(self.model.layers):
            self.apply_full(i, layer.grad_w, lr)


class MesoOptimizer:
    """Subspace optimizer over the linear layers of a model.

    Layers whose projected side is smaller than ``r``, and those listed in
    ``config.full_layers``, are trained with plain Adam instead. ``rng``
    drives every random projection draw; two optimizers built with equal
    seeds and fed equal gradients draw identical projections.
    """

    def __init__(self, model: TinyModel, config: MesoConfig, rng):
        self.model = model
        self.config = config
        self.rng = rng
        self.slots: list[LayerSlot | None] = []
        self.full_states: dict[int, AdamState] = {}
        c = config
        for i, layer in enumerate(model.layers):
            m, n = layer.w.shape
            transposed = bool(c.side_auto and m > n)
            side = n if transposed else m
            r = side if c.kind is ProjectionKind.FULL_RANK else c.r
            if i in c.full_layers or (r > min(m, n) and c.kind is not ProjectionKind.FULL_RANK):
                self.slots.append(None)
                self.full_states[i] = adam_init(layer.w.shape, c.beta1, c.beta2, c.eps)
                continue
            other = m if transposed else n
            self.slots.append(LayerSlot(layer, transposed, adam_init((r, other), c.beta1, c.beta2, c.eps)))

    # -- per-step protocol ------------------------------------------------

    def prepare(self, t: int) -> None:
        """Choose each layer's backward mode for step ``t``."""
        refresh = self.config.is_refresh(t)
        for i, layer in enumerate(self.model.layers):
            slot = self.slots[i]
            if slot is None or refresh or not self.config.kind.is_sparse or not self.config.fused:
                layer.grad_mode = "full"
            else:
                layer.grad_mode = "projected"
                layer.projection = slot.projection
                layer.transposed = slot.transposed

    def new_projection(self, slot: LayerSlot, g=None, norms=None):
        kind = self.config.kind
        if kind is ProjectionKind.FULL_RANK:
            return identity_projection(slot.side)
        if kind is ProjectionKind.FROZEN_TOP_R and slot.projection is not None:
            return slot.projection
        return compute_p(g, kind, self.config.r, self.rng, norms=norms)

    def set_projection(self, slot: LayerSlot, p) -> None:
        slot.state = update_state_policy(slot.state, slot.projection, p, self.config.state_policy)
        slot.projection = p
        slot.history.append(p)

    def compressed_grad(self, slot: LayerSlot, t: int) -> np.ndarray:
        """``G_C`` for this step, refreshing the projection first when due."""
        if self.config.is_refresh(t):
            g = slot.oriented_grad()
            self.set_projection(slot, self.new_projection(slot, g))
            return project(slot.projection, g)
        if slot.layer.gc is not None:
            return slot.layer.gc
        return project(slot.projection, slot.oriented_grad())

    def apply(self, slot: LayerSlot, gc, lr: float) -> None:
        slot.state, delta = adam_update(slot.state, gc, lr)
        p, alpha = slot.projection, self.config.alpha
        if isinstance(p, SparseProjection):
            slot.layer.apply_sparse_update(p, delta, alpha, slot.transposed)
            return
        # alpha is folded into the back-projection, which the cost table counts as rmn
        step = reconstruct(p, alpha * delta)
        slot.layer.w += step.T if slot.transposed else step
        linalg.record_ops("update", step.size)

    def apply_full(self, i: int, grad, lr: float) -> None:
        self.full_states[i], update = adam_update(self.full_states[i], grad, lr)
        self.model.layers[i].w += update
        linalg.record_ops("update", update.size)

    def step(self, t: int, lr: float) -> None:
        for i, slot in enumerate(self.slots):
            if slot is None:
                self.apply_full(i, self.model.layers[i].grad_w, lr)
            else:
                self.apply(slot, self.compressed_grad(slot, t), lr)


def meso_step(model: TinyModel, opt, x, target, t: int, lr: float) -> float:
    """One training step: backward mode selection, forward/backward, update."""
    opt.prepare(t)
    loss = model.loss_and_backward(x, target)
    opt.step(t, lr)
    return loss


# ---------------------------------------------------------------------------
# reference with an explicit subspace variable


def reference_train_with_A(model: TinyModel, config: MesoConfig, rng, batches, schedule: Schedule):
    """Run the subspace loop keeping ``W = W0 + P A`` explicitly.

    Every layer is materialized densely; on each refresh ``P A`` is merged
    into ``W0`` and ``A`` restarts at zero. Yields ``(t, loss, weights, A)``
    after each step, with ``weights`` the list of effective layer weights.
    """
    c = config
    slots = MesoOptimizer(model, c, rng)
    w0 = [layer.w.copy() for layer in model.layers]
    amats = [None] * len(model.layers)
    dense_p = [None] * len(model.layers)
    for t, (x, target) in enumerate(batches):
        lr = lr_at(schedule, t)
        for i, slot in enumerate(slots.slots):
            if slot is not None and c.is_refresh(t) and amats[i] is not None:
                merged = dense_p[i] @ amats[i]
                w0[i] = w0[i] + (merged.T if slot.transposed else merged)
                amats[i] = np.zeros_like(amats[i])
                model.layers[i].w = w0[i].copy()
        for layer in model.layers:
            layer.grad_mode = "full"
        loss = model.loss_and_backward(x, target)
        for i, slot in enumerate(slots.slots):
            layer = model.layers[i]
            if slot is None:
                slots.apply_full(i, layer.grad_w, lr)
                w0[i] = layer.w.copy()
                continue
            g = slot.oriented_grad()
            if c.is_refresh(t):
                slots.set_projection(slot, slots.new_projection(slot, g))
                dense_p[i] = slot.projection.to_dense()
                if amats[i] is None:
                    amats[i] = np.zeros(slot.state.m1.shape)
            gc = dense_p[i].T @ g
            slot.state, delta = adam_update(slot.state, gc, lr)
            amats[i] = amats[i] + c.alpha * delta
            eff = dense_p[i] @ amats[i]
            layer.w = w0[i] + (eff.T if slot.transposed else eff)
        yield t, loss, [layer.w.copy() for layer in model.layers], [None if a is None else a.copy() for a in amats]


# ---------------------------------------------------------------------------
# LoRA baselines


class LoRAOptimizer:
    """Adam over the adaptor factors of :class:`LoRALayer` layers; plain Adam
    over any :class:`LinearLayer`. With ``merge_every`` set it behaves like
    ReLoRA: merge, re-draw the adaptor and reset its state periodically."""

    def __init__(self, model: TinyModel, rng, merge_every: int = 0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.model = model
        self.rng = rng
        self.merge_every = merge_every
        self.hyper = (beta1, beta2, eps)
        self.states = []
        for layer in model.layers:
            self.states.append(self._fresh(layer))

    def _fresh(self, layer):
        if isinstance(layer, LoRALayer):
            return (adam_init(layer.bmat.shape, *self.hyper), adam_init(layer.amat.shape, *self.hyper))
        return adam_init(layer.w.shape, *self.hyper)

    def prepare(self, t: int) -> None:
        if self.merge_every and t > 0 and t % self.merge_every == 0:
            for i, layer in enumerate(self.model.layers):
                if isinstance(layer, LoRALayer):
                    layer.merge(self.rng)
                    self.states[i] = self._fresh(layer)
        for layer in self.model.layers:
            if isinstance(layer, LinearLayer):
                layer.grad_mode = "full"

    def step(self, t: int, lr: float) -> None:
        for i, layer in enumerate(self.model.layers):
            if isinstance(layer, LoRALayer):
                sb, sa = self.states[i]
                sb, ub = adam_update(sb, layer.grad_b, lr)
                sa, ua = adam_update(sa, layer.grad_a, lr)
                layer.bmat += ub
                layer.amat += ua
                linalg.record_ops("update", ub.size + ua.size)
                self.states[i] = (sb, sa)
            else:
                self.states[i], u = adam_update(self.states[i], layer.grad_w, lr)
                layer.w += u
                linalg.record_ops("update", u.size)
