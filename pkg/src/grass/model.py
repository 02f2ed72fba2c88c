"""Linear layers with full, projected and LoRA backward passes, and a small
tanh MLP built from them.

Layers use the ``y = x W^T`` orientation, so the weight gradient of an
``m x n`` layer is ``grad_out^T x`` with ``grad_out`` of shape ``b x m`` and
``x`` of shape ``b x n``.
"""

from __future__ import annotations

import numpy as np

from . import linalg
from .errors import InvalidInputError, StateError
from .projection import SparseProjection


class LinearLayer:
    """Dense ``m x n`` weight with a configurable backward pass.

    ``grad_mode`` is ``"full"`` (materialize ``grad_w``) or ``"projected"``
    (produce only ``gc = P^T grad_w`` through the fused path). When
    ``transposed`` is set the projection acts on the input dimension, i.e. on
    the rows of ``grad_w^T``.
    """

    def __init__(self, w, name: str = "linear"):
        self.w = linalg.as_mat(w).copy()
        self.name = name
        self.cached_input = None
        self.grad_mode = "full"
        self.projection = None
        self.transposed = False
        self.grad_w = None
        self.gc = None

    @property
    def shape(self):
        return self.w.shape

    def forward(self, x, train: bool = True) -> np.ndarray:
        x = linalg.as_mat(x, "input")
        if x.shape[1] != self.w.shape[1]:
            raise InvalidInputError(f"{self.name}: input has {x.shape[1]} columns, expected {self.w.shape[1]}")
        if train:
            self.cached_input = x
        return linalg.matmul(x, self.w.T, label="forward")

    def _cached(self) -> np.ndarray:
        if self.cached_input is None:
            raise StateError(f"{self.name}: backward called before forward")
        return self.cached_input

    def _check_grad_out(self, grad_out) -> np.ndarray:
        grad_out = linalg.as_mat(grad_out, "grad_out")
        x = self._cached()
        if grad_out.shape != (x.shape[0], self.w.shape[0]):
            raise InvalidInputError(
                f"{self.name}: grad_out shape {grad_out.shape}, expected {(x.shape[0], self.w.shape[0])}"
            )
        return grad_out

    def backward_full(self, grad_out):
        grad_out = self._check_grad_out(grad_out)
        grad_w = linalg.matmul(grad_out.T, self._cached(), label="grad_w")
        grad_in = linalg.matmul(grad_out, self.w, label="grad_in")
        return grad_w, grad_in

    def backward_projected(self, grad_out, p: SparseProjection, transposed: bool = False):
        """``gc = rho ((B grad_out^T) x)`` without forming the ``m x n`` gradient.

        Gathers ``r`` rows of ``grad_out^T``, multiplies the ``r x b`` result
        by ``x`` and scales the rows. With ``transposed`` the roles of
        ``grad_out`` and ``x`` swap and ``gc`` is ``r x m``.
        """
        grad_out = self._check_grad_out(grad_out)
        x = self._cached()
        left, right = (x, grad_out) if transposed else (grad_out, x)
        if p.m != left.shape[1]:
            raise InvalidInputError(f"{self.name}: projection over {p.m} rows, layer side has {left.shape[1]}")
        gathered = left.T[p.sigma]
        linalg.note_alloc(gathered.shape, "gather")
        gc = linalg.matmul(gathered, right, label="proj_matmul")
        gc *= p.rho[:, None]
        linalg.record_ops("scale", gc.size)
        grad_in = linalg.matmul(grad_out, self.w, label="grad_in")
        return gc, grad_in

    def apply_sparse_update(self, p: SparseProjection, delta, alpha: float, transposed: bool = False) -> None:
        """Add ``alpha * P delta`` touching only the selected rows (or columns)."""
        delta = linalg.as_mat(delta, "delta")
        side = self.w.shape[1] if transposed else self.w.shape[0]
        other = self.w.shape[0] if transposed else self.w.shape[1]
        if p.m != side or delta.shape != (p.r, other):
            raise InvalidInputError(f"{self.name}: update of shape {delta.shape} does not fit projection")
        step = (alpha * p.rho)[:, None] * delta
        if transposed:
            wt = self.w.T
            np.add.at(wt, p.sigma, step)
        else:
            np.add.at(self.w, p.sigma, step)
        linalg.record_ops("update", 2 * delta.size)

    def backward(self, grad_out) -> np.ndarray:
        """Backward according to ``grad_mode``; stores ``grad_w`` or ``gc``."""
        if self.grad_mode == "projected":
            self.gc, grad_in = self.backward_projected(grad_out, self.projection, self.transposed)
            self.grad_w = None
        else:
            self.grad_w, grad_in = self.backward_full(grad_out)
            self.gc = None
        return grad_in

    def state_dict(self) -> dict:
        return {f"{self.name}.w": self.w}


class LoRALayer:
    """Frozen ``w0`` plus a trainable low-rank correction ``bmat @ amat``."""

    def __init__(self, w0, r: int, rng, name: str = "lora"):
        self.w0 = linalg.as_mat(w0).copy()
        m, n = self.w0.shape
        if not 1 <= r <= min(m, n):
            raise InvalidInputError(f"LoRA rank {r} out of range for {self.w0.shape}")
        self.r = r
        self.name = name
        self.bmat = linalg.gaussian_fill(m, r, 1.0 / r, rng)
        self.amat = np.zeros((r, n))
        self.cached_input = None
        self.cached_xa = None
        self.grad_b = None
        self.grad_a = None

    @property
    def shape(self):
        return self.w0.shape

    def effective_weight(self) -> np.ndarray:
        return self.w0 + self.bmat @ self.amat

    def forward(self, x, train: bool = True) -> np.ndarray:
        x = linalg.as_mat(x, "input")
        if x.shape[1] != self.w0.shape[1]:
            raise InvalidInputError(f"{self.name}: input has {x.shape[1]} columns, expected {self.w0.shape[1]}")
        xa = linalg.matmul(x, self.amat.T, label="lora_forward")
        y = linalg.matmul(x, self.w0.T, label="forward") + linalg.matmul(xa, self.bmat.T, label="lora_forward")
        if train:
            self.cached_input, self.cached_xa = x, xa
        return y

    def backward(self, grad_out) -> np.ndarray:
        if self.cached_input is None:
            raise StateError(f"{self.name}: backward called before forward")
        grad_out = linalg.as_mat(grad_out, "grad_out")
        x = self.cached_input
        if grad_out.shape != (x.shape[0], self.w0.shape[0]):
            raise InvalidInputError(f"{self.name}: grad_out shape {grad_out.shape} mismatched")
        gb_out = linalg.matmul(grad_out, self.bmat, label="lora_grad")
        self.grad_b = linalg.matmul(grad_out.T, self.cached_xa, label="lora_grad")
        self.grad_a = linalg.matmul(gb_out.T, x, label="lora_grad")
        return linalg.matmul(grad_out, self.w0, label="grad_in") + linalg.matmul(gb_out, self.amat, label="grad_in")

    def merge(self, rng) -> None:
        """Fold ``bmat @ amat`` into ``w0`` and restart the adaptor at ``amat = 0``."""
        self.w0 = self.w0 + linalg.matmul(self.bmat, self.amat, label="merge")
        self.bmat = linalg.gaussian_fill(self.w0.shape[0], self.r, 1.0 / self.r, rng)
        self.amat = np.zeros_like(self.amat)

    def state_dict(self) -> dict:
        return {f"{self.name}.w0": self.w0, f"{self.name}.b": self.bmat, f"{self.name}.a": self.amat}


def lora_forward(layer: LoRALayer, x, train: bool = True):
    return layer.forward(x, train)


def lora_backward(layer: LoRALayer, grad_out):
    grad_in = layer.backward(grad_out)
    return layer.grad_b, layer.grad_a, grad_in


def relora_merge(layer: LoRALayer, rng) -> None:
    layer.merge(rng)


# ---------------------------------------------------------------------------
# tiny trainable model


def softmax_xent(logits, targets):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    ``targets`` holds class indices, or one probability row per example.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    targets = np.asarray(targets)
    grad = np.exp(logp)
    if targets.ndim == 2:
        loss = -(targets * logp).sum(axis=1).mean()
        grad -= targets
    else:
        loss = -logp[np.arange(b), targets].mean()
        grad[np.arange(b), targets] -= 1.0
    return float(loss), grad / b


def mse(pred, target):
    """``0.5 * mean over rows of ||pred - target||^2`` and its gradient."""
    d = pred - target
    b = pred.shape[0]
    return float(0.5 * np.sum(d * d) / b), d / b


class TinyModel:
    """Stack of linear (or LoRA) layers with tanh between hidden layers.

    With ``linear_embed`` the first layer feeds the next one without a tanh,
    acting as a per-position embedding of one-hot inputs.
    """

    def __init__(self, layers, loss: str = "mse", linear_embed: bool = False):
        if loss not in ("mse", "xent"):
            raise InvalidInputError(f"unknown loss {loss!r}")
        for a, b in zip(layers, layers[1:]):
            if a.shape[0] != b.shape[1]:
                raise InvalidInputError(f"layer {a.name} output {a.shape[0]} does not feed {b.name} input {b.shape[1]}")
        self.layers = list(layers)
        self.loss_kind = loss
        self.linear_embed = linear_embed
        self._hidden = []

    @classmethod
    def build(cls, dims, rng, loss: str = "mse", init_scale: float = 1.0, linear_embed: bool = False):
        """Layers ``dims[0] -> dims[1] -> ... -> dims[-1]`` with scaled Gaussian init."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(dims, dims[1:])):
            w = rng.standard_normal((n_out, n_in)) * (init_scale / np.sqrt(n_in))
            layers.append(LinearLayer(w, name=f"layer{i}"))
        return cls(layers, loss, linear_embed)

    def _activates(self, i: int) -> bool:
        return i < len(self.layers) - 1 and not (i == 0 and self.linear_embed)

    def forward(self, x, train: bool = True) -> np.ndarray:
        h = x
        self._hidden = []
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, train)
            if self._activates(i):
                h = np.tanh(h)
            self._hidden.append(h)
        return h

    def loss(self, out, target):
        if self.loss_kind == "xent":
            return softmax_xent(out, target)
        return mse(out, target)

    def backward(self, grad_out) -> None:
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            g = self.layers[i].backward(g)
            if i > 0 and self._activates(i - 1):
                h = self._hidden[i - 1]
                g = g * (1.0 - h * h)

    def loss_and_backward(self, x, target) -> float:
        out = self.forward(x)
        value, grad = self.loss(out, target)
        self.backward(grad)
        return value

    def evaluate(self, x, target) -> float:
        return self.loss(self.forward(x, train=False), target)[0]

    def state_dict(self) -> dict:
        out = {}
        for layer in self.layers:
            out.update(layer.state_dict())
        return out
