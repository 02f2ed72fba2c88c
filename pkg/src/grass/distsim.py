"""Deterministic in-process data-parallel simulator.

Every worker holds a full model replica and its own optimizer seeded with the
shared seed, so projection draws agree as long as the inputs to them agree.
Reductions combine worker payloads in a fixed pairwise tree, which makes the
result independent of whether workers run sequentially or on threads.

On a refresh step each worker materializes its local gradient, the column
norms are averaged, the global top columns form an aligned sketch that is
averaged in turn, and every worker derives the same projection from the
sketch's row norms. On all other steps only the ``r x n`` compressed
gradient crosses the wire.
"""

from __future__ import annotations

import copy
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import linalg
from .errors import InvalidInputError, ProtocolError
from .model import TinyModel
from .optim import FullAdam, MesoConfig, MesoOptimizer
from .projection import project


@dataclass
class CommRecord:
    step: int
    op: str
    layer: int
    floats: int
    shape: tuple


@dataclass
class CommLog:
    records: list = field(default_factory=list)

    def add(self, step: int, op: str, layer: int, shape) -> None:
        shape = tuple(int(s) for s in shape)
        self.records.append(CommRecord(step, op, layer, int(np.prod(shape)), shape))

    def total(self, ops=None, steps=None) -> int:
        return sum(
            rec.floats
            for rec in self.records
            if (ops is None or rec.op in ops) and (steps is None or rec.step in steps)
        )

    def per_step(self) -> dict:
        out: dict[int, int] = {}
        for rec in self.records:
            out[rec.step] = out.get(rec.step, 0) + rec.floats
        return out

    def to_jsonl(self) -> str:
        lines = []
        for rec in self.records:
            d = asdict(rec)
            d["shape"] = list(rec.shape)
            lines.append(json.dumps(d, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class SketchMessage:
    g_sketch: np.ndarray
    indices: np.ndarray


def topr_columns(g, r: int) -> SketchMessage:
    """The ``r`` columns of ``g`` with the largest norms, norm-descending."""
    g = linalg.as_mat(g)
    if not 1 <= r <= g.shape[1]:
        raise InvalidInputError(f"cannot take {r} of {g.shape[1]} columns")
    idx = linalg.topk_indices(linalg.col_norms(g), r)
    return SketchMessage(g[:, idx], idx)


def tree_sum(payloads):
    """Pairwise sum in a fixed order: (0,1), (2,3), ... then recursively."""
    level = list(payloads)
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0].copy()


def allreduce_mean(payloads, log: CommLog | None = None, step: int = -1, op: str = "allreduce", layer: int = -1):
    payloads = [np.asarray(p, dtype=linalg.DTYPE) for p in payloads]
    if not payloads:
        raise ProtocolError("all-reduce over zero workers")
    shape = payloads[0].shape
    if any(p.shape != shape for p in payloads):
        raise ProtocolError(f"step {step}: all-reduce payload shapes differ: {[p.shape for p in payloads]}")
    if log is not None:
        log.add(step, op, layer, shape)
    return tree_sum(payloads) / len(payloads)


def weight_hash(model: TinyModel) -> str:
    h = hashlib.sha256()
    for name, w in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(w).tobytes())
    return h.hexdigest()


@dataclass
class WorkerReplica:
    wid: int
    model: TinyModel
    opt: object
    rng: np.random.Generator
    loss: float = 0.0


def make_workers(model: TinyModel, p: int, method: str, config: MesoConfig | None, seed: int):
    """``p`` identical replicas of ``model``. ``method`` is ``full`` or ``meso``."""
    if p < 1:
        raise InvalidInputError("world size must be positive")
    if method == "meso" and not config.kind.is_sparse:
        raise InvalidInputError("the distributed protocol needs a sparse projection kind")
    workers = []
    for wid in range(p):
        replica = copy.deepcopy(model)
        if method == "full":
            opt = FullAdam(replica)
        elif method == "meso":
            opt = MesoOptimizer(replica, config, linalg.make_rng(seed))
        else:
            raise InvalidInputError(f"unsupported distributed method {method!r}")
        workers.append(WorkerReplica(wid, replica, opt, linalg.derive_rng(seed, wid)))
    return workers


class DistSim:
    """Runs synchronized steps over a list of worker replicas.

    ``sketch_cols`` is the width of the refresh-step sketch. The default
    (``None``) takes every column, so the sketch's row norms equal the reduced
    gradient's and projections match single-worker training; a narrower
    sketch of the top columns trades that exactness for volume.
    """

    def __init__(self, workers, sketch_cols: int | None = None, threaded: bool = False):
        self.workers = workers
        self.sketch_cols = sketch_cols
        self.threaded = threaded
        self.log = CommLog()
        self._pool = ThreadPoolExecutor(max_workers=len(workers)) if threaded else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def _each(self, fn):
        if self._pool is None:
            return [fn(w) for w in self.workers]
        counter = linalg.current_counter()

        def run(w):
            if counter is None:
                return fn(w)
            with linalg.count_flops(counter):
                return fn(w)

        return list(self._pool.map(run, self.workers))

    def step(self, t: int, lr: float, shards) -> float:
        """One synchronized step; ``shards[k]`` is worker ``k``'s ``(x, target)``."""
        if len(shards) != len(self.workers):
            raise ProtocolError("need one shard per worker")

        def local(w: WorkerReplica):
            w.opt.prepare(t)
            x, y = shards[w.wid]
            w.loss = w.model.loss_and_backward(x, y)

        self._each(local)
        lead = self.workers[0].opt
        for i in range(len(self.workers[0].model.layers)):
            if isinstance(lead, FullAdam) or lead.slots[i] is None:
                g = allreduce_mean([w.model.layers[i].grad_w for w in self.workers], self.log, t, "grad", i)
                self._each(lambda w: w.opt.apply_full(i, g, lr))
                continue
            if lead.config.is_refresh(t):
                gcs = self._refresh(t, i)
            else:
                gcs = [w.opt.slots[i].layer.gc for w in self.workers]
            gc = allreduce_mean(gcs, self.log, t, "gc", i)
            self._each(lambda w: w.opt.apply(w.opt.slots[i], gc, lr))
        self._check_consistent(t)
        return float(np.mean([w.loss for w in self.workers]))

    def _refresh(self, t: int, i: int):
        grads = [w.opt.slots[i].oriented_grad() for w in self.workers]
        n = grads[0].shape[1]
        width = n if self.sketch_cols is None else min(self.sketch_cols, n)
        colnorms = allreduce_mean([linalg.col_norms(g)[None, :] for g in grads], self.log, t, "colnorm", i)
        # canonical ascending order so every worker packs the same columns identically
        cols = np.sort(linalg.topk_indices(colnorms.ravel(), width))
        sketch = allreduce_mean([g[:, cols] for g in grads], self.log, t, "sketch", i)
        norms = linalg.row_norms(sketch)
        projections = []
        for w in self.workers:
            slot = w.opt.slots[i]
            p = w.opt.new_projection(slot, norms=norms)
            w.opt.set_projection(slot, p)
            projections.append(p)
        first = projections[0]
        for p in projections[1:]:
            if not (np.array_equal(p.sigma, first.sigma) and np.array_equal(p.rho, first.rho)):
                raise ProtocolError(f"step {t}: workers derived different projections for layer {i}")
        gcs = [project(first, g) for g in grads]
        # linearity check: mean of projections == projection of the mean gradient
        lhs = tree_sum(gcs) / len(gcs)
        rhs = project(first, tree_sum(grads) / len(grads))
        if not np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12 * (1.0 + np.abs(rhs).max())):
            raise ProtocolError(f"step {t}: projected mean differs from mean projection on layer {i}")
        return gcs

    def _check_consistent(self, t: int) -> None:
        hashes = {weight_hash(w.model) for w in self.workers}
        if len(hashes) != 1:
            raise ProtocolError(f"step {t}: replica weights diverged")


def split_batch(x, y, p: int):
    """Contiguous equal shards of a batch; the batch size must divide by ``p``."""
    b = x.shape[0]
    if b % p:
        raise InvalidInputError(f"batch of {b} does not split evenly over {p} workers")
    k = b // p
    return [(x[i * k : (i + 1) * k], y[i * k : (i + 1) * k]) for i in range(p)]


def run_dist_step(sim: DistSim, t: int, lr: float, x, y) -> float:
    return sim.step(t, lr, split_batch(x, y, len(sim.workers)))
