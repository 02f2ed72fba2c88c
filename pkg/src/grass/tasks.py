"""Desk-scale tasks and the training loops behind ``train`` and ``dist-sim``."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .config import RunConfig
from .distsim import DistSim, make_workers, split_batch
from .errors import ConfigError, StateError
from .model import LoRALayer, TinyModel
from .optim import FullAdam, LoRAOptimizer, MesoOptimizer, lr_at, meso_step
from .projection import SparseProjection, coverage_fraction


class TrainingDiverged(StateError):
    pass


# ---------------------------------------------------------------------------
# data


class MarkovCorpus:
    """Symbols from an order-``k`` Markov chain with Dirichlet transition rows.

    Inputs are the one-hot codes of the previous ``k`` symbols, concatenated.
    """

    def __init__(self, vocab: int, order: int, concentration: float, length: int, rng):
        self.vocab, self.order = vocab, order
        contexts = vocab**order
        self.table = rng.dirichlet(np.full(vocab, concentration), size=contexts)
        cdf = np.cumsum(self.table, axis=1)
        seq = np.empty(length + order, dtype=np.int64)
        seq[:order] = rng.integers(0, vocab, size=order)
        u = rng.random(length)
        weights = vocab ** np.arange(order - 1, -1, -1)
        for i in range(length):
            ctx = int(seq[i : i + order] @ weights)
            seq[i + order] = min(int(np.searchsorted(cdf[ctx], u[i] * cdf[ctx, -1], side="right")), vocab - 1)
        self.seq = seq

    @property
    def input_dim(self) -> int:
        return self.vocab * self.order

    def contexts(self, positions) -> np.ndarray:
        positions = np.asarray(positions)
        weights = self.vocab ** np.arange(self.order - 1, -1, -1)
        return sum(self.seq[positions + j] * weights[j] for j in range(self.order))

    def encode(self, positions) -> tuple[np.ndarray, np.ndarray]:
        positions = np.asarray(positions)
        x = np.zeros((positions.size, self.input_dim))
        rows = np.arange(positions.size)
        for j in range(self.order):
            x[rows, j * self.vocab + self.seq[positions + j]] = 1.0
        return x, self.seq[positions + self.order]

    def entropy_rate(self) -> float:
        """Mean next-symbol entropy over the contexts seen in the corpus."""
        p = np.clip(self.table, 1e-300, None)
        h = -(self.table * np.log(p)).sum(axis=1)
        weights = self.vocab ** np.arange(self.order - 1, -1, -1)
        n = self.seq.size - self.order
        ctx = sum(self.seq[j : j + n] * weights[j] for j in range(self.order))
        return float(h[ctx].mean())


@dataclass
class Task:
    model: TinyModel
    batch_rng: np.random.Generator
    sample: object
    eval_x: np.ndarray
    eval_y: np.ndarray

    def batch(self, size: int):
        return self.sample(self.batch_rng, size)


def build_task(cfg: RunConfig) -> Task:
    data_rng = linalg.derive_rng(cfg.seed, 1)
    init_rng = linalg.derive_rng(cfg.seed, 2)
    batch_rng = linalg.derive_rng(cfg.seed, 5)
    if cfg.task == "toy-lm":
        corpus = MarkovCorpus(cfg.vocab, cfg.order, cfg.concentration, 40_000 + cfg.eval_size, data_rng)
        n_train = corpus.seq.size - cfg.order - cfg.eval_size
        held_out = np.arange(n_train, n_train + cfg.eval_size)
        eval_x, _ = corpus.encode(held_out)
        # score against the true next-symbol law rather than sampled symbols
        eval_y = corpus.table[corpus.contexts(held_out)]

        def sample(rng, size):
            return corpus.encode(rng.integers(0, n_train, size=size))

        dims = [corpus.input_dim] + [cfg.dim] * cfg.depth + [cfg.vocab]
        model = TinyModel.build(dims, init_rng, loss="xent", init_scale=cfg.init_scale, linear_embed=cfg.linear_embed)
    else:
        teacher = data_rng.standard_normal((cfg.dim, cfg.dim)) / math.sqrt(cfg.dim)
        noise = cfg.noise

        def sample(rng, size):
            x = rng.standard_normal((size, cfg.dim))
            return x, x @ teacher.T + noise * rng.standard_normal((size, cfg.dim))

        eval_x, eval_y = sample(data_rng, cfg.eval_size)
        dims = [cfg.dim] * (cfg.depth + 2)
        model = TinyModel.build(dims, init_rng, loss="mse", init_scale=cfg.init_scale)
    return Task(model, batch_rng, sample, eval_x, eval_y)


def make_optimizer(cfg: RunConfig, model: TinyModel):
    if cfg.method == "full":
        return FullAdam(model)
    if cfg.method == "meso":
        return MesoOptimizer(model, cfg.meso(), linalg.derive_rng(cfg.seed, 3))
    lora_rng = linalg.derive_rng(cfg.seed, 4)
    for i, layer in enumerate(model.layers):
        if cfg.r <= min(layer.w.shape):
            model.layers[i] = LoRALayer(layer.w, cfg.r, lora_rng, name=layer.name)
    merge_every = cfg.k_freq if cfg.method == "relora" else 0
    return LoRAOptimizer(model, lora_rng, merge_every=merge_every)


def step_comm(opt) -> int:
    """Gradient floats a data-parallel worker would all-reduce for this step."""
    if isinstance(opt, MesoOptimizer):
        total = 0
        for i, slot in enumerate(opt.slots):
            total += opt.model.layers[i].w.size if slot is None else slot.state.m1.size
        return total
    if isinstance(opt, LoRAOptimizer):
        return sum(
            layer.bmat.size + layer.amat.size if isinstance(layer, LoRALayer) else layer.w.size
            for layer in opt.model.layers
        )
    return sum(layer.w.size for layer in opt.model.layers)


def coverage(opt) -> float | None:
    if not isinstance(opt, MesoOptimizer):
        return None
    values = [
        coverage_fraction(slot.history, slot.side)
        for slot in opt.slots
        if slot is not None and slot.history and isinstance(slot.history[0], SparseProjection)
    ]
    return float(np.mean(values)) if values else None


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    records: list
    model: TinyModel
    final_eval: float
    opt: object = None
    comm_log: object = None
    extra: dict = field(default_factory=dict)


def _record(t, loss, eval_loss, lr, flops, comm, wall, cov):
    return {
        "step": t,
        "loss": loss,
        "eval_loss": eval_loss,
        "lr": lr,
        "flops": flops,
        "comm": comm,
        "wall": wall,
        "coverage": cov,
    }


def train(cfg: RunConfig) -> TrainResult:
    """Single-worker training; deterministic given ``cfg.seed``."""
    cfg.validate()
    task = build_task(cfg)
    model = task.model
    opt = make_optimizer(cfg, model)
    schedule = cfg.schedule()
    counter = linalg.FlopCounter()
    comm = 0
    records = []
    start = time.perf_counter()
    for t in range(cfg.steps):
        x, y = task.batch(cfg.batch)
        lr = lr_at(schedule, t)
        with linalg.count_flops(counter):
            loss = meso_step(model, opt, x, y, t, lr)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {t}")
        comm += step_comm(opt)
        if t % cfg.log_every == 0 or t == cfg.steps - 1:
            wall = round(time.perf_counter() - start, 6) if cfg.wall_time else None
            ev = model.evaluate(task.eval_x, task.eval_y)
            records.append(_record(t, loss, ev, lr, counter.flops, comm, wall, coverage(opt)))
    final = records[-1]["eval_loss"]
    return TrainResult(records, model, final, opt)


def train_distributed(cfg: RunConfig) -> TrainResult:
    """Data-parallel training over ``cfg.workers`` simulated replicas.

    Each step draws one global batch and splits it into equal contiguous
    shards, so the run is comparable with single-worker training on the same
    batches.
    """
    cfg.validate()
    task = build_task(cfg)
    if cfg.method not in ("full", "meso"):
        raise StateError("dist-sim supports the full and meso methods")
    workers = make_workers(task.model, cfg.workers, cfg.method, cfg.meso() if cfg.method == "meso" else None, 0)
    # all replicas share the projection stream of single-worker training
    if cfg.method == "meso":
        for w in workers:
            w.opt.rng = linalg.derive_rng(cfg.seed, 3)
    # sketch_cols = 0 selects the full-width sketch
    sim = DistSim(workers, sketch_cols=cfg.sketch_cols or None, threaded=cfg.threaded)
    schedule = cfg.schedule()
    counter = linalg.FlopCounter()
    records = []
    start = time.perf_counter()
    try:
        for t in range(cfg.steps):
            x, y = task.batch(cfg.batch)
            lr = lr_at(schedule, t)
            with linalg.count_flops(counter):
                loss = sim.step(t, lr, split_batch(x, y, cfg.workers))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {t}")
            if t % cfg.log_every == 0 or t == cfg.steps - 1:
                wall = round(time.perf_counter() - start, 6) if cfg.wall_time else None
                lead = workers[0]
                ev = lead.model.evaluate(task.eval_x, task.eval_y)
                records.append(_record(t, loss, ev, lr, counter.flops, sim.log.total(), wall, coverage(lead.opt)))
    finally:
        sim.close()
    return TrainResult(records, workers[0].model, records[-1]["eval_loss"], workers[0].opt, sim.log)


# ---------------------------------------------------------------------------
# sweeps

SWEEP_KINDS = ("rank", "frequency", "sampling")
SAMPLING_GRID = (
    "top_r",
    "frozen_top_r",
    "uniform_r",
    "uniform_nr",
    "multnorm_r",
    "multnorm_nr",
    "multnorm2_r",
    "multnorm2_nr",
)
INF = "inf"


def default_grid(kind: str, cfg: RunConfig) -> list:
    if kind == "rank":
        return [max(1, cfg.dim // 8), max(1, cfg.dim // 4), max(1, cfg.dim // 2)]
    if kind == "frequency":
        return [1, 20, cfg.k_freq, INF] if cfg.k_freq not in (1, 20, cfg.steps) else [1, 20, INF]
    if kind == "sampling":
        return list(SAMPLING_GRID)
    raise ConfigError(f"unknown sweep {kind!r}; choose from {', '.join(SWEEP_KINDS)}")


def sweep_override(kind: str, value, cfg: RunConfig) -> dict:
    if kind == "rank":
        return {"r": int(value)}
    if kind == "frequency":
        # an infinite period refreshes once, at step 0
        return {"k_freq": cfg.steps if value == INF else int(value)}
    return {"kind": str(value)}


def run_sweep(kind: str, cfg: RunConfig, values=None, seeds: int = 5, tradeoff: bool = False) -> list[dict]:
    """Tidy rows ``{sweep, value, seed, steps, final_loss}`` over ``values x seeds``.

    With ``tradeoff`` the rank sweep also runs every rank at half the step
    budget, so a lower rank at full length can be set against a higher rank
    trained for fewer steps.
    """
    values = default_grid(kind, cfg) if values is None else list(values)
    if not values or seeds < 1:
        raise ConfigError("sweep grid is empty")
    budgets = [cfg.steps]
    if tradeoff and kind == "rank":
        budgets.append(max(1, cfg.steps // 2))
    rows = []
    for steps in budgets:
        for value in values:
            for seed in range(seeds):
                run_cfg = dataclasses.replace(cfg, seed=cfg.seed + seed, steps=steps, method="meso")
                run_cfg = dataclasses.replace(run_cfg, **sweep_override(kind, value, run_cfg))
                res = train(run_cfg)
                rows.append({"sweep": kind, "value": value, "seed": run_cfg.seed, "steps": steps, "final_loss": res.final_eval})
    return rows


def median_by_value(rows, steps=None) -> dict:
    groups: dict = {}
    for row in rows:
        if steps is None or row["steps"] == steps:
            groups.setdefault(row["value"], []).append(row["final_loss"])
    return {k: float(np.median(v)) for k, v in groups.items()}


def rank_tradeoffs(rows, full_steps: int) -> list[dict]:
    """Pairs where a lower rank at ``full_steps`` beats a higher rank at half."""
    full = median_by_value(rows, full_steps)
    half = median_by_value(rows, max(1, full_steps // 2))
    out = []
    for lo in full:
        for hi in half:
            if int(lo) < int(hi):
                out.append({"low_rank": lo, "low_loss": full[lo], "high_rank": hi, "high_loss": half[hi], "low_wins": full[lo] < half[hi]})
    return out
