"""Closed-form memory, FLOP and communication costs, and LLaMA-scale memory
estimates.

All per-matrix formulas are for one ``m x n`` weight with ``m`` the projected
(smaller) side. Table FLOPs count one multiply-add as one FLOP, which is the
convention :class:`grass.linalg.FlopCounter` uses for ``table_flops``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .errors import InvalidInputError, ReconciliationError
from .optim import ADAM_OPS_PER_ELEMENT

METHODS = ("full", "lora", "relora", "flora", "galore", "efficient_galore", "grass")
MB = 1024.0 * 1024.0


@dataclass(frozen=True)
class CostQuery:
    method: str
    m: int
    n: int
    r: int
    b: int = 1
    c_opt: int = ADAM_OPS_PER_ELEMENT
    topr: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if min(self.m, self.n, self.r, self.b) < 1:
            raise InvalidInputError("dimensions must be positive")
        if self.r > min(self.m, self.n):
            raise InvalidInputError("rank exceeds min(m, n)")


@dataclass(frozen=True)
class CostReport:
    method: str
    weights_mem: float
    opt_mem: float
    grad_mem: float
    flops_regular: float
    flops_update: float
    comm: float

    def as_dict(self) -> dict:
        return asdict(self)


# symbolic forms, printed next to the numbers
FORMULAS = {
    "full": ("mn", "2mn", "mn", "mbn + mn + Cmn", "0", "mn"),
    "lora": ("mn + mr + nr", "2mr + 2nr", "mr + nr", "mbn + 2rmn + C(rm+rn) + rn + rm", "0", "mr + nr"),
    "relora": ("mn + mr + nr", "2mr + 2nr", "mr + nr", "mbn + 2rmn + C(rm+rn) + rn + rm", "mnr + mn", "mr + nr"),
    "flora": ("mn", "mr + 2nr", "mn", "mbn + 2rmn + mn + Crn", "mr", "mn"),
    "galore": ("mn", "mr + 2nr", "mn", "mbn + 2rmn + mn + Crn", "mn min(m,n)", "mn"),
    "efficient_galore": ("mn", "mr + 2nr", "nr", "rmb + rbn + Crn + rmn + mn", "mn min(m,n)", "nr"),
    "grass": ("mn", "2r + 2nr", "nr", "rbn + 3rn + Crn", "mn + m + r", "nr"),
}


def analytic_cost(q: CostQuery) -> CostReport:
    m, n, r, b, c = q.m, q.n, q.r, q.b, q.c_opt
    meth = q.method
    if meth == "full":
        vals = (m * n, 2 * m * n, m * n, m * b * n + m * n + c * m * n, 0, m * n)
    elif meth in ("lora", "relora"):
        regular = m * b * n + 2 * r * m * n + c * (r * m + r * n) + r * n + r * m
        update = m * n * r + m * n if meth == "relora" else 0
        vals = (m * n + m * r + n * r, 2 * m * r + 2 * n * r, m * r + n * r, regular, update, m * r + n * r)
    elif meth in ("flora", "galore"):
        regular = m * b * n + 2 * r * m * n + m * n + c * r * n
        update = m * r if meth == "flora" else m * n * min(m, n)
        vals = (m * n, m * r + 2 * n * r, m * n, regular, update, m * n)
    elif meth == "efficient_galore":
        regular = r * m * b + r * b * n + c * r * n + r * m * n + m * n
        vals = (m * n, m * r + 2 * n * r, n * r, regular, m * n * min(m, n), n * r)
    else:
        # alias-table sampling costs m + r; top-r via a heap costs m log r
        update = m * n + m * math.log2(r) if q.topr else m * n + m + r
        vals = (m * n, 2 * r + 2 * n * r, n * r, r * b * n + 3 * r * n + c * r * n, update, n * r)
    return CostReport(meth, *(float(v) for v in vals))


# ---------------------------------------------------------------------------
# reconciliation against instrumented counters


def expected_terms(q: CostQuery) -> dict:
    """Per-label table FLOPs of one regular step of the instrumented code path."""
    m, n, r, b, c = q.m, q.n, q.r, q.b, q.c_opt
    if q.method == "grass":
        return {"proj_matmul": r * b * n, "scale": r * n, "opt": c * r * n, "update": 2 * r * n}
    if q.method == "full":
        return {"grad_w": m * b * n, "opt": c * m * n, "update": m * n}
    if q.method in ("galore", "flora"):
        return {"grad_w": m * b * n, "project": r * m * n, "opt": c * r * n, "reconstruct": r * m * n, "update": m * n}
    raise InvalidInputError(f"no instrumented path for {q.method!r}")


def reconcile_flops(measured: dict, q: CostQuery) -> dict:
    """Compare a counter snapshot (``by_label`` of one layer's regular step)
    with the table terms. Matrix-product terms must match exactly."""
    by_label = measured.get("by_label", measured)
    expected = expected_terms(q)
    rows = {k: (int(by_label.get(k, 0)), int(v)) for k, v in expected.items()}
    bad = {k: mv for k, mv in rows.items() if mv[0] != mv[1]}
    if bad:
        detail = ", ".join(f"{k}: measured {a} != table {e}" for k, (a, e) in bad.items())
        raise ReconciliationError(f"{q.method} FLOP reconciliation failed: {detail}")
    total = sum(a for a, _ in rows.values())
    table = analytic_cost(q).flops_regular
    if total != table:
        raise ReconciliationError(f"{q.method} total {total} != table {table}")
    return {"method": q.method, "terms": rows, "total": total, "table_total": table}


# ---------------------------------------------------------------------------
# LLaMA memory estimates


@dataclass(frozen=True)
class LlamaConfig:
    seq_len: int = 256
    batch: int = 1
    hidden: int = 5120
    layers: int = 40
    heads: int = 40
    vocab: int = 32000
    intermediate: int = 13824
    r: int = 128

    def __post_init__(self):
        if min(asdict(self).values()) < 1:
            raise InvalidInputError("LLaMA config fields must be positive")


LLAMA_PRESETS = {
    "llama60m": LlamaConfig(hidden=512, intermediate=1376, heads=8, layers=8),
    "llama350m": LlamaConfig(hidden=1024, intermediate=2736, heads=16, layers=24),
    "llama1b": LlamaConfig(hidden=2048, intermediate=5461, heads=24, layers=32),
    "llama7b": LlamaConfig(hidden=4096, intermediate=11008, heads=32, layers=32),
    "llama13b": LlamaConfig(),
}


def activation_bytes(cfg: LlamaConfig) -> float:
    """Activation memory in bytes; every term already includes 2 bytes/value."""
    B, L, D, N, H, V = cfg.batch, cfg.seq_len, cfg.hidden, cfg.layers, cfg.heads, cfg.vocab
    layer_norm = B * L * D * 2
    emb = B * L * D
    qkv = emb * 2
    qkt = 2 * emb * 2
    softmax = B * H * L * L * 2
    pv = softmax / 2 + emb * 2
    out_proj = emb * 2
    attention = layer_norm + qkv + qkt + softmax + pv + out_proj
    ff1 = emb * 2
    gelu = emb * 4 * 2
    ff2 = emb * 4 * 2
    feed_forward = layer_norm + ff1 + gelu + ff2
    final = emb * 2
    model = layer_norm + N * (attention + feed_forward) + final
    cross_entropy = B * L * V * 2 + B * L * V * 4
    return float(model + cross_entropy)


def llama_matrices(cfg: LlamaConfig):
    """``(projected, full)``: shapes of the projected linears and parameter counts
    of everything else (embeddings, output head, norms)."""
    D, I = cfg.hidden, cfg.intermediate
    per_layer = [(D, D)] * 4 + [(I, D), (I, D), (D, I)]
    projected = per_layer * cfg.layers
    full = [cfg.vocab * D, cfg.vocab * D] + [D] * (2 * cfg.layers) + [D]
    return projected, full


LLAMA_METHODS = ("full", "galore", "flora", "efficient_galore", "grass", "lora")


def estimate_llama_memory(cfg: LlamaConfig, method: str) -> dict:
    """Per-component memory in MB (bf16, 2 bytes per value).

    Attention and MLP linears are projected along their smaller dimension;
    embeddings, output head and norms are trained in full.
    """
    if method not in LLAMA_METHODS:
        raise InvalidInputError(f"unknown method {method!r}")
    projected, full = llama_matrices(cfg)
    r = cfg.r
    n_full = sum(full)
    n_proj = sum(a * b for a, b in projected)
    params = n_full + n_proj
    grad = float(n_full)
    opt = 2.0 * n_full
    extra_params = 0
    extra_act = 0.0
    for a, b in projected:
        small, large = min(a, b), max(a, b)
        mn = a * b
        if method == "full":
            grad += mn
            opt += 2 * mn
        elif method == "grass":
            grad += r * large
            opt += 2 * r + 2 * r * large
        elif method == "efficient_galore":
            grad += r * large
            opt += small * r + 2 * r * large
        elif method in ("galore", "flora"):
            grad += mn
            opt += small * r + 2 * r * large
        else:
            extra_params += r * (a + b)
            grad += r * (a + b)
            opt += 2 * r * (a + b)
            extra_act += 2 * cfg.batch * cfg.seq_len * r
    report = {
        "activation": (activation_bytes(cfg) + extra_act) / MB,
        "parameter": 2.0 * (params + extra_params) / MB,
        "gradient": 2.0 * grad / MB,
        "optimizer": 2.0 * opt / MB,
        "extra": 2.0 * max(full + [a * b for a, b in projected]) / MB,
    }
    report["total"] = sum(report.values())
    report["parameter_count"] = params + extra_params
    return report
