"""``grass`` command line: verify, train, sweep, cost, dist-sim.

Exit codes: 0 success, 1 verification or training failure, 2 bad config.
Outputs go to ``--out`` or, failing that, ``$GRASS_OUT_DIR`` (default ``runs``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import checkpoint, cost, verify
from .config import RunConfig, apply_overrides, parse_config_text
from .errors import ConfigError, GrassError, InvalidInputError
from .projection import mutate_rho
from .tasks import (
    SWEEP_KINDS,
    TrainingDiverged,
    median_by_value,
    rank_tradeoffs,
    run_sweep,
    train,
    train_distributed,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
OUT_ENV = "GRASS_OUT_DIR"


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        names = [flag, "-p"] if f.name == "workers" else [flag]
        p.add_argument(*names, dest=f"cfg_{f.name}", metavar=f.name.upper(), help=f"config key {f.name} ({f.type})")


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = parse_config_text(text, cfg)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return apply_overrides(cfg, overrides).validate()


def out_dir(args) -> Path:
    return Path(getattr(args, "out", None) or os.environ.get(OUT_ENV) or "runs")


def _dump(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def write_metrics(path: Path, cfg: RunConfig, records) -> None:
    header = {"config": cfg.to_dict()}
    path.write_text(json.dumps(header, sort_keys=True) + "\n" + _dump(records))


def aligned(rows: list[dict], columns: list[str]) -> str:
    cells = [[str(c) for c in columns]] + [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)).rstrip() for row in cells) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else str(v)


def to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands


def cmd_verify(args) -> int:
    try:
        if args.mutate_rho is not None:
            with mutate_rho(args.mutate_rho):
                checks = verify.run_suites(args.suites, args.seed)
        else:
            checks = verify.run_suites(args.suites, args.seed)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def _finish_run(out: Path, cfg: RunConfig, res, extra=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "metrics.jsonl", cfg, res.records)
    checkpoint.save(out / "final.ckpt", res.model.state_dict())
    for name, text in (extra or {}).items():
        (out / name).write_text(text)
    last = res.records[-1]
    print(f"step {last['step']}  loss {last['loss']:.6f}  eval {last['eval_loss']:.6f}  -> {out}")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    try:
        res = train(cfg)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _finish_run(out_dir(args), cfg, res)
    return EXIT_OK


def cmd_dist_sim(args) -> int:
    cfg = resolve_config(args)
    try:
        res = train_distributed(cfg)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _finish_run(out_dir(args), cfg, res, {"commlog.jsonl": res.comm_log.to_jsonl()})
    log = res.comm_log
    by_op = {}
    for rec in log.records:
        by_op[rec.op] = by_op.get(rec.op, 0) + rec.floats
    print("all-reduced floats: " + ", ".join(f"{k} {v}" for k, v in sorted(by_op.items())))
    return EXIT_OK


def _parse_values(kind: str, raw):
    if raw is None:
        return None
    vals = [v.strip() for v in raw.split(",") if v.strip()]
    if not vals:
        raise ConfigError("sweep grid is empty")
    if kind == "sampling":
        return vals
    try:
        return [v if v == "inf" else int(v) for v in vals]
    except ValueError:
        raise ConfigError(f"bad sweep values {raw!r}") from None


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    values = _parse_values(args.kind, args.values)
    try:
        rows = run_sweep(args.kind, cfg, values, seeds=args.seeds, tradeoff=args.tradeoff)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    cols = ["sweep", "value", "seed", "steps", "final_loss"]
    medians = [{"value": k, "median_final_loss": v} for k, v in median_by_value(rows, cfg.steps).items()]
    text = aligned(rows, cols) + "\n" + aligned(medians, ["value", "median_final_loss"])
    if args.tradeoff and args.kind == "rank":
        text += "\n" + aligned(rank_tradeoffs(rows, cfg.steps), ["low_rank", "low_loss", "high_rank", "high_loss", "low_wins"])
    out = out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"sweep_{args.kind}.csv").write_text(to_csv(rows, cols))
    (out / f"sweep_{args.kind}.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COST_COLUMNS = ["method", "weights_mem", "opt_mem", "grad_mem", "flops_regular", "flops_update", "comm"]


def cmd_cost(args) -> int:
    methods = args.method or None
    if args.preset:
        if args.preset not in cost.LLAMA_PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {', '.join(cost.LLAMA_PRESETS)}")
        llama = cost.LLAMA_PRESETS[args.preset]
        if args.r is not None:
            llama = cost.LlamaConfig(**{**llama.__dict__, "r": args.r})
        rows = []
        for m in methods or cost.LLAMA_METHODS:
            est = cost.estimate_llama_memory(llama, m)
            rows.append({"method": m, **{k: round(v, 2) if isinstance(v, float) else v for k, v in est.items()}})
        cols = ["method", "activation", "parameter", "gradient", "optimizer", "extra", "total", "parameter_count"]
        print(f"{args.preset} memory (MB)")
    else:
        rows = []
        for m in methods or cost.METHODS:
            q = cost.CostQuery(m, args.m, args.n, args.r if args.r is not None else 128, args.b, topr=args.topr)
            rows.append(cost.analytic_cost(q).as_dict())
        cols = COST_COLUMNS
        print(f"m={args.m} n={args.n} r={args.r if args.r is not None else 128} b={args.b} (floats / table FLOPs)")
    print(aligned(rows, cols), end="")
    print(_dump(rows), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grass", description="Structured-sparse subspace optimizers at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("suites", nargs="*", default=["all"], help=f"{', '.join(verify.SUITES)} or all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mutate-rho", type=float, default=None, help="scale every unbiased rho (negative control)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="single-worker training run")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dist-sim", help="simulated data-parallel training")
    _add_config_flags(p)
    p.set_defaults(func=cmd_dist_sim)

    p = sub.add_parser("sweep", help="ablation grid over seeds")
    p.add_argument("kind", choices=SWEEP_KINDS)
    p.add_argument("--values", help="comma-separated grid (frequency accepts inf)")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tradeoff", action="store_true", help="rank sweep: also run every rank for half the steps")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("cost", help="analytic cost tables")
    p.add_argument("--method", action="append", help="repeatable; default all")
    p.add_argument("--m", type=int, default=512)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--b", type=int, default=1)
    p.add_argument("--topr", action="store_true", help="GRASS update cost with heap top-r")
    p.add_argument("--preset", help=f"LLaMA memory estimate: {', '.join(cost.LLAMA_PRESETS)}")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GrassError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
