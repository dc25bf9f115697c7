"""Command-line harness.

Every command writes one or more CSV files and a ``summary.json`` into
``--out``. An existing non-empty output directory is refused unless
``--force`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path

from . import __version__
from .bench import DEFAULT_THETAS, bench_attn, cache_stats, count_inversions, error_sweep, hardware_info
from .engine import EngineConfig
from .lemma import (
    DEFAULT_BINS,
    GranularityConfig,
    lemma_violations,
    overlap_bin_means,
    run_lemma_check,
    run_overlap_experiment,
    run_recall_experiment,
)
from .workload import WorkloadSpec, scattered_recall_workload

log = logging.getLogger("kvselect")


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            capture_output=True, text=True, cwd=Path(__file__).parent, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise SystemExit(f"config {path}: expected a JSON object")
    return data


def prepare_out(out: str, force: bool) -> Path:
    p = Path(out)
    if p.exists() and any(p.iterdir()) and not force:
        raise SystemExit(f"refusing to overwrite non-empty {p} (pass --force)")
    p.mkdir(parents=True, exist_ok=True)
    return p


def section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name, {}))


def _engine(cfg: dict, args) -> EngineConfig:
    data = section(cfg, "engine")
    if getattr(args, "k", None) is not None:
        data["k"] = args.k
    return EngineConfig.from_dict(data)


def _write(out: Path, command: str, args, cfg: dict, reports, extra: dict | None = None) -> dict:
    summary = {
        "command": command,
        "version": version_string(),
        "seed": args.seed,
        "config": cfg,
        "reports": {},
    }
    for rep in reports:
        rep.to_csv(out / f"{rep.name}.csv")
        summary["reports"][rep.name] = rep.to_dict()
    if extra:
        summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str) + "\n", encoding="utf-8")
    return summary


def cmd_bench_attn(args, cfg):
    engine = _engine(cfg, args)
    opts = section(cfg, "bench_attn")
    n_values = args.n_values or opts.get("n_values", [4096, 16384, 65536])
    report, records = bench_attn(
        engine, n_values, repeats=opts.get("repeats", 5), warmup=opts.get("warmup", 2), seed=args.seed
    )
    for r in report.rows:
        if r["variant"].startswith("speedup"):
            print(f"n={r['n']:>8} {r['variant']:<28} {r['speedup']:.2f}x")
        elif r["variant"] == "skipped":
            print(f"n={r['n']:>8} skipped: {r['reason']}")
    return [report], {"hardware": hardware_info()}


def cmd_error_sweep(args, cfg):
    engine = _engine(cfg, args)
    spec = WorkloadSpec.from_dict(section(cfg, "workload"))
    opts = section(cfg, "error_sweep")
    budgets = args.budgets or opts.get("budgets", [128, 256, 512, 1024, 2048])
    n_seeds = args.trials or opts.get("seeds", 20)
    per_budget, trials = error_sweep(
        engine, spec, budgets, seeds=range(args.seed, args.seed + n_seeds),
        n_decode=opts.get("n_decode", 16), n_needles=opts.get("n_needles", 4),
    )
    for r in per_budget.rows:
        print(f"k={r['k']:>6} mean_rel_error={r['mean_rel_error']:.6f} needle_recovery={r['needle_recovery']:.3f}")
    inv = count_inversions(per_budget.series("mean_rel_error"))
    print(f"adjacent inversions: {inv}")
    return [per_budget, trials], {"inversions": inv}


def cmd_cache_stats(args, cfg):
    engine = _engine(cfg, args)
    opts = section(cfg, "cache_stats")
    sim = opts.get("similarity", [0.85, 1.0])
    report = cache_stats(
        engine,
        theta_grid=args.thetas or opts.get("theta_grid", list(DEFAULT_THETAS)),
        n_context=opts.get("n_context", 2048),
        n_steps=opts.get("n_steps", 64),
        similarity=tuple(sim) if isinstance(sim, list) else float(sim),
        seed=args.seed,
    )
    for r in report.rows:
        print(json.dumps({"theta": r["theta"], "lookups": r["lookups"], "hits": r["hits"],
                          "hit_rate": r["hit_rate"], "mean_rel_error": r["mean_rel_error"]}))
    return [report], None


def cmd_recall(args, cfg):
    opts = section(cfg, "recall")
    gcfg = GranularityConfig(
        budget=opts.get("budget", 1024),
        block_sizes=tuple(opts.get("block_sizes", (1, 8, 32, 128))),
        block_score=opts.get("block_score", "mean"),
        critical_mass=opts.get("critical_mass", 0.9),
    )
    n_seeds = args.trials or opts.get("seeds", 1)
    reports = []
    for s in range(args.seed, args.seed + n_seeds):
        wl = scattered_recall_workload(
            n_tokens=opts.get("n_tokens", 16384), n_needles=opts.get("n_needles", 64),
            head_dim=opts.get("head_dim", 64), seed=s,
        )
        rep = run_recall_experiment(gcfg, wl)
        rep.name = f"recall_seed{s}" if n_seeds > 1 else "recall"
        reports.append(rep)
        line = " ".join(f"B={r['block_size']}:{r['recall']:.3f}" for r in rep.rows)
        print(f"seed={s} {line}")
    return reports, None


def cmd_overlap(args, cfg):
    opts = section(cfg, "overlap")
    report = run_overlap_experiment(
        num_pairs=args.trials or opts.get("num_pairs", 1000),
        d=opts.get("d", 64), n=opts.get("n", 1024), k=opts.get("k", 64),
        similarity_bins=[tuple(b) for b in opts.get("bins", DEFAULT_BINS)],
        seed=args.seed,
    )
    means = overlap_bin_means(report)
    for (lo, hi), m in sorted(means.items()):
        print(f"[{lo:.2f},{hi:.2f}) mean overlap {m:.4f}")
    return [report], {"bin_means": {f"{lo}-{hi}": m for (lo, hi), m in means.items()}}


def cmd_lemma_check(args, cfg):
    opts = section(cfg, "lemma_check")
    trials = args.trials or opts.get("trials", 10_000)
    report = run_lemma_check(
        trials=trials, d=opts.get("d", 64), n=opts.get("n", 256), k=opts.get("k", 16),
        seed=args.seed, planted_margin=opts.get("planted_margin", 12.0),
    )
    v = lemma_violations(report)
    print(f"violations: {v} / {trials}")
    return [report], {"violations": v}


COMMANDS = {
    "bench-attn": (cmd_bench_attn, "time full SDPA vs selective decode step"),
    "error-sweep": (cmd_error_sweep, "approximation error and needle recovery vs budget"),
    "cache-stats": (cmd_cache_stats, "selection cache hit rate vs threshold"),
    "recall": (cmd_recall, "critical-token recall vs selection block size"),
    "overlap": (cmd_overlap, "top-k overlap vs query similarity"),
    "lemma-check": (cmd_lemma_check, "randomised check of the top-k invariance bound"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvselect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config (sections: engine, workload, <command>)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
        p.add_argument("--trials", type=int, help="trials / seeds / pairs, depending on the command")
        if name in ("bench-attn", "error-sweep", "cache-stats"):
            p.add_argument("--k", type=int, help="selection budget override")
        if name == "bench-attn":
            p.add_argument("--n-values", type=int, nargs="+")
        if name == "error-sweep":
            p.add_argument("--budgets", type=int, nargs="+")
        if name == "cache-stats":
            p.add_argument("--thetas", type=float, nargs="+")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    out = prepare_out(args.out, args.force)
    fn, _ = COMMANDS[args.command]
    reports, extra = fn(args, cfg)
    _write(out, args.command, args, cfg, reports, extra)
    log.info("wrote %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
