"""Command-line entry points: ingest, train, compare, eval."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from cali3f.checkpoint import load_state, save_state
from cali3f.config import ConfigError, ExperimentConfig, read_config_file
from cali3f.data import (
    DataError,
    build_shards,
    filter_min_interactions,
    load_shards,
    parse_ratings,
    save_shards,
    table_digest,
)
from cali3f.datasets import fetch_movielens_100k
from cali3f.evaluation import MetricHistory, RoundRecord, rounds_to_threshold
from cali3f.federation import Federation

log = logging.getLogger("cali3f")

# dataset aliases resolved to a local file
ALIASES = {"ml-100k": fetch_movielens_100k}
# server-side settings that only the clustered strategy reads
CLUSTER_ONLY = ("phi", "lambda0", "decay", "clusters", "recluster_every", "item_weighting")

# flag name -> (config field, argparse kwargs)
FLAGS = {
    "--dataset": ("dataset", dict(help="ratings file or 'ml-100k'")),
    "--format": ("format", dict(choices=["tab", "double-colon"])),
    "--min-interactions": ("min_interactions", dict(type=int)),
    "--model": ("model", dict(choices=["gmf", "mlp", "neumf"])),
    "--strategy": ("strategy", dict(choices=["cali3f", "fedavg", "ditto"])),
    "--rounds": ("rounds", dict(type=int)),
    "--clusters": ("clusters", dict(type=int)),
    "--delegates": ("delegates", dict(type=int)),
    "--phi": ("phi", dict(type=float)),
    "--lambda0": ("lambda0", dict(type=float)),
    "--decay": ("decay", dict(type=float)),
    "--neg-ratio": ("neg_ratio", dict(type=int)),
    "--lr": ("lr", dict(type=float)),
    "--local-epochs": ("local_epochs", dict(type=int)),
    "--batch-size": ("batch_size", dict(type=int)),
    "--ditto-reg": ("ditto_reg", dict(type=float)),
    "--eval-every": ("eval_every", dict(type=int)),
    "--checkpoint-every": ("checkpoint_every", dict(type=int)),
    "--seeds": ("seeds", dict(nargs="+", help="comma or space separated")),
    "--out": ("out", dict(help="run directory")),
}


def _parse_seeds(values: Sequence[str]) -> list[int]:
    out = []
    for v in values:
        out.extend(int(x) for x in str(v).replace(",", " ").split())
    return out


# -- config assembly ---------------------------------------------------------

def resolve_config(args: argparse.Namespace) -> tuple[ExperimentConfig, set[str]]:
    """Defaults, then the config file, then explicit flags; returns the explicitly set keys too."""
    data: dict = {}
    if getattr(args, "config", None):
        data.update(read_config_file(args.config))
    for flag, (name, _) in FLAGS.items():
        value = getattr(args, name, None)
        if value is None:
            continue
        data[name] = _parse_seeds(value) if name == "seeds" else value
    explicit = set(data)
    cfg = ExperimentConfig.from_dict(data)
    if "out" not in explicit:
        cfg.out = str(Path("runs") / cfg.strategy)
    return cfg, explicit


def dataset_path(spec: str) -> Path:
    if spec in ALIASES:
        return Path(ALIASES[spec]())
    path = Path(spec)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    return path


@dataclass
class Prepared:
    shards: list
    num_items: int
    cache: Path
    meta: dict


def prepare(cfg: ExperimentConfig, seed: int, cache_dir: Path) -> Prepared:
    """Parse, filter, split and sample negatives; reuse a cache keyed by data + seed."""
    path = dataset_path(cfg.dataset)
    table = parse_ratings(path, cfg.format)
    table = filter_min_interactions(table, cfg.min_interactions)
    digest = table_digest(table)
    cache = cache_dir / f"{path.stem}-{digest}-n{cfg.neg_ratio}-s{seed}.jsonl"
    if cache.exists():
        shards, meta = load_shards(cache)
        return Prepared(shards, int(meta["num_items"]), cache, meta)
    shards = build_shards(table, seed=seed, neg_ratio=cfg.neg_ratio)
    meta = {"dataset": str(path), "digest": digest, "seed": seed, "neg_ratio": cfg.neg_ratio,
            "num_items": table.num_items, "stats": table.stats()}
    save_shards(cache, shards, meta)
    return Prepared(shards, table.num_items, cache, meta)


# -- output formatting -------------------------------------------------------

def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [[cell(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in cells:
        lines.append("  ".join(c.rjust(w) if _numeric(c) else c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def _numeric(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


# -- ingest ------------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg, _ = resolve_config(args)
    if not cfg.dataset:
        raise ConfigError(["--dataset is required"])
    rows = []
    for seed in cfg.seeds:
        prep = prepare(cfg, seed, Path(args.cache_dir))
        stats = prep.meta["stats"]
        h = _file_hash(prep.cache)
        rows.append([seed, stats["interactions"], stats["users"], stats["items"],
                     f"{100 * stats['sparsity']:.2f}%", h, str(prep.cache)])
    sys.stdout.write(format_table(["seed", "interactions", "users", "items", "sparsity", "cache_hash", "cache"],
                                  rows))
    return 0


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


# -- train -------------------------------------------------------------------

def seed_dir(run_dir: Path, seed: int) -> Path:
    return run_dir / f"seed-{seed}"


def train_one(cfg: ExperimentConfig, seed: int, cache_dir: Path, resume: bool) -> MetricHistory:
    prep = prepare(cfg, seed, cache_dir)
    cfg.validate(num_clients=len(prep.shards))
    out = seed_dir(Path(cfg.out), seed)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path, ckpt_path = out / "metrics.jsonl", out / "checkpoint.npz"
    fed = Federation(prep.shards, prep.num_items, seed=seed, **cfg.federation_kwargs())
    config_hash = cfg.hash()

    state, history = None, None
    if resume and ckpt_path.exists() and metrics_path.exists():
        state, extra = load_state(ckpt_path)
        if extra.get("config_hash") != config_hash:
            raise ConfigError([f"{ckpt_path} was written with a different configuration"])
        history = MetricHistory.from_jsonl(_records_upto(metrics_path, state.round))
        log.info("seed %d: resuming from round %d", seed, state.round)
    if history is None:
        state = fed.init_state()
        history = MetricHistory(cfg.strategy, seed, config_hash=config_hash)
        history.initial = RoundRecord(0, **fed.evaluate(state).summary())
    # rewrite what we keep, then append as rounds finish
    metrics_path.write_text(history.to_jsonl())
    started = time.perf_counter()
    start_round = state.round
    fh = open(metrics_path, "a", encoding="utf-8")

    def on_round(st, hist):
        if hist.records and hist.records[-1].round == st.round:
            fh.write(hist.record_line(hist.records[-1]) + "\n")
            fh.flush()
        if st.round % cfg.checkpoint_every == 0 or st.round == cfg.rounds:
            save_state(ckpt_path, st, {"config_hash": config_hash, "seed": seed})
        log.debug("seed %d round %d", seed, st.round)

    try:
        if state.round < cfg.rounds:
            state, history = fed.run(cfg.rounds, eval_every=cfg.eval_every, state=state, history=history,
                                     on_round=on_round)
    finally:
        fh.close()
    elapsed = time.perf_counter() - started
    rounds_run = state.round - start_round
    timing = {"seconds": elapsed, "rounds": rounds_run,
              "seconds_per_round": elapsed / rounds_run if rounds_run else None}
    (out / "timing.json").write_text(json.dumps(timing, sort_keys=True) + "\n")
    return history


def _records_upto(path: Path, last_round: int) -> str:
    """Metric lines up to ``last_round``; later or half-written lines from a crash are dropped."""
    keep = []
    for line in path.read_text(encoding="utf-8").splitlines():
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            break
        if rec.get("round", last_round + 1) <= last_round:
            keep.append(line)
    return "\n".join(keep) + "\n"


def _train_worker(payload):
    cfg_dict, seed, cache_dir, resume = payload
    return train_one(ExperimentConfig.from_dict(cfg_dict), seed, Path(cache_dir), resume).to_jsonl()


def summarize(histories: Sequence[MetricHistory]) -> str:
    header = ["strategy", "seed", "best_hr", "best_ndcg", "final_hr", "final_ndcg", "final_std_ndcg",
              "rounds_to_threshold"]
    rows, cols = [], []
    for h in histories:
        f = h.final()
        vals = [h.best("mean_hr"), h.best("mean_ndcg"), f.mean_hr, f.mean_ndcg, f.std_ndcg,
                rounds_to_threshold(h)]
        cols.append(vals)
        rows.append([h.strategy, h.seed, *vals])
    if len(histories) > 1:
        mean = np.mean(np.array(cols, dtype=float), axis=0).tolist()
        rows.append([histories[0].strategy, "mean", *mean])
    return format_table(header, rows)


def cmd_train(args) -> int:
    cfg, explicit = resolve_config(args)
    cfg.validate()
    if not cfg.dataset:
        raise ConfigError(["--dataset is required (a ratings file or 'ml-100k')"])
    if cfg.strategy != "cali3f":
        ignored = sorted(k for k in CLUSTER_ONLY if k in explicit)
        if ignored:
            log.warning("strategy %s ignores %s", cfg.strategy, ", ".join(ignored))
    run_dir = Path(cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.json")
    cache_dir = Path(args.cache_dir)
    if args.jobs > 1 and len(cfg.seeds) > 1:
        payloads = [(cfg.to_dict(), s, str(cache_dir), args.resume) for s in cfg.seeds]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            histories = [MetricHistory.from_jsonl(t) for t in pool.map(_train_worker, payloads)]
    else:
        histories = [train_one(cfg, s, cache_dir, args.resume) for s in cfg.seeds]
    text = summarize(histories)
    (run_dir / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return 0


# -- compare -----------------------------------------------------------------

class ComparabilityError(ValueError):
    pass


@dataclass
class RunSummary:
    label: str
    strategy: str
    seeds: list[int]
    dataset: str
    best_hr: float
    best_ndcg: float
    final_std_ndcg: float
    final_std_hr: float
    rounds_to_threshold: float
    seconds_per_round: float | None


def load_run(run_dir: Path) -> tuple[ExperimentConfig, list[MetricHistory], list[float]]:
    cfg = ExperimentConfig.load(run_dir / "config.json")
    histories, timings = [], []
    for seed in cfg.seeds:
        d = seed_dir(run_dir, seed)
        metrics = d / "metrics.jsonl"
        if not metrics.exists():
            raise ComparabilityError(f"{run_dir}: no metrics for seed {seed}")
        histories.append(MetricHistory.from_jsonl(metrics.read_text()))
        timing = d / "timing.json"
        if timing.exists():
            spr = json.loads(timing.read_text()).get("seconds_per_round")
            if spr is not None:
                timings.append(spr)
    return cfg, histories, timings


def summarize_run(run_dir: Path) -> RunSummary:
    cfg, hs, timings = load_run(run_dir)
    return RunSummary(
        label=run_dir.name,
        strategy=cfg.strategy,
        seeds=list(cfg.seeds),
        dataset=cfg.dataset,
        best_hr=float(np.mean([h.best("mean_hr") for h in hs])),
        best_ndcg=float(np.mean([h.best("mean_ndcg") for h in hs])),
        final_std_ndcg=float(np.mean([h.final().std_ndcg for h in hs])),
        final_std_hr=float(np.mean([h.final().std_hr for h in hs])),
        rounds_to_threshold=float(np.mean([rounds_to_threshold(h) for h in hs])),
        seconds_per_round=float(np.mean(timings)) if timings else None,
    )


def compare_runs(run_dirs: Sequence[Path], baseline: str | None = None) -> tuple[list[RunSummary], str]:
    runs = [summarize_run(Path(d)) for d in run_dirs]
    if not runs:
        raise ComparabilityError("nothing to compare")
    ref = runs[0]
    for r in runs[1:]:
        if Path(r.dataset).name != Path(ref.dataset).name or sorted(r.seeds) != sorted(ref.seeds):
            raise ComparabilityError(
                f"{r.label} ({r.dataset}, seeds {r.seeds}) is not comparable with "
                f"{ref.label} ({ref.dataset}, seeds {ref.seeds})")
    if baseline is None:
        base = next((r for r in runs if r.strategy == "fedavg"), runs[0])
    else:
        matches = [r for r in runs if baseline in (r.label, r.strategy)]
        if not matches:
            raise ComparabilityError(f"baseline {baseline!r} not among the compared runs")
        base = matches[0]
    header = ["run", "strategy", "best_hr", "best_ndcg", "std_ndcg", "std_hr", "rounds_to_thr",
              "round_ratio", "sec_per_round", "time_ratio"]
    rows = []
    for r in runs:
        round_ratio = r.rounds_to_threshold / base.rounds_to_threshold
        if r.seconds_per_round is not None and base.seconds_per_round:
            spr = r.seconds_per_round
            time_ratio = (r.rounds_to_threshold * spr) / (base.rounds_to_threshold * base.seconds_per_round)
        else:
            spr, time_ratio = "n/a", "n/a"
        rows.append([r.label, r.strategy, r.best_hr, r.best_ndcg, r.final_std_ndcg, r.final_std_hr,
                     r.rounds_to_threshold, round_ratio, spr, time_ratio])
    text = f"baseline: {base.label}\n" + format_table(header, rows)
    return runs, text


def cmd_compare(args) -> int:
    _, text = compare_runs([Path(d) for d in args.runs], args.baseline)
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text)
    return 0


# -- eval --------------------------------------------------------------------

def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    seeds = _parse_seeds(args.seeds) if args.seeds else cfg.seeds
    rows = []
    for seed in seeds:
        ckpt = seed_dir(run_dir, seed) / "checkpoint.npz"
        if not ckpt.exists():
            raise DataError(f"no checkpoint at {ckpt}")
        state, _ = load_state(ckpt)
        prep = prepare(cfg, seed, Path(args.cache_dir))
        fed = Federation(prep.shards, prep.num_items, seed=seed, **cfg.federation_kwargs())
        ev = fed.evaluate(state)
        rows.append([cfg.strategy, seed, state.round, ev.mean_hr, ev.mean_ndcg, ev.std_ndcg, ev.std_hr])
    sys.stdout.write(format_table(["strategy", "seed", "round", "mean_hr", "mean_ndcg", "std_ndcg", "std_hr"],
                                  rows))
    return 0


# -- parser ------------------------------------------------------------------

def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or YAML config file; flags override it")
    for flag, (name, kw) in FLAGS.items():
        p.add_argument(flag, dest=name, default=None, **kw)
    p.add_argument("--cache-dir", default="data/cache", help="where prepared shards are cached")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cali3f", description="Federated recommendation simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse, split and cache a dataset; print its statistics")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="run one strategy for every seed")
    _add_experiment_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.add_argument("--jobs", type=int, default=1, help="seeds to run in parallel")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="compare finished runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--baseline", help="run label or strategy used for ratios (default: fedavg)")
    p.add_argument("--report", help="also write the table here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval", help="evaluate saved checkpoints")
    p.add_argument("run", help="run directory")
    p.add_argument("--seeds", nargs="+")
    p.add_argument("--cache-dir", default="data/cache")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ComparabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
