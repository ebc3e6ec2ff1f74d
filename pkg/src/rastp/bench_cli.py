"""Command-line orchestrator: synthesize corpora, tokenize, train/evaluate
single runs, sweep strategies/layers/ratios across seeds, and merge sweep
CSVs into plot-ready long-format tables."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data_pipeline import (
    DataError,
    load_interactions,
    make_examples,
    save_interactions,
    split_leave_one_out,
    synth_corpus,
    train_popularity,
    write_split_manifest,
    SidVocab,
)
from .rastp_pruner import STRATEGY_KINDS, PruneStrategy, PrunerError
from .seq_model import (
    ModelConfig,
    ModelError,
    SeqRecModel,
    save_checkpoint,
    seed_everything,
)
from .sid_tokenizer import (
    TokenizerError,
    build_index,
    fit_codebooks,
    read_embeddings_binary,
    read_embeddings_text,
    save_codebooks,
    write_embeddings_binary,
    write_embeddings_text,
)
from .trainer_eval import (
    MetricsReport,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    summarize_step_times,
    train,
)

DEFAULT_SEEDS = [1, 42, 999, 1024, 2025]

SWEEP_COLUMNS = [
    "axis",
    "value",
    "seed",
    "kind",
    "recall5",
    "recall10",
    "ndcg5",
    "ndcg10",
    "wall_step_ms",
    "speedup_vs_baseline",
    "recall5_std",
    "recall10_std",
    "ndcg5_std",
    "ndcg10_std",
    "wall_step_ms_std",
    "speedup_vs_baseline_std",
]

SWEEP_METRICS = ["recall5", "recall10", "ndcg5", "ndcg10", "wall_step_ms", "speedup_vs_baseline"]

REPORT_COLUMNS = ["experiment", "axis_value", "metric", "mean", "stddev", "n_seeds"]


class BenchError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


@dataclass
class BenchConfig:
    """Flat experiment configuration; every field doubles as a CLI flag."""

    # synthetic corpus (ignored when interaction/embedding paths are given)
    n_users: int = 2000
    n_items: int = 500
    n_clusters: int = 8
    d_feat: int = 64
    corpus_seed: int = 7
    sigma: float = 0.05
    min_len: int = 20
    max_len: int = 60
    within_cluster: float = 0.8
    chain_strength: float = 0.0
    interactions_path: str = ""
    embeddings_path: str = ""
    # tokenizer
    sid_levels: int = 3
    codebook_size: int = 32
    kmeans_iters: int = 25
    disambiguate: bool = False
    min_interactions: int = 5
    # model
    d_model: int = 64
    n_heads: int = 4
    d_mlp: int = 256
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    dropout: float = 0.15
    max_seq: int = 120
    # training / pruning
    strategy: str = "rastp"
    rho: float = 0.7
    pool_window: int = 2
    prune_layer: int = 2
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_steps: int = 500
    valid_interval: int = 100
    patience: int = 10
    seed: int = 42
    beam: int = 20
    eval_prune: bool = True
    valid_subsample: int = 1000
    all_prefixes: bool = True
    threads: int = 0


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _coerce(name: str, raw: str, type_) -> object:
    try:
        if type_ is bool:
            return _parse_bool(raw)
        if type_ is int:
            return int(raw)
        if type_ is float:
            return float(raw)
        return raw
    except ValueError:
        raise BenchError(f"config key {name!r}: cannot parse {raw!r} as {type_.__name__}")


def parse_config_file(path) -> dict[str, str]:
    """TOML-style `key = value` lines; `#` starts a comment."""
    raw: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise BenchError(f"{path}:{lineno}: expected key = value")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip().strip('"')
    return raw


def load_config(config_path, overrides: dict[str, str]) -> BenchConfig:
    field_types = {f.name: f.type for f in fields(BenchConfig)}
    # dataclass field types arrive as strings under `from __future__ import annotations`
    type_map = {"int": int, "float": float, "bool": bool, "str": str}
    values: dict[str, object] = {}

    def apply(source: dict[str, str], origin: str):
        for key, raw in source.items():
            if key not in field_types:
                raise BenchError(f"{origin}: unknown config key {key!r}")
            type_ = type_map[field_types[key]] if isinstance(field_types[key], str) else field_types[key]
            values[key] = _coerce(key, raw, type_)

    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise BenchError(f"config file not found: {path}", code=2)
        apply(parse_config_file(path), str(path))
    apply(overrides, "command line")
    return BenchConfig(**values)


def _load_embeddings(path: str):
    if path.endswith(".bin"):
        return read_embeddings_binary(path)
    return read_embeddings_text(path)


def build_dataset(cfg: BenchConfig):
    """Corpus + codebooks + index + phase examples for one experiment."""
    if cfg.interactions_path or cfg.embeddings_path:
        if not (cfg.interactions_path and cfg.embeddings_path):
            raise BenchError("interactions_path and embeddings_path must be set together")
        log = load_interactions(cfg.interactions_path)
        embeddings = _load_embeddings(cfg.embeddings_path)
    else:
        log, embeddings = synth_corpus(
            cfg.n_users,
            cfg.n_items,
            cfg.n_clusters,
            cfg.d_feat,
            cfg.corpus_seed,
            sigma=cfg.sigma,
            min_len=cfg.min_len,
            max_len=cfg.max_len,
            within_cluster=cfg.within_cluster,
            chain_strength=cfg.chain_strength,
        )
    splits = split_leave_one_out(log, cfg.min_interactions)
    if not splits:
        raise BenchError("no users survive the core filter; corpus too sparse")
    popularity = train_popularity(splits)
    codebooks = fit_codebooks(
        embeddings, cfg.sid_levels, cfg.codebook_size, cfg.kmeans_iters, cfg.corpus_seed
    )
    index = build_index(codebooks, embeddings, popularity, disambiguate=cfg.disambiguate)
    examples = {
        phase: make_examples(splits, index, cfg.max_seq, phase, cfg.all_prefixes)
        for phase in ("train", "valid", "test")
    }
    return log, embeddings, splits, popularity, codebooks, index, examples


def make_strategy(cfg: BenchConfig) -> PruneStrategy:
    return PruneStrategy(kind=cfg.strategy, rho=cfg.rho, pool_window=cfg.pool_window)


def run_experiment(cfg: BenchConfig, out_dir: Path | None = None, log=None):
    """tokenize -> train -> evaluate; returns (final MetricsReport,
    steady-state wall_step_ms, TrainResult)."""
    if cfg.threads > 0:
        import torch

        torch.set_num_threads(cfg.threads)
    _, _, splits, popularity, codebooks, index, examples = build_dataset(cfg)
    vocab = SidVocab.for_index(index)
    if log:
        log(
            f"[data] users={len(splits)} train_examples={len(examples['train'])} "
            f"sequences={index.n_sequences} collisions={index.n_items - index.n_sequences}"
        )

    seed_everything(cfg.seed)
    model = SeqRecModel(
        ModelConfig(
            vocab_size=vocab.vocab_size,
            d_model=cfg.d_model,
            n_heads=cfg.n_heads,
            d_mlp=cfg.d_mlp,
            n_enc_layers=cfg.n_enc_layers,
            n_dec_layers=cfg.n_dec_layers,
            dropout=cfg.dropout,
            max_seq=cfg.max_seq,
        )
    )
    strategy = make_strategy(cfg)
    train_config = TrainConfig(
        strategy=strategy,
        prune_layer=cfg.prune_layer,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size,
        max_steps=cfg.max_steps,
        valid_interval=cfg.valid_interval,
        patience=cfg.patience,
        seed=cfg.seed,
        beam=cfg.beam,
        eval_prune=cfg.eval_prune,
        valid_subsample=cfg.valid_subsample,
    )
    run_log_path = out_dir / "runlog.jsonl" if out_dir else None
    result = train(
        train_config,
        model,
        examples["train"],
        examples["valid"],
        index,
        run_log_path=run_log_path,
    )
    report = evaluate(
        model,
        examples["test"],
        index,
        Ks=(5, 10),
        beam=cfg.beam,
        strategy=strategy if cfg.eval_prune else None,
        prune_layer=cfg.prune_layer,
    )
    report.wall_step_ms_mean = result.report.wall_step_ms_mean
    report.wall_step_ms_std = result.report.wall_step_ms_std
    report.steps_run = result.report.steps_run
    wall_step_ms = summarize_step_times(result.step_times_ms)
    if log:
        log(
            f"[run] strategy={cfg.strategy} seed={cfg.seed} "
            f"recall@10={report.recall[10]:.4f} wall_step_ms={wall_step_ms:.2f}"
        )

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_codebooks(out_dir / "codebooks.bin", codebooks)
        write_split_manifest(out_dir / "split_manifest.json", splits)
        save_checkpoint(out_dir / "checkpoint.bin", model, step=result.best_step, seed=cfg.seed)
        metrics = report.to_dict()
        metrics["wall_step_ms"] = wall_step_ms
        (out_dir / "metrics.json").write_text(
            json.dumps(metrics, indent=1, sort_keys=True), encoding="utf-8"
        )
        _write_manifest(
            out_dir,
            "run",
            cfg,
            [
                "codebooks.bin",
                "split_manifest.json",
                "checkpoint.bin",
                "metrics.json",
                "runlog.jsonl",
            ],
        )
    return report, wall_step_ms, result


def _write_manifest(out_dir: Path, command: str, cfg: BenchConfig, outputs: list[str]):
    manifest = {
        "command": command,
        "config": asdict(cfg),
        "outputs": outputs,
        "created_unix": int(time.time()),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8"
    )


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return "" if x is None else str(x)


# ----------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    cfg = load_config(args.config, collect_overrides(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log, embeddings = synth_corpus(
        cfg.n_users,
        cfg.n_items,
        cfg.n_clusters,
        cfg.d_feat,
        cfg.corpus_seed,
        sigma=cfg.sigma,
        min_len=cfg.min_len,
        max_len=cfg.max_len,
        within_cluster=cfg.within_cluster,
        chain_strength=cfg.chain_strength,
    )
    save_interactions(out / "interactions.tsv", log)
    write_embeddings_text(out / "embeddings.txt", embeddings)
    outputs = ["interactions.tsv", "embeddings.txt"]
    if args.binary:
        write_embeddings_binary(out / "embeddings.bin", embeddings)
        outputs += ["embeddings.bin", "embeddings.bin.json"]
    _write_manifest(out, "synth", cfg, outputs)
    print(f"[synth] {len(log.records)} interactions, {len(embeddings)} items -> {out}")
    return 0


def cmd_tokenize(args) -> int:
    cfg = load_config(args.config, collect_overrides(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    embeddings = _load_embeddings(args.embeddings)
    codebooks = fit_codebooks(
        embeddings, cfg.sid_levels, cfg.codebook_size, cfg.kmeans_iters, cfg.corpus_seed
    )
    index = build_index(codebooks, embeddings, disambiguate=cfg.disambiguate)
    save_codebooks(out / "codebooks.bin", codebooks)
    buckets = sorted((len(b) for b in index.inverse.values()), reverse=True)
    audit = {
        "n_items": index.n_items,
        "n_sequences": index.n_sequences,
        "n_collisions": index.n_items - index.n_sequences,
        "largest_bucket": buckets[0] if buckets else 0,
        "levels": index.num_levels,
        "codebook_size": index.codebook_size,
    }
    (out / "sid_audit.json").write_text(json.dumps(audit, indent=1), encoding="utf-8")
    _write_manifest(out, "tokenize", cfg, ["codebooks.bin", "sid_audit.json"])
    print(
        f"[tokenize] {index.n_items} items -> {index.n_sequences} sequences "
        f"({audit['n_collisions']} collisions) -> {out}"
    )
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config, collect_overrides(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report, wall, _ = run_experiment(cfg, out_dir=out, log=print)
    print(f"[run] metrics written to {out / 'metrics.json'}")
    return 0


def _parse_axis_values(axis: str, raw: str, cfg: BenchConfig) -> list:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise BenchError("no sweep values given")
    if axis == "strategy":
        for p in parts:
            if p not in STRATEGY_KINDS:
                raise BenchError(f"unknown strategy value {p!r}; expected one of {STRATEGY_KINDS}")
        return parts
    if axis == "layer":
        values = []
        for p in parts:
            try:
                v = int(p)
            except ValueError:
                raise BenchError(f"layer value {p!r} is not an integer")
            if not 1 <= v <= cfg.n_enc_layers:
                raise BenchError(
                    f"layer value {v} out of range [1, {cfg.n_enc_layers}]"
                )
            values.append(v)
        return values
    if axis == "rho":
        values = []
        for p in parts:
            try:
                v = float(p)
            except ValueError:
                raise BenchError(f"rho value {p!r} is not a number")
            if not 0.0 < v <= 1.0:
                raise BenchError(f"rho value {v} outside (0, 1]")
            values.append(v)
        return values
    raise BenchError(f"unknown sweep axis {axis!r}; expected strategy, layer or rho")


def _cfg_for_value(cfg: BenchConfig, axis: str, value, seed: int) -> BenchConfig:
    updates = {"seed": seed}
    if axis == "strategy":
        updates["strategy"] = value
    elif axis == "layer":
        updates["prune_layer"] = value
    else:
        updates["rho"] = value
    params = asdict(cfg)
    params.update(updates)
    return BenchConfig(**params)


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, collect_overrides(args))
    axis = args.axis
    values = _parse_axis_values(axis, args.values, cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(DEFAULT_SEEDS)
    if not seeds:
        raise BenchError("need at least one seed")
    if axis in ("layer", "rho") and cfg.strategy == "none":
        raise BenchError(f"axis {axis!r} needs a pruning strategy, config has 'none'")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    # baseline (no pruning) per seed supplies T_orig for the speedup column
    baseline_wall: dict[int, float] = {}
    baseline_rows: dict[int, dict] = {}
    for seed in seeds:
        base_cfg = _cfg_for_value(cfg, "strategy", "none", seed)
        report, wall, _ = run_experiment(base_cfg, log=print)
        baseline_wall[seed] = wall
        baseline_rows[seed] = _sweep_row(axis, "none", seed, report, wall, wall)

    rows = []
    for value in values:
        for seed in seeds:
            if axis == "strategy" and value == "none":
                rows.append(baseline_rows[seed])
                continue
            run_cfg = _cfg_for_value(cfg, axis, value, seed)
            report, wall, _ = run_experiment(run_cfg, log=print)
            rows.append(_sweep_row(axis, value, seed, report, wall, baseline_wall[seed]))

    csv_path = out / "sweep.csv"
    _write_sweep_csv(csv_path, values, seeds, rows)
    _write_manifest(out, f"sweep:{axis}", cfg, ["sweep.csv"])
    print(f"[sweep] {len(rows)} runs -> {csv_path}")
    return 0


def _sweep_row(axis, value, seed, report: MetricsReport, wall, base_wall) -> dict:
    return {
        "axis": axis,
        "value": value,
        "seed": seed,
        "kind": "run",
        "recall5": report.recall[5],
        "recall10": report.recall[10],
        "ndcg5": report.ndcg[5],
        "ndcg10": report.ndcg[10],
        "wall_step_ms": wall,
        "speedup_vs_baseline": (base_wall - wall) / base_wall,
    }


def _write_sweep_csv(path, values, seeds, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for value in values:
            value_rows = [r for r in rows if r["value"] == value]
            for row in value_rows:
                writer.writerow({k: _fmt(row.get(k)) for k in SWEEP_COLUMNS})
            summary = {"axis": value_rows[0]["axis"], "value": value, "seed": "", "kind": "summary"}
            for metric in SWEEP_METRICS:
                series = [r[metric] for r in value_rows]
                summary[metric] = float(np.mean(series))
                summary[f"{metric}_std"] = float(np.std(series))
            writer.writerow({k: _fmt(summary.get(k)) for k in SWEEP_COLUMNS})


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != SWEEP_COLUMNS:
            raise BenchError(f"{path}: unexpected sweep CSV schema {reader.fieldnames}")
        return list(reader)


def cmd_report(args) -> int:
    out_rows = []
    for path in args.csv:
        rows = read_sweep_csv(path)
        runs = [r for r in rows if r["kind"] == "run"]
        experiments = {}
        for r in runs:
            experiments.setdefault((r["axis"], r["value"]), []).append(r)
        for (axis, value), group in experiments.items():
            for metric in SWEEP_METRICS:
                series = [float(r[metric]) for r in group]
                out_rows.append(
                    {
                        "experiment": axis,
                        "axis_value": value,
                        "metric": metric,
                        "mean": float(np.mean(series)),
                        "stddev": float(np.std(series)),
                        "n_seeds": len(series),
                    }
                )
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in out_rows:
            writer.writerow({k: _fmt(row[k]) for k in REPORT_COLUMNS})
    print(f"[report] {len(out_rows)} rows -> {args.out}")
    return 0


# ----------------------------------------------------------------------- main


def collect_overrides(args) -> dict[str, str]:
    overrides = {}
    for f in fields(BenchConfig):
        value = getattr(args, f"opt_{f.name}", None)
        if value is not None:
            overrides[f.name] = value
    return overrides


def _add_config_options(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="key=value config file")
    group = parser.add_argument_group("config overrides")
    for f in fields(BenchConfig):
        group.add_argument(f"--{f.name}", dest=f"opt_{f.name}", metavar="V", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rastp",
        description="Desk-scale SID generative recommendation with token pruning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus to disk")
    _add_config_options(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--binary", action="store_true", help="also write binary embeddings")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tokenize", help="fit codebooks for an embedding file")
    _add_config_options(p)
    p.add_argument("--embeddings", required=True, help="text or .bin embedding file")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("run", help="tokenize, train and evaluate one experiment")
    _add_config_options(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one axis across seeds, emit CSV")
    _add_config_options(p)
    p.add_argument("--axis", required=True, choices=["strategy", "layer", "rho"])
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="merge sweep CSVs into a long-format table")
    p.add_argument("csv", nargs="+", help="sweep CSV files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (
        TokenizerError,
        DataError,
        ModelError,
        PrunerError,
        TrainingDiverged,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
