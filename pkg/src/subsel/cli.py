"""Command-line entry point: split, search, apply, baseline, eval, gradcheck, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .apply import (
    SCRATCH,
    ApplyConfig,
    ConstantAssignment,
    Node2LinkModel,
    TableAssignment,
    apply_node2link,
    baseline_fixed_k,
    baseline_random,
    evaluate_model,
    report_to_dict,
    selection_table_for,
)
from .config import build_configs, load_config
from .errors import SubselError
from .graph import Graph, atomic_write_text, load_graph, read_split_manifest, split_edges, write_split_manifest
from .manifest import RunManifest
from .ndgrad import load_checkpoint, save_checkpoint
from .selector import SelectionTable, distribution, render_distribution
from .trainer import EpochRecord, SearchModel, SearchResult, TrainConfig, joint_train, search

log = logging.getLogger("subsel")

SPLIT_DIR = "split"
TABLE_FILE = "selection.tsv"
HISTORY_FILE = "history.jsonl"
TIMING_FILE = "timing.jsonl"
METRICS_FILE = "metrics.json"
MODEL_FILE = "model.ckpt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _dump_jsonl(path: Path, rows) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _dump_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _graph_inputs(args) -> dict:
    if not args.edges:
        raise UsageError("--edges is required (or --split pointing at a split directory)")
    for p in (args.edges, args.features):
        if p and not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    return {
        "edges": str(Path(args.edges).resolve()),
        "features": str(Path(args.features).resolve()) if args.features else None,
        "feature_dim": args.feature_dim,
        "feature_seed": args.feature_seed,
    }


def _load(inputs: dict) -> Graph:
    return load_graph(inputs["edges"], inputs["features"], inputs["feature_dim"], inputs["feature_seed"])


def _configs(args) -> tuple[TrainConfig, ApplyConfig]:
    raw = load_config(args.config) if args.config else {}
    return build_configs(raw, args.seed)


def _split_from_dir(split_dir: Path):
    """(graph, split, graph inputs) from a directory written by ``split``."""
    if not (split_dir / "manifest.json").is_file():
        raise UsageError(f"not a split directory: {split_dir}")
    inputs = RunManifest.load(split_dir).inputs
    graph = _load(inputs)
    return graph, read_split_manifest(graph, split_dir), inputs


def _split_for(args, seed: int):
    """Reuse --split when given, else split --edges with ``seed``."""
    if args.split:
        return _split_from_dir(Path(args.split))
    inputs = _graph_inputs(args)
    graph = _load(inputs)
    fracs = _fractions(args.fractions)
    return graph, split_edges(graph, *fracs, seed=seed), inputs


def _fractions(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise UsageError("--fractions takes three comma-separated numbers")
    return parts[0], parts[1], parts[2]


def _write_split(split, inputs: dict, out: Path, command: str, seed: int, timings: dict) -> None:
    write_split_manifest(split, out)
    RunManifest(command, {"fractions": list(split.fractions)}, {"split": seed},
                RunManifest.describe(split.graph), timings=timings, inputs=inputs).save(out)


def _history_rows(history: list[EpochRecord]) -> list[dict]:
    return [{"epoch": h.epoch, "train_loss": h.train_loss, "valid_loss": h.valid_loss, "valid_auc": h.valid_auc}
            for h in history]


def _search_meta(cfg: TrainConfig, best_epoch: int) -> dict:
    return {"K": cfg.K, "D": cfg.D, "hidden": cfg.hidden_dim, "best_epoch": best_epoch}


def _save_apply_run(out: Path, result, meta: dict, table: SelectionTable | None) -> None:
    save_checkpoint(out / MODEL_FILE, result.model.named(), meta)
    if table is not None:
        table.save(out / TABLE_FILE)
    _dump_jsonl(out / HISTORY_FILE, result.history)
    _dump_json(out / METRICS_FILE, report_to_dict(result.reports))


def _print_reports(reports: dict) -> None:
    for name, r in reports.items():
        hits = " ".join(f"hits@{n}={v:.4f}" for n, v in r.hits_at_n.items())
        print(f"{name}: auc={r.auc:.4f} ap={r.ap:.4f} {hits}".rstrip())


# ---------------------------------------------------------------- commands


def cmd_split(args) -> int:
    train_cfg, _ = _configs(args)
    inputs = _graph_inputs(args)
    t0 = time.perf_counter()
    graph = _load(inputs)
    split = split_edges(graph, *_fractions(args.fractions), seed=train_cfg.seed)
    out = _out_dir(args)
    _write_split(split, inputs, out, "split", train_cfg.seed, {"split": time.perf_counter() - t0})
    print(f"train={len(split.train_pos)} valid={len(split.valid_pos)} test={len(split.test_pos)} -> {out}")
    return 0


def cmd_search(args) -> int:
    train_cfg, apply_cfg = _configs(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    graph, split, inputs = _split_for(args, train_cfg.seed)
    _write_split(split, inputs, out / SPLIT_DIR, "split", split.seed, {})
    t1 = time.perf_counter()
    runner = joint_train if args.joint else search
    result = runner(graph, split, train_cfg)
    t2 = time.perf_counter()
    meta = _search_meta(train_cfg, result.best_epoch)
    save_checkpoint(out / "search.ckpt", result.model.named(), meta)
    save_checkpoint(out / "search_final.ckpt", result.final_params, meta)
    _dump_jsonl(out / HISTORY_FILE, _history_rows(result.history))
    # wall-clock lives in its own file so the history stays byte-reproducible
    _dump_jsonl(out / TIMING_FILE, [{"epoch": i, "elapsed_seconds": s} for i, s in enumerate(result.epoch_seconds)])
    table = selection_table_for(result, split)
    table.save(out / TABLE_FILE)
    t3 = time.perf_counter()
    RunManifest(
        "search-joint" if args.joint else "search",
        {"train": train_cfg.to_dict(), "apply": apply_cfg.to_dict()},
        {"train": train_cfg.seed, "split": split.seed},
        RunManifest.describe(graph),
        timings={"load": t1 - t0, "search": t2 - t1, "table": t3 - t2},
        inputs={**inputs, "split_dir": str((out / SPLIT_DIR).resolve())},
    ).save(out)
    best = result.history[result.best_epoch]
    print(f"best_epoch={result.best_epoch} valid_auc={best.valid_auc:.4f} "
          f"hypergradient_calls={result.hypergradient_calls} table={out / TABLE_FILE}")
    return 0


def _load_search(search_dir: Path) -> tuple[SearchResult, TrainConfig]:
    manifest = RunManifest.load(search_dir)
    cfg = TrainConfig(**manifest.config["train"])
    params, meta = load_checkpoint(search_dir / "search.ckpt")
    model = SearchModel.from_named(params)
    result = SearchResult(model.selector, model.encoder, model.predictor, [], int(meta["best_epoch"]), cfg)
    return result, cfg


def cmd_apply(args) -> int:
    if not args.search:
        raise UsageError("--search is required")
    search_dir = Path(args.search)
    if not (search_dir / "search.ckpt").is_file():
        raise UsageError(f"no search checkpoint in {search_dir}")
    _, apply_cfg = _configs(args)
    if args.init_mode:
        apply_cfg.init_mode = args.init_mode
        apply_cfg.validate()
    out = _out_dir(args)
    t0 = time.perf_counter()
    result, train_cfg = _load_search(search_dir)
    graph, split, inputs = _split_from_dir(search_dir / SPLIT_DIR)
    table = SelectionTable.load(search_dir / TABLE_FILE)
    t1 = time.perf_counter()
    applied = apply_node2link(result, table, split, apply_cfg, train_cfg)
    t2 = time.perf_counter()
    _write_split(split, inputs, out / SPLIT_DIR, "split", split.seed, {})
    _save_apply_run(out, applied, {"assignment": "table", "K": table.K, "init_mode": apply_cfg.init_mode}, table)
    RunManifest(
        "apply",
        {"train": train_cfg.to_dict(), "apply": apply_cfg.to_dict(), "search_dir": str(search_dir.resolve())},
        {"train": train_cfg.seed, "apply": apply_cfg.seed, "split": split.seed},
        RunManifest.describe(graph),
        timings={"load": t1 - t0, "apply": t2 - t1},
        inputs=inputs,
    ).save(out)
    _print_reports(applied.reports)
    return 0


def cmd_baseline(args) -> int:
    train_cfg, apply_cfg = _configs(args)
    apply_cfg.init_mode = SCRATCH
    out = _out_dir(args)
    t0 = time.perf_counter()
    graph, split, inputs = _split_for(args, train_cfg.seed)
    t1 = time.perf_counter()
    if args.mode == "fixed-k":
        k = args.k or train_cfg.K
        result = baseline_fixed_k(split, k, train_cfg, apply_cfg)
        meta, table = {"assignment": "fixed", "k": k}, None
    else:
        result, table = baseline_random(split, train_cfg, apply_cfg)
        meta = {"assignment": "table", "K": table.K}
    t2 = time.perf_counter()
    _write_split(split, inputs, out / SPLIT_DIR, "split", split.seed, {})
    _save_apply_run(out, result, meta, table)
    RunManifest(
        f"baseline-{args.mode}",
        {"train": train_cfg.to_dict(), "apply": apply_cfg.to_dict(), **meta},
        {"train": train_cfg.seed, "apply": apply_cfg.seed, "split": split.seed},
        RunManifest.describe(graph),
        timings={"load": t1 - t0, "train": t2 - t1},
        inputs=inputs,
    ).save(out)
    _print_reports(result.reports)
    return 0


def cmd_eval(args) -> int:
    if not args.run:
        raise UsageError("--run is required")
    run_dir = Path(args.run)
    if not (run_dir / MODEL_FILE).is_file():
        raise UsageError(f"no model checkpoint in {run_dir}")
    params, meta = load_checkpoint(run_dir / MODEL_FILE)
    graph, split, _ = _split_from_dir(run_dir / SPLIT_DIR)
    if meta["assignment"] == "fixed":
        assignment = ConstantAssignment(int(meta["k"]))
    else:
        assignment = TableAssignment(SelectionTable.load(run_dir / TABLE_FILE))
    reports = evaluate_model(Node2LinkModel.from_named(params), split, assignment)
    _dump_json(_out_dir(args) / "eval_metrics.json", report_to_dict(reports))
    _print_reports(reports)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    seed = 0 if args.seed is None else args.seed
    errors = run_gradcheck(seed)
    for name, err in errors.items():
        print(f"{name}\trel_err={err:.3e}")
    worst = max(errors.values())
    if args.out:
        out = _out_dir(args)
        _dump_json(out / "gradcheck.json", errors)
        RunManifest("gradcheck", {}, {"gradcheck": seed}, {}).save(out)
    print(f"max_rel_err={worst:.3e}")
    return 0 if worst < 1e-4 else 1


def cmd_report(args) -> int:
    if not args.table:
        raise UsageError("--table is required")
    path = Path(args.table)
    if not path.is_file():
        raise UsageError(f"file not found: {path}")
    table = SelectionTable.load(path)
    counts = distribution(table)
    text = render_distribution(counts)
    print(text, end="")
    print(f"total={int(counts.sum())} edges={len(table)} nonzero_cells={int(np.count_nonzero(counts))}")
    if args.out:
        out = _out_dir(args)
        atomic_write_text(out / "distribution.tsv", text)
        RunManifest("report", {"table": str(path.resolve())}, {}, {"num_edges": len(table)}).save(out)
    return 0


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", required=out_required, help="output directory")


def _graph_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", help="directory written by 'subsel split'")
    p.add_argument("--edges", help="edge list (used when --split is absent)")
    p.add_argument("--features", help="feature matrix, one row per node")
    p.add_argument("--feature-dim", type=int, default=256, help="random feature width without --features")
    p.add_argument("--feature-seed", type=int, default=0)
    p.add_argument("--fractions", default="0.85,0.05,0.10", help="train,valid,test")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subsel", description=__doc__)
    parser.add_argument("--version", action="version", version=f"subsel {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="split a graph into train/valid/test manifests")
    _common(p)
    _graph_flags(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("search", help="bi-level search; writes checkpoints, history and a selection table")
    _common(p)
    _graph_flags(p)
    p.add_argument("--joint", action="store_true", help="single-level joint training instead")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("apply", help="retrain on the hardened selection table")
    _common(p)
    p.add_argument("--search", help="directory written by 'subsel search'")
    p.add_argument("--init-mode", choices=["pretrained", "scratch"])
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("baseline", help="fixed-k or random hop assignment")
    _common(p)
    _graph_flags(p)
    p.add_argument("--mode", choices=["fixed-k", "random"], required=True)
    p.add_argument("--k", type=int, help="hop for fixed-k (default: K)")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="recompute metrics from an apply/baseline run directory")
    _common(p)
    p.add_argument("--run", help="run directory with model.ckpt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="central-difference check of all gradients on the 6-node fixture")
    _common(p, out_required=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="K x K distribution of a selection table")
    _common(p, out_required=False)
    p.add_argument("--table", help="selection table file")
    p.set_defaults(func=cmd_report)
    return parser


def _limit_threads():
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("SUBSEL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SUBSEL_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("SUBSEL_THREADS must be >= 1")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _limit_threads():
            return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except SubselError as exc:
        print(f"subsel: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
