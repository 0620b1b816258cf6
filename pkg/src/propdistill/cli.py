"""propdistill command-line interface."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import theory
from .config import RunConfig, resolve_config, write_resolved
from .data import SplitSpec, gen_chains, gen_homophily_regular, load_dataset, make_production_split, make_split
from .distill import (
    DistillConfig,
    TeacherConfig,
    distill_student,
    evaluate,
    load_matrix,
    save_matrix,
    summarize_student,
    train_teacher,
)
from .graph import GraphError, normalize_adjacency, remove_cross_edges, save_bundle
from .nn import load_checkpoint, save_checkpoint
from .propagation import clamp_renormalize, ppr_exact, propagate_recursive, propagate_recursive_fix

log = logging.getLogger("propdistill")

SPLIT_FILE = "split.json"


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _teacher_config(cfg: RunConfig, seed: int) -> TeacherConfig:
    return TeacherConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, dropout=cfg.dropout, epochs=cfg.epochs,
                         patience=cfg.patience, seed=seed, batch_size=cfg.batch_size, hidden=cfg.hidden)


def _distill_config(cfg: RunConfig, seed: int, **over) -> DistillConfig:
    base = dict(loss_variant=cfg.loss, alpha=cfg.alpha, gamma=cfg.gamma, steps=cfg.steps, lr=cfg.lr,
                weight_decay=cfg.weight_decay, dropout=cfg.dropout, epochs=cfg.epochs, patience=cfg.patience,
                seed=seed, batch_size=cfg.batch_size, hidden=(cfg.hidden,), kl_reverse=cfg.kl_reverse)
    base.update(over)
    return DistillConfig(**base)


def _require_data(cfg: RunConfig) -> Path:
    if not cfg.data:
        raise CliError("no dataset given (use --data or the 'data' config key)")
    path = Path(cfg.data)
    if not (path / "meta.json").exists():
        raise CliError(f"no dataset bundle at {path}")
    return path


def load_run(cfg: RunConfig, seed: int):
    """Graph and split for one seed. A split stored in the bundle wins over sampling."""
    path = _require_data(cfg)
    graph = load_dataset(path)
    if (path / SPLIT_FILE).exists():
        split = SplitSpec.load(path / SPLIT_FILE)
    else:
        split = make_split(graph, cfg.per_class_train, cfg.per_class_val, seed=seed)
    if cfg.scenario == "production":
        graph, split = make_production_split(graph, split, cfg.ind_fraction, seed=seed)
    return graph, split


def _graph_for_split(cfg: RunConfig, split: SplitSpec):
    graph = load_dataset(_require_data(cfg))
    if split.production:
        graph = remove_cross_edges(graph, split.observed(graph.num_nodes), split.ind_idx)
    return graph


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def _echo(cfg: RunConfig, out: Path):
    write_resolved(cfg, out)
    print(cfg.model_dump_json())


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    if args.kind == "chains":
        graph, split = gen_chains(args.chains, args.length, args.classes, seed=cfg.seeds[0], noise=args.noise)
    else:
        graph = gen_homophily_regular(args.n, args.d, args.h, args.classes, seed=cfg.seeds[0],
                                      feature_dim=args.feature_dim, signal=args.signal)
        split = None
    save_bundle(graph, out)
    if split is not None:
        split.save(out / SPLIT_FILE)
    _echo(cfg, out)
    print(json.dumps({"num_nodes": graph.num_nodes, "num_edges": graph.num_edges, "out": str(out)}))
    return 0


def cmd_train_teacher(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    seed = cfg.seeds[0]
    graph, split = load_run(cfg, seed)
    model, P_t, report = train_teacher(graph, split, cfg.teacher, _teacher_config(cfg, seed))
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    save_checkpoint(model, out / "teacher.json")
    save_matrix(P_t, out / "teacher_probs.csv")
    split.save(out / SPLIT_FILE)
    report.to_jsonl(out / "teacher_log.jsonl")
    pred = P_t.argmax(axis=1)
    summary = {
        "seed": seed,
        "teacher": cfg.teacher,
        "best_epoch": report.best_epoch,
        "val_acc": report.best_val_acc,
        "test_acc": float(np.mean(pred[split.test_idx] == graph.labels[split.test_idx])),
    }
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary))
    return 0


def _load_teacher_outputs(cfg: RunConfig):
    if not cfg.teacher_dir:
        raise CliError("distill needs --teacher-dir pointing at a train-teacher output")
    tdir = Path(cfg.teacher_dir)
    for name in ("teacher_probs.csv", SPLIT_FILE):
        if not (tdir / name).exists():
            raise CliError(f"missing {name} in {tdir}")
    split = SplitSpec.load(tdir / SPLIT_FILE)
    if (cfg.scenario == "production") != split.production:
        raise CliError(f"scenario {cfg.scenario!r} does not match the teacher's split")
    return load_matrix(tdir / "teacher_probs.csv"), split


def cmd_distill(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    seed = cfg.seeds[0]
    P_t, split = _load_teacher_outputs(cfg)
    graph = _graph_for_split(cfg, split)
    model, report = distill_student(graph, P_t, split, _distill_config(cfg, seed))
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    save_checkpoint(model, out / "student.json", extra={"loss": cfg.loss})
    report.to_jsonl(out / "student_log.jsonl")
    summary = {"seed": seed, "loss": cfg.loss, "best_epoch": report.best_epoch, "val_acc": report.best_val_acc}
    summary.update(summarize_student(model, load_dataset(_require_data(cfg)), split))
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    graph = load_dataset(_require_data(cfg))
    split_path = Path(args.split) if args.split else Path(cfg.data) / SPLIT_FILE
    if not split_path.exists():
        raise CliError(f"no split file at {split_path}")
    split = SplitSpec.load(split_path)
    model = load_checkpoint(args.model)
    if model.kind == "mlp":
        result = summarize_student(model, graph, split)
    else:
        context = graph.mean_aggregator() if model.kind == "sage" else normalize_adjacency(graph)
        result = {"test_acc": evaluate(model, graph.features, graph.labels, split.test_idx, context)}
    _echo(cfg, Path(cfg.out))
    print(json.dumps(result))
    return 0


def _sweep_cell(job):
    cfg, seed, loss, gamma, steps, P_t, split = job
    graph = _graph_for_split(cfg, split)
    dcfg = _distill_config(cfg, seed, loss_variant=loss, gamma=gamma, steps=steps)
    model, report = distill_student(graph, P_t, split, dcfg)
    row = {"loss": loss, "gamma": gamma, "steps": steps, "seed": seed, "best_epoch": report.best_epoch}
    row.update(summarize_student(model, load_dataset(_require_data(cfg)), split))
    return row


def sweep_jobs(cfg: RunConfig):
    """(seed, loss, gamma, steps) cells; plain ignores gamma/steps so it runs once per seed."""
    if not (cfg.seeds and cfg.losses and cfg.gammas and cfg.steps_grid):
        raise CliError("empty sweep grid")
    for seed in cfg.seeds:
        for loss in cfg.losses:
            if loss == "plain":
                yield seed, loss, cfg.gammas[0], cfg.steps_grid[0]
                continue
            grid_t = cfg.steps_grid if loss in ("pnd", "pnd_fix") else cfg.steps_grid[:1]
            for gamma in cfg.gammas:
                for steps in grid_t:
                    yield seed, loss, gamma, steps


def cmd_sweep(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    cells = list(sweep_jobs(cfg))
    teachers = {}
    for seed in cfg.seeds:
        graph, split = load_run(cfg, seed)
        _, P_t, _ = train_teacher(graph, split, cfg.teacher, _teacher_config(cfg, seed))
        teachers[seed] = (P_t, split)
    jobs = [(cfg, s, loss, g, t, *teachers[s]) for s, loss, g, t in cells]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(j) for j in jobs]
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    metric = "prod_score" if cfg.scenario == "production" else "test_acc"
    with open(out / "sweep_runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    groups = {}
    for r in rows:
        groups.setdefault((r["loss"], r["gamma"], r["steps"]), []).append(r[metric])
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss", "gamma", "steps", "n_seeds", f"mean_{metric}", f"std_{metric}"])
        for (loss, g, t), vals in groups.items():
            w.writerow([loss, g, t, len(vals), float(np.mean(vals)), float(np.std(vals))])
    print(json.dumps({"cells": len(groups), "runs": len(rows), "out": str(out / "sweep.csv")}))
    return 0


def _faulty_beta(tp):
    # negative control: drops the self-propagation term from the true-class score
    b, bw = theory.beta_exact(tp)
    return b - (1 - tp.gamma) * tp.q, bw


def cmd_verify_theorem(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)
    beta_fn = _faulty_beta if args.inject_fault else theory.beta_exact
    rep = theory.verify_theorem(beta_fn=beta_fn)
    rep.write_csv(out / "theorem_cells.csv")
    summary = {
        "cells": len(rep.rows),
        "agreement": rep.agreement,
        "agreement_large_k": rep.agreement_large_k,
        "band_violations": rep.band_violations,
        "monotone_lines": rep.monotone_lines,
        "monotone_failures": rep.monotone_failures,
        "epsilon_bound_monotone": rep.bound_monotone,
        "passed": rep.passed,
    }
    if args.epsilon_scan:
        eps_grid = np.linspace(0.0, 0.99, 34)
        lines = sorted({(r["num_classes"], r["h"], r["p"], r["gamma"]) for r in rep.rows})
        with open(out / "epsilon_scan.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["num_classes", "h", "p", "gamma", "eps", "q_lo", "q_hi", "width"])
            for k, h, p, g in lines:
                for e in eps_grid:
                    lo, hi = theory.correction_interval(k, h, p, g, e)
                    w.writerow([k, h, p, g, e, lo, hi, max(0.0, hi - lo)])
        summary["epsilon_scan_monotone"] = rep.monotone_failures == 0
    _write_json(out / "theorem_summary.json", summary)
    print(json.dumps(summary))
    return 0 if rep.passed else 1


CASE_METHODS = ("plain", "invkd", "pnd", "pnd_fix")


def cmd_chains_case_study(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    path = _require_data(cfg)
    if not (path / SPLIT_FILE).exists():
        raise CliError(f"{path} has no {SPLIT_FILE}; generate it with 'gen-data chains'")
    graph = load_dataset(path)
    split = SplitSpec.load(path / SPLIT_FILE)
    far = split.extra.get("far_idx")
    if far is None or far.size == 0:
        raise CliError("split has no far-node set")
    adj = normalize_adjacency(graph)
    near = np.setdiff1d(np.arange(graph.num_nodes), far)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out)

    result = {"seeds": cfg.seeds, "gamma": cfg.gamma, "steps": cfg.steps, "far_acc": {m: [] for m in CASE_METHODS},
              "teacher_far_acc": [], "teacher_near_acc": []}
    for seed in cfg.seeds:
        _, P_t, _ = train_teacher(graph, split, cfg.teacher, _teacher_config(cfg, seed))
        pred = P_t.argmax(axis=1)
        result["teacher_far_acc"].append(float(np.mean(pred[far] == graph.labels[far])))
        result["teacher_near_acc"].append(float(np.mean(pred[near] == graph.labels[near])))
        if seed == cfg.seeds[0]:
            views = {
                "teacher": P_t,
                "inverse_propagated": ppr_exact(P_t, adj, min(cfg.gamma, 0.999)),
                "propagated": propagate_recursive(P_t, adj, cfg.gamma, cfg.steps),
                "propagated_fix": propagate_recursive_fix(P_t, adj, cfg.gamma, cfg.steps, split.train_idx),
            }
            for name, M in views.items():
                save_matrix(clamp_renormalize(M), out / f"matrix_{name}.csv")
        for method in CASE_METHODS:
            model, _ = distill_student(graph, P_t, split, _distill_config(cfg, seed, loss_variant=method), adj)
            result["far_acc"][method].append(evaluate(model, graph.features, graph.labels, far))
    result["far_acc_mean"] = {m: float(np.mean(v)) for m, v in result["far_acc"].items()}
    result["gap_pnd_fix_vs_plain"] = result["far_acc_mean"]["pnd_fix"] - result["far_acc_mean"]["plain"]
    _write_json(out / "case_study.json", result)
    print(json.dumps({"far_acc_mean": result["far_acc_mean"], "gap": result["gap_pnd_fix_vs_plain"]}))
    return 0


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--data", help="dataset bundle directory")
    p.add_argument("--seed", type=int, help="single seed (shorthand for --seeds N)")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--scenario", choices=["transductive", "production"])
    p.add_argument("--teacher", choices=["sage", "appnp"])
    p.add_argument("--loss", choices=["plain", "invkd", "pnd", "pnd-fix", "conv"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--kl-reverse", action="store_true", default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="propdistill", description="GNN-to-MLP distillation with propagation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset bundle")
    p.add_argument("kind", choices=["chains", "homophily"])
    p.add_argument("--chains", type=int, default=30)
    p.add_argument("--length", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.0, help="uniform feature noise on non-base chain nodes")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--h", type=float, default=0.8)
    p.add_argument("--feature-dim", type=int, default=128)
    p.add_argument("--signal", type=float, default=0.15)
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train a GNN teacher and dump its soft labels")
    _common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a student MLP from a trained teacher")
    _common(p)
    p.add_argument("--teacher-dir")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sweep", help="grid over loss x gamma x steps x seed")
    _common(p)
    p.add_argument("--gammas")
    p.add_argument("--steps-grid")
    p.add_argument("--losses")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-theorem", help="check the self-correction interval against exact scores")
    _common(p)
    p.add_argument("--epsilon-scan", action="store_true")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("chains-case-study", help="far-node accuracy per method on Chains")
    _common(p)
    p.set_defaults(func=cmd_chains_case_study)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on a split")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split")
    p.set_defaults(func=cmd_eval)
    return parser


FLAG_KEYS = ("data", "out", "scenario", "teacher", "loss", "gamma", "steps", "alpha", "epochs", "patience", "lr",
             "dropout", "hidden", "kl_reverse", "teacher_dir", "gammas", "steps_grid", "losses")


def _flags(args) -> dict:
    flags = {k: getattr(args, k, None) for k in FLAG_KEYS}
    if args.seeds is not None:
        flags["seeds"] = args.seeds
    if args.seed is not None:
        flags["seeds"] = [args.seed]
    return flags


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, _flags(args))
        if args.command == "gen-data" and args.classes is None:
            args.classes = 10 if args.kind == "chains" else 5
        return args.func(args, cfg)
    except (CliError, GraphError, ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
