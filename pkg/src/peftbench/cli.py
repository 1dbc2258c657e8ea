"""Command-line entry point for the benchmark workflow.

Verbs: count-params, train, sweep, hpo, gen-train, gen-eval, rank, pareto,
ingest-check. Exit codes: 0 success, 1 usage error, 2 runtime/data error.
Flags override config-file fields which override defaults; --seed (or the
PEFTBENCH_SEED environment variable) pins every random stream.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .bench import (ExperimentConfig, default_cache_dir, format_rank_csv,
                    load_model, parse_rows_csv, pareto_front, pretrained_snapshot,
                    rank_table, read_metric_matrix_csv, resolve_dataset,
                    run_experiment, run_generative_eval, run_generative_train,
                    subsample_fraction, sweep_series_csv, sweep_volume)
from .data import ingest, write_pgm
from .diffusion import diffusion_sample
from .hpo import SearchSpace, LogUniform, run_search
from .models import build_model
from .peft import PeftSpec, make_strategy, trainable_count
from .rng import RngStream
from .training import TrainConfig, train_loop


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _fractions_arg(text: str):
    try:
        values = [float(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from None
    if not values or any(not 0 < v <= 1 for v in values):
        raise argparse.ArgumentTypeError(
            f"fractions must lie in (0, 1], got {text!r}"
        )
    return values


def _seeds_arg(text: str):
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def _default_seed():
    env = os.environ.get("PEFTBENCH_SEED")
    return int(env) if env else None


def _write_or_print(args, text: str):
    if getattr(args, "out", None):
        with open(args.out, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _emit_obj(args, obj, text: str):
    if getattr(args, "json", False):
        _write_or_print(args, json.dumps(obj, sort_keys=True, indent=2) + "\n")
    else:
        _write_or_print(args, text)


def _hyper_from_args(args) -> dict:
    hyper = {}
    for key in ("rank", "alpha", "bottleneck", "scale", "kernel"):
        val = getattr(args, key, None)
        if val is not None:
            hyper[key] = val
    return hyper


def _load_config(args) -> ExperimentConfig:
    with open(args.config) as fh:
        cfg = ExperimentConfig.from_json(json.load(fh))
    if getattr(args, "method", None):
        cfg.peft = PeftSpec(args.method, _hyper_from_args(args))
    if getattr(args, "fraction", None) is not None:
        cfg.fraction = args.fraction
    if getattr(args, "seeds", None):
        cfg.seeds = args.seeds
    elif getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "cache_dir", None):
        cfg.cache_dir = args.cache_dir
    return cfg


def _row_text(row) -> str:
    return (
        "method,dataset,metric,std,params\n"
        f"{row.method},{row.dataset},{row.metric:.4f},{row.std:.4f},"
        f"{row.trainable_params}\n"
    )


# ---------------------------------------------------------------------------
# verbs


def cmd_count_params(args) -> int:
    model = build_model(args.arch, json.loads(args.arch_cfg) if args.arch_cfg else None,
                        rng=RngStream(args.seed or 0))
    spec = PeftSpec(args.method, _hyper_from_args(args))
    adapted = make_strategy(model, spec, rng=RngStream(args.seed or 0))
    trainable, total, ratio = trainable_count(adapted)
    obj = {"arch": args.arch, "method": args.method, "trainable": trainable,
           "total": total, "ratio": ratio}
    _emit_obj(args, obj,
              f"trainable={trainable} total={total} ratio={ratio:.6f}\n")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    row = run_experiment(cfg)
    _emit_obj(args, row.to_json(), _row_text(row))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    methods = None
    if args.methods:
        methods = [PeftSpec(m, _hyper_from_args(args)) for m in args.methods.split(",")]
    rows = sweep_volume(cfg, args.fractions, methods=methods, jobs=args.jobs)
    _emit_obj(args, [r.to_json() for r in rows], sweep_series_csv(rows))
    return 0


def cmd_hpo(args) -> int:
    cfg = _load_config(args)
    if args.space:
        with open(args.space) as fh:
            space = SearchSpace.from_json(json.load(fh))
    else:
        space = SearchSpace({"learning_rate": LogUniform(1e-4, 1e-1)})
    seed = args.seed if args.seed is not None else 0

    dataset = resolve_dataset(cfg.dataset)
    if cfg.fraction < 1.0:
        dataset = subsample_fraction(
            dataset, cfg.fraction,
            RngStream(cfg.dataset.get("seed", 0)).child(f"frac-{cfg.fraction}"))
    theta0 = pretrained_snapshot(cfg)
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    peft_keys = ("rank", "alpha", "bottleneck", "scale", "kernel")

    def objective(config, budget):
        overrides = {k: v for k, v in config.items() if k in train_keys}
        if "batch_size" in overrides:
            overrides["batch_size"] = int(round(overrides["batch_size"]))
        tcfg = dataclasses.replace(cfg.train, max_epochs=budget, patience=budget,
                                   seed=seed, **overrides)
        hyper = dict(cfg.peft.hyper)
        hyper.update({k: v for k, v in config.items() if k in peft_keys})
        spec = PeftSpec(cfg.peft.method, hyper)
        model = load_model(theta0)
        model.reset_head(dataset.num_classes)
        adapted = make_strategy(model, spec, rng=RngStream(seed).child("peft-init"))
        report = train_loop(adapted, dataset.splits_dict(), tcfg)
        return report.best_val_metric

    best, ledger = run_search(space, objective, max_trials=args.max_trials,
                              eta=args.eta, min_budget=args.min_budget,
                              max_budget=args.max_budget, seed=seed)
    text = (f"best trial {best.id}: metric={best.metric:.4f} "
            f"config={json.dumps(best.config, sort_keys=True)}\n")
    if args.json or args.out:
        _write_or_print(args, json.dumps(ledger, sort_keys=True, indent=2) + "\n")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gen_train(args) -> int:
    cfg = _load_config(args)
    _, _, _, report = run_generative_train(cfg)
    if args.curve:
        with open(args.curve, "w", newline="\n") as fh:
            fh.write(report.curve_csv())
    _emit_obj(args, report.to_json(),
              f"best_val={report.best_val_metric:.4f} test={report.test_metric:.4f} "
              f"epochs={report.epochs_run}\n")
    return 0


def cmd_gen_eval(args) -> int:
    cfg = _load_config(args)
    row = run_generative_eval(cfg, n_samples=args.samples)
    if args.export:
        adapted, dcfg, dataset, _ = run_generative_train(cfg, seed=cfg.seeds[0])
        rng = RngStream(cfg.seeds[0]).child("export")
        cond = rng.child("cond").integers(0, dataset.num_classes, (args.samples,))
        samples = diffusion_sample(adapted, cond, args.samples,
                                   rng.child("sample"), dcfg)
        outdir = Path(args.export)
        outdir.mkdir(parents=True, exist_ok=True)
        lo, hi = samples.min(), samples.max()
        span = (hi - lo) if hi > lo else 1.0
        for i, img in enumerate(samples):
            write_pgm(outdir / f"sample-{i:04d}-c{int(cond[i])}.pgm",
                      (img[0] - lo) / span)
    _emit_obj(args, row.to_json(), _row_text(row))
    return 0


def cmd_rank(args) -> int:
    direction = "higher-better" if args.direction == "higher" else "lower-better"
    rows = read_metric_matrix_csv(args.input, direction)
    table = rank_table(rows)
    obj = {
        "methods": table.methods,
        "datasets": table.datasets,
        "ranks": table.ranks.tolist(),
        "avg_metric": table.avg_metric,
        "avg_rank": table.avg_rank,
    }
    _emit_obj(args, obj, format_rank_csv(table))
    return 0


def cmd_pareto(args) -> int:
    rows = parse_rows_csv(Path(args.input).read_text())
    front = pareto_front(rows)
    lines = ["method,dataset,metric,std,params"]
    for r in front:
        lines.append(f"{r.method},{r.dataset},{r.metric:.4f},{r.std:.4f},"
                     f"{r.trainable_params}")
    _emit_obj(args, [r.to_json() for r in front], "\n".join(lines) + "\n")
    return 0


def cmd_ingest_check(args) -> int:
    ds = ingest(args.path, args.format, seed=args.seed or 0)
    obj = {
        "name": ds.name,
        "items": int(len(ds.images)),
        "classes": int(ds.num_classes),
        "image_size": list(ds.images.shape[2:]),
        "splits": {k: int(len(v)) for k, v in ds.splits.items()},
        "hash": ds.content_hash(),
    }
    text = (f"{ds.name}: {obj['items']} items, {obj['classes']} classes, "
            f"splits {obj['splits']}, hash {obj['hash']}\n")
    _emit_obj(args, obj, text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="peftbench",
                     description="PEFT strategies benchmark harness")
    sub = parser.add_subparsers(dest="verb", metavar="VERB")

    def add(name, fn, help_, config=False):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=_default_seed(),
                       help="seed for every random stream (env PEFTBENCH_SEED)")
        p.add_argument("--out", help="write results to this path instead of stdout")
        p.add_argument("--json", action="store_true", help="JSON output")
        if config:
            p.add_argument("--config", required=True,
                           help="experiment config JSON (schema 1)")
            p.add_argument("--seeds", type=_seeds_arg,
                           help="comma-separated seed list override")
            p.add_argument("--cache-dir", help="pre-training snapshot cache")
        return p

    p = add("count-params", cmd_count_params,
            "trainable/total parameter accounting for a strategy")
    p.add_argument("--arch", required=True,
                   choices=["mini-cnn", "mini-vit", "mini-denoiser"])
    p.add_argument("--method", required=True)
    p.add_argument("--arch-cfg", help="JSON dict of architecture dims")
    _add_hyper_flags(p)

    p = add("train", cmd_train, "run one fine-tuning experiment", config=True)
    p.add_argument("--method", help="override the config's method")
    p.add_argument("--fraction", type=float, help="training-set fraction")
    _add_hyper_flags(p)

    p = add("sweep", cmd_sweep, "data-volume sweep over fractions", config=True)
    p.add_argument("--fractions", type=_fractions_arg, required=True,
                   help="descending comma-separated fractions, e.g. 1,0.5,0.1")
    p.add_argument("--methods", help="comma-separated methods to compare")
    p.add_argument("--jobs", type=int, default=1, help="concurrent grid cells")
    _add_hyper_flags(p)

    p = add("hpo", cmd_hpo, "successive-halving hyperparameter search",
            config=True)
    p.add_argument("--space", help="search-space JSON file")
    p.add_argument("--max-trials", type=int, default=27)
    p.add_argument("--eta", type=int, default=3)
    p.add_argument("--min-budget", type=int, default=2)
    p.add_argument("--max-budget", type=int, default=18)

    p = add("gen-train", cmd_gen_train, "fine-tune the conditional denoiser",
            config=True)
    p.add_argument("--curve", help="also write the per-epoch curve CSV here")

    p = add("gen-eval", cmd_gen_eval,
            "sample the fine-tuned denoiser and report Fréchet distance",
            config=True)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--export", help="directory for sampled PGM images")

    p = add("rank", cmd_rank, "dense-rank a metric matrix CSV")
    p.add_argument("--input", required=True, help="matrix CSV: dataset rows x method columns")
    p.add_argument("--direction", choices=["higher", "lower"], required=True)

    p = add("pareto", cmd_pareto, "filter a results CSV to its Pareto front")
    p.add_argument("--input", required=True, help="results CSV (report schema)")

    p = add("ingest-check", cmd_ingest_check, "validate an external dataset")
    p.add_argument("--path", required=True)
    p.add_argument("--format", choices=["image-folder", "csv"], required=True)

    return parser


def _add_hyper_flags(p):
    p.add_argument("--rank", type=int, help="lora rank")
    p.add_argument("--alpha", type=float, help="lora scaling numerator")
    p.add_argument("--bottleneck", type=int, help="adaptformer bottleneck dim")
    p.add_argument("--scale", type=float, help="adaptformer branch scale")
    p.add_argument("--kernel", type=int, help="tsa adapter kernel size")


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    if not getattr(args, "verb", None):
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError:
        return 1
    except BrokenPipeError:
        return 0
    except Exception as exc:  # runtime/data errors
        sys.stderr.write(f"peftbench: error: {exc}\n")
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
