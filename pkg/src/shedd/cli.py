"""Command-line entry point: generate synthetic benchmarks, train (single
config or the full ablation suite), evaluate checkpoints, and build reports
with tables and figures.

Exit codes: 0 success, 2 configuration errors, 3 data errors, 4 runtime
failures. SHEDD_THREADS caps BLAS threads (default 1 for bitwise-reproducible
runs) and must be honored before numpy loads, so heavy imports happen inside
main()."""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _apply_thread_cap():
    threads = os.environ.get("SHEDD_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, threads)


def _parse_seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        from .errors import ConfigError
        raise ConfigError(f"--seeds expects comma-separated integers, got '{text}'")
    if not seeds:
        from .errors import ConfigError
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def _prepare_out_dir(path, force):
    from .errors import ConfigError
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(f"output directory '{path}' is not empty (use --force)")
    os.makedirs(path, exist_ok=True)


def _write_provenance(path, payload):
    with open(os.path.join(path, "provenance.json"), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def _load_run_config(args):
    from . import config as C
    if getattr(args, "config", None):
        cfg = C.load_config(args.config)
    else:
        cfg = C.default_config()
    return cfg


def _load_datasets(data_dir):
    from . import data as D
    from .errors import DataError
    src_path = os.path.join(data_dir, "source_manifest.json")
    tgt_path = os.path.join(data_dir, "target_manifest.json")
    for p in (src_path, tgt_path):
        if not os.path.exists(p):
            raise DataError(f"dataset manifest missing: {p}")
    return D.load_dataset(src_path), D.load_dataset(tgt_path)


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args):
    from . import config as C
    from . import data as D
    from . import __version__

    cfg = _load_run_config(args)
    if args.print_defaults:
        print(C.dumps_config(C.default_config()))
        return EXIT_OK

    _prepare_out_dir(args.out, args.force)
    source, target = D.generate_synthetic_benchmark(cfg.benchmark)
    D.write_dataset(source, args.out)
    D.write_dataset(target, args.out)
    _write_provenance(args.out, {
        "command": "generate",
        "config": C.config_to_dict(cfg),
        "config_hash": C.config_hash(cfg),
        "seed": cfg.benchmark.seed,
        "version": __version__,
    })
    print(f"wrote source ({source.manifest.channels}ch) and target "
          f"({target.manifest.channels}ch) datasets to {args.out}")
    return EXIT_OK


def _run_one_seed(cfg, source, target, run_dir, seed, label, resume):
    """Train one seed and persist its artifacts; returns the final report."""
    import dataclasses

    from . import config as C
    from . import trainer as TR
    from . import __version__

    exp = dataclasses.replace(cfg.experiment, seed=seed)
    result = TR.train(exp, source, target, run_dir=run_dir,
                      aug_cfg=cfg.augment, resume=resume)
    _write_provenance(run_dir, {
        "command": "train",
        "label": label,
        "config": C.config_to_dict(C.RunConfig(cfg.benchmark, exp, cfg.augment)),
        "config_hash": C.config_hash(C.RunConfig(cfg.benchmark, exp, cfg.augment)),
        "seed": seed,
        "budget": exp.labels_per_class,
        "version": __version__,
    })
    return result.final_report


def _write_aggregate_csv(path, rows):
    """rows: [(config_label, n_t, mean, std)]"""
    import csv
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["config", "n_t", "mean_f1", "std_f1"])
        for label, n_t, mean, std in rows:
            writer.writerow([label, n_t, f"{mean:.6f}", f"{std:.6f}"])


def cmd_train(args):
    from . import evaluation as E

    cfg = _load_run_config(args)
    seeds = _parse_seeds(args.seeds)
    if args.budget is not None:
        from . import config as C
        cfg = C.replace_experiment(cfg, labels_per_class=args.budget)
    label = "full"
    if args.ablation:
        from . import config as C
        from . import trainer as TR
        cfg = C.RunConfig(cfg.benchmark,
                          TR.apply_ablation(cfg.experiment, args.ablation),
                          cfg.augment)
        label = args.ablation
    cfg.experiment.validate()

    _prepare_out_dir(args.out, args.force or args.resume)
    source, target = _load_datasets(args.data)

    scores = []
    for seed in seeds:
        run_dir = os.path.join(args.out, f"seed_{seed}")
        report = _run_one_seed(cfg, source, target, run_dir, seed, label,
                               resume=args.resume)
        scores.append(report.weighted_f1)
        print(f"seed {seed}: weighted F1 {report.weighted_f1:.4f}")

    if len(scores) >= 2:
        mean, std = E.aggregate_runs(scores)
        _write_aggregate_csv(os.path.join(args.out, "aggregate.csv"),
                             [(label, cfg.experiment.labels_per_class, mean, std)])
        print(f"aggregate: {mean:.4f} +/- {std:.4f} over {len(scores)} seeds")
    return EXIT_OK


def cmd_evaluate(args):
    from . import data as D
    from . import evaluation as E

    _, target = _load_datasets(args.data)
    dataset = target
    prov_path = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                             "provenance.json")
    if os.path.exists(prov_path):
        with open(prov_path) as f:
            prov = json.load(f)
        exp = prov.get("config", {}).get("experiment", {})
        budget = exp.get("labels_per_class")
        seed = prov.get("seed")
        if budget is not None and seed is not None:
            _, unlabelled = D.make_splits(target, D.SplitSpec(budget, seed=seed))
            dataset = D.Dataset(images=target.images[unlabelled],
                                labels=target.labels[unlabelled],
                                manifest=target.manifest)
    report = E.evaluate(args.checkpoint, dataset)
    text = json.dumps(report.to_dict(), indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_ablate(args):
    from . import evaluation as E
    from . import figures as F
    from . import trainer as TR
    from . import config as C

    cfg = _load_run_config(args)
    seeds = _parse_seeds(args.seeds)
    if args.budget is not None:
        cfg = C.replace_experiment(cfg, labels_per_class=args.budget)
    _prepare_out_dir(args.out, args.force)
    source, target = _load_datasets(args.data)

    rows = []
    for row_name in TR.ABLATION_ROWS:
        row_cfg = C.RunConfig(cfg.benchmark,
                              TR.apply_ablation(cfg.experiment, row_name),
                              cfg.augment)
        scores = []
        for seed in seeds:
            run_dir = os.path.join(args.out, row_name, f"seed_{seed}")
            report = _run_one_seed(row_cfg, source, target, run_dir, seed,
                                   row_name, resume=False)
            scores.append(report.weighted_f1)
        if len(scores) >= 2:
            mean, std = E.aggregate_runs(scores)
        else:
            mean, std = scores[0], 0.0
        rows.append((row_name, TR.ABLATION_ROWS[row_name], mean, std))
        print(f"{row_name}: {mean:.4f} +/- {std:.4f}")

    _write_ablation_table(args.out, rows, cfg.experiment.labels_per_class)
    F.config_bars([(name, mean, std) for name, _, mean, std in rows],
                  os.path.join(args.out, "ablation_f1.png"))
    return EXIT_OK


def _write_ablation_table(out_dir, rows, n_t):
    import csv

    from . import losses as L

    csv_path = os.path.join(out_dir, "ablation_table.csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["ablation"] + list(L.COMPONENTS) + ["mean_f1", "std_f1"])
        for name, toggles, mean, std in rows:
            writer.writerow([name] + [int(toggles[c]) for c in L.COMPONENTS] +
                            [f"{mean:.6f}", f"{std:.6f}"])

    md_path = os.path.join(out_dir, "ablation_table.md")
    with open(md_path, "w") as f:
        f.write(f"# Ablation study (labels per class: {n_t})\n\n")
        f.write("| ablation | " + " | ".join(L.COMPONENTS) + " | F1 |\n")
        f.write("|---" * 8 + "|\n")
        for name, toggles, mean, std in rows:
            marks = " | ".join("x" if toggles[c] else " " for c in L.COMPONENTS)
            f.write(f"| {name} | {marks} | {100 * mean:.2f} +/- {100 * std:.2f} |\n")


def _collect_runs(paths):
    """Find run directories (metrics.json + provenance.json) under paths."""
    from .errors import DataError
    runs = []
    for base in paths:
        for dirpath, _, filenames in os.walk(base):
            if "metrics.json" in filenames:
                if "provenance.json" not in filenames:
                    raise DataError(f"run directory {dirpath} lacks provenance.json")
                with open(os.path.join(dirpath, "provenance.json")) as f:
                    prov = json.load(f)
                with open(os.path.join(dirpath, "metrics.json")) as f:
                    metrics = json.load(f)
                runs.append({"dir": dirpath, "provenance": prov, "metrics": metrics})
    if not runs:
        raise DataError(f"no completed runs found under {', '.join(paths)}")
    return runs


def cmd_report(args):
    import csv
    from collections import defaultdict

    from . import evaluation as E
    from . import figures as F
    from . import trainer as TR

    runs = _collect_runs(args.runs)
    _prepare_out_dir(args.out, args.force)

    groups = defaultdict(list)
    for run in runs:
        label = run["provenance"].get("label", "run")
        budget = run["provenance"].get("budget", 0)
        groups[(label, budget)].append(run["metrics"]["weighted_f1"])

    summary = []
    for (label, budget), scores in sorted(groups.items()):
        if len(scores) >= 2:
            mean, std = E.aggregate_runs(scores)
            std_text = f"{std:.6f}"
        else:
            mean, std = scores[0], 0.0
            std_text = ""
        summary.append((label, budget, mean, std, std_text, len(scores)))

    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["config", "n_t", "mean_f1", "std_f1", "runs"])
        for label, budget, mean, _, std_text, count in summary:
            writer.writerow([label, budget, f"{mean:.6f}", std_text, count])

    budgets = sorted({budget for _, budget, *_ in summary})
    labels = sorted({label for label, *_ in summary})
    cell = {(lab, bud): (mean, std)
            for lab, bud, mean, std, _, _ in summary}
    with open(os.path.join(args.out, "summary.md"), "w") as f:
        f.write("# Results by configuration and label budget\n\n")
        f.write("| config | " + " | ".join(str(b) for b in budgets) + " |\n")
        f.write("|---" * (len(budgets) + 1) + "|\n")
        for lab in labels:
            cells = []
            for bud in budgets:
                if (lab, bud) in cell:
                    mean, std = cell[(lab, bud)]
                    cells.append(f"{100 * mean:.2f} +/- {100 * std:.2f}")
                else:
                    cells.append("-")
            f.write(f"| {lab} | " + " | ".join(cells) + " |\n")

    # figures alongside the delimited output
    if len(budgets) > 1:
        series = defaultdict(list)
        for lab, bud, mean, std, _, _ in summary:
            series[lab].append((bud, mean, std))
        F.budget_curve(series, os.path.join(args.out, "f1_vs_budget.png"))
    F.config_bars([(f"{lab}@{bud}", mean, std) for lab, bud, mean, std, _, _ in summary],
                  os.path.join(args.out, "f1_by_config.png"))

    curves_done = set()
    for run in runs:
        label = run["provenance"].get("label", "run")
        log_path = os.path.join(run["dir"], "log.csv")
        if label in curves_done or not os.path.exists(log_path):
            continue
        rows = TR.read_log_csv(log_path)
        if rows:
            F.training_curves(rows, os.path.join(args.out, f"curves_{label}.png"),
                              title=label)
            curves_done.add(label)

    print(f"report written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="shedd",
        description="Heterogeneous domain adaptation experiments: dual "
                    "disentangled encoders with pseudo-labelling.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic two-modality benchmark")
    p.add_argument("--config", help="config JSON (defaults when omitted)")
    p.add_argument("--out", default="dataset", help="output directory")
    p.add_argument("--force", action="store_true")
    p.add_argument("--print-defaults", action="store_true",
                   help="print the default config document and exit")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one configuration over seeds")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument("--budget", type=int, help="override labels per class")
    p.add_argument("--ablation", help="apply one ablation row (abla1..abla6, full)")
    p.add_argument("--force", action="store_true")
    p.add_argument("--resume", action="store_true",
                   help="continue from per-seed saved state")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test pool")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the 7-row ablation suite")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--budget", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarize run directories into tables and figures")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)

    from .errors import ConfigError, DataError, SheddError
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SheddError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
