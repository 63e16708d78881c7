"""Command-line entry point.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
Every command writes ``<command>.config.json`` next to its outputs.

Environment:
    JSGUIDE_ENGINE   engine binary used when ``--engine`` is not given
    JSGUIDE_WORKERS  default worker count for extraction
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from jsguide import __version__
from jsguide.catalog import CatalogError, load_catalog, restrict_catalog, write_catalog
from jsguide.engines import CoverageMap, SubprocessEngine
from jsguide.evaluation import (
    DEFAULT_FRACTIONS,
    EvaluationError,
    LeakageError,
    ablation_fractions,
    evaluate_blocks,
    make_folds,
    wilcoxon_matrix,
)
from jsguide.explain import shap_values, top_shap_subset
from jsguide.extract import decode_text
from jsguide.guide import (
    SCORE_MODES,
    FuzzConfig,
    Fuzzer,
    Scorer,
    overlap_population,
    run_campaign,
    simulate_coverage_selection,
)
from jsguide.model import (
    ModelError,
    TrainParams,
    feature_importance,
    load_model,
    mean_rank_importance,
    predict_score,
    save_model,
    select_top_fraction,
    train,
)
from jsguide.mutators import CommandMutator, TokenMutator
from jsguide.runner import EngineConfig, EngineError, RecordError, run_target, write_record
from jsguide.synth import PRESETS, make_planted_dataset, make_synthetic_catalog
from jsguide.vectorize import (
    DatasetError,
    build_dataset,
    input_was_capped,
    read_dataset,
    read_manifest,
    vectorize_input,
    write_dataset,
)
from jsguide import report

log = logging.getLogger("jsguide")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (CatalogError, DatasetError, ModelError, EvaluationError, RecordError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# helpers

def _snapshot(args, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["_version"] = __version__
    cfg["_env"] = {k: os.environ[k] for k in ("JSGUIDE_ENGINE", "JSGUIDE_WORKERS") if k in os.environ}
    path = out_dir / f"{args.command}.config.json"
    path.write_text(json.dumps(cfg, indent=1, default=str, sort_keys=True) + "\n", encoding="utf-8")


def _engine_config(args, flags) -> EngineConfig | None:
    binary = args.engine or os.environ.get("JSGUIDE_ENGINE")
    if not binary:
        return None
    return EngineConfig(binary, base_flags=list(args.base_flag or []), trace_flags=list(flags),
                        timeout=args.timeout, trace_mode=args.trace_mode)


def _collect_inputs(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.rglob("*.js")))
        elif p.is_file():
            files.append(p)
        else:
            raise UsageError(f"no such input: {p}")
    if not files:
        raise UsageError("no input files")
    return files


def _vectorize_files(files, catalog, cfg):
    rows = []
    for f in files:
        source = decode_text(f.read_bytes())
        traces = run_target(cfg, source).traces if cfg and catalog.n_dynamic else {}
        rows.append((str(f), vectorize_input(source, traces, catalog), input_was_capped(source, traces)))
    return rows


def _write_table(path: Path, magic: str, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(magic + "\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _params(args) -> TrainParams:
    p = TrainParams(num_trees=args.trees, max_depth=args.depth, learning_rate=args.learning_rate,
                    min_child_cover=args.min_child_cover, pos_weight=args.pos_weight,
                    rng_seed=args.seed)
    p.validate()
    return p


def _dates(text: str) -> list[dt.date]:
    try:
        return [dt.date.fromisoformat(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad date list {text!r}: {exc}") from None


# commands

def cmd_extract(args) -> int:
    catalog = load_catalog(args.catalog)
    out = Path(args.out)
    if args.manifest:
        workers = args.workers or int(os.environ.get("JSGUIDE_WORKERS", "1"))
        ds = build_dataset(read_manifest(args.manifest), catalog, workers=workers)
        write_dataset(ds, out)
        for sid, err in ds.rejected:
            print(f"rejected {sid}: {err}", file=sys.stderr)
        print(f"{len(ds)} samples -> {out}")
    else:
        files = _collect_inputs(args.inputs)
        rows = _vectorize_files(files, catalog, _engine_config(args, catalog.flags))
        _write_table(out, f"# jsguide-features v1 catalog={catalog.fingerprint()} n_static={catalog.n_static}",
                     ["source", "capped", *catalog.ids],
                     [[src, int(capped), *(int(v) for v in vec)] for src, vec, capped in rows])
        print(f"{len(rows)} rows -> {out}")
    _snapshot(args, out.parent)
    return EXIT_OK


def cmd_run(args) -> int:
    catalog = load_catalog(args.catalog)
    cfg = _engine_config(args, catalog.flags)
    if cfg is None:
        raise UsageError("no engine: pass --engine or set JSGUIDE_ENGINE")
    source = decode_text(Path(args.input).read_bytes())
    outcome = run_target(cfg, source)
    write_record(outcome, cfg, args.out)
    print(f"crashed={outcome.crashed} keyword={outcome.crash_keyword} runs={outcome.runs}")
    _snapshot(args, Path(args.out).parent)
    return EXIT_OK


def cmd_train(args) -> int:
    ds = read_dataset(args.dataset)
    catalog = load_catalog(args.catalog) if args.catalog else None
    if catalog is not None:
        ds.check_catalog(catalog)
    params = _params(args)
    model = train(ds, params)
    out = Path(args.out)
    if args.top_fraction is not None:
        if catalog is None:
            raise UsageError("--top-fraction needs --catalog")
        keep = select_top_fraction(feature_importance(model), args.top_fraction)
        catalog = restrict_catalog(catalog, keep)
        ds = ds.select_features(catalog)
        model = train(ds, params)
        cat_out = Path(args.catalog_out or out.with_suffix(".catalog.json"))
        write_catalog(catalog, cat_out)
        print(f"restricted catalog ({len(catalog)} features, flags {list(catalog.flags)}) -> {cat_out}")
    save_model(model, out)
    print(f"model ({len(model.trees)} trees, {model.n_features} features) -> {out}")
    _snapshot(args, out.parent)
    return EXIT_OK


def cmd_predict(args) -> int:
    catalog = load_catalog(args.catalog)
    model = load_model(args.model, catalog)
    files = _collect_inputs(args.inputs)
    rows = []
    for src, vec, _ in _vectorize_files(files, catalog, _engine_config(args, catalog.flags)):
        s = predict_score(model, vec)
        rows.append([src, f"{s:.6f}", int(s >= args.threshold)])
    if args.out:
        _write_table(Path(args.out), "# jsguide-scores v1", ["source", "score", "positive"], rows)
        _snapshot(args, Path(args.out).parent)
    else:
        for r in rows:
            print("\t".join(map(str, r)))
    return EXIT_OK


def cmd_explain(args) -> int:
    catalog = load_catalog(args.catalog)
    model = load_model(args.model, catalog)
    files = _collect_inputs([args.input])
    (src, vec, _), = _vectorize_files(files, catalog, _engine_config(args, catalog.flags))
    expl = shap_values(model, vec)
    subset = top_shap_subset(expl, args.coverage)
    order = np.argsort(-np.abs(expl.contributions), kind="stable")
    rows = [[catalog.ids[i], int(vec[i]), f"{expl.contributions[i]:.6g}", int(i in subset.indices)]
            for i in order if expl.contributions[i] != 0 or i in subset.indices]
    print(f"# {src}: base={expl.base_value:.6g} margin={expl.margin:.6g} "
          f"score={predict_score(model, vec):.4f} subset={len(subset.ids)} "
          f"coverage={subset.coverage_achieved:.3f}")
    if args.out:
        _write_table(Path(args.out), "# jsguide-shap v1", ["feature", "value", "shap", "preserved"], rows)
        _snapshot(args, Path(args.out).parent)
    else:
        for r in rows:
            print("\t".join(map(str, r)))
    return EXIT_OK


def cmd_synth(args) -> int:
    from dataclasses import replace

    catalog = make_synthetic_catalog()
    planted = make_planted_dataset(catalog, replace(PRESETS[args.preset], seed=args.seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_catalog(catalog, out / "catalog.json")
    write_dataset(planted.dataset, out / "dataset.tsv")
    (out / "boundaries.txt").write_text(",".join(b.isoformat() for b in planted.boundaries) + "\n")
    (out / "signal_features.txt").write_text("\n".join(planted.signal_ids) + "\n")
    print(f"{len(planted.dataset)} samples, boundaries {','.join(map(str, planted.boundaries))} -> {out}")
    _snapshot(args, out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.synthetic:
        from dataclasses import replace

        planted = make_planted_dataset(make_synthetic_catalog(),
                                       replace(PRESETS[args.synthetic], seed=args.seed))
        ds, boundaries = planted.dataset, planted.boundaries
    else:
        if not args.dataset or not args.boundaries:
            raise UsageError("need --dataset and --boundaries (or --synthetic)")
        ds, boundaries = read_dataset(args.dataset), _dates(args.boundaries)
    plan = make_folds(ds, boundaries)
    params = _params(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]

    rep = evaluate_blocks(ds, plan, params, args.repetitions, args.seed, methods, args.threshold)
    report.write_metrics_tsv(rep, out / "metrics.tsv")
    report.write_summary_tsv(rep, out / "summary.tsv")
    refs = [m for m in ("static", "dynamic") if m in rep.methods]
    matrix = wilcoxon_matrix(rep, refs)
    report.write_wilcoxon_tsv(matrix, out / "wilcoxon.tsv")
    text = [report.render_summary(rep)]
    if matrix:
        text += ["", "Wilcoxon rank-sum p-values", report.render_wilcoxon(matrix)]
    report.plot_fold_metrics(rep, out / "metrics_by_fold.png")

    tables = []
    for tr in plan.transitions:
        train_ds = ds.subset(tr.train.sample_ids)
        tables.append(feature_importance(train(train_ds, params)))
    ranks = mean_rank_importance(tables)
    _write_table(out / "importance.tsv", "# jsguide-importance v1", ["feature", "mean_rank"],
                 [[fid, f"{r:.3f}"] for fid, r in ranks])
    report.plot_importance(tables[-1], out / "importance.png", n_static=ds.n_static)

    if args.fractions:
        fracs = [float(f) for f in args.fractions.split(",")]
        abl = ablation_fractions(ds, plan, fracs, params, args.repetitions, args.seed, args.threshold)
        report.write_ablation_tsv(abl, out / "ablation.tsv")
        report.plot_ablation(abl, out / "ablation.png")
        merged = report.MetricsReport()
        for f in sorted(abl):
            merged.extend(abl[f])
        text += ["", "Feature-fraction ablation", report.render_summary(merged)]

    rendered = "\n".join(text) + "\n"
    (out / "report.txt").write_text(rendered, encoding="utf-8")
    print(rendered, end="")
    _snapshot(args, out)
    return EXIT_OK


def cmd_fuzz(args) -> int:
    catalog = load_catalog(args.catalog)
    model = load_model(args.model, catalog)
    cfg = _engine_config(args, catalog.flags)
    if cfg is None:
        raise UsageError("no engine: pass --engine or set JSGUIDE_ENGINE")
    engine = SubprocessEngine(cfg)
    mutator = CommandMutator(args.mutator_cmd.split()) if args.mutator_cmd else TokenMutator()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(args, out)
    fuzz_cfg = FuzzConfig(explore_prob=args.explore_prob, k_sigma=args.k_sigma,
                          shap_coverage=args.shap_coverage, score_mode=args.score_mode,
                          guidance=not args.no_guidance, seed=args.seed)
    log_path = out / "decisions.jsonl"
    log_path.unlink(missing_ok=True)
    fuzzer = Fuzzer(Scorer(catalog, model, args.shap_coverage), engine, mutator, fuzz_cfg,
                    crash_dir=out / "crashes", decision_log=log_path,
                    engine_flags=cfg.base_flags + cfg.trace_flags)
    files = _collect_inputs([args.corpus])
    fuzzer.seed_corpus([decode_text(f.read_bytes()) for f in files])
    if args.steps is None and args.seconds is None:
        raise UsageError("need --steps or --seconds")
    rep = run_campaign(fuzzer, args.steps, args.seconds, args.stop_on_crash)
    summary = rep.to_json()
    (out / "campaign.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    corpus_dir = out / "corpus"
    corpus_dir.mkdir(exist_ok=True)
    for s in fuzzer.corpus:
        (corpus_dir / f"{s.id}.js").write_text(s.source, encoding="utf-8")
    _write_table(out / "histogram.tsv", "# jsguide-decisions v1", ["decision", "count"],
                 [[k, v] for k, v in summary["histogram"].items()])
    print(json.dumps({k: summary[k] for k in ("steps", "crashes", "first_crash_step",
                                              "corpus_initial", "corpus_final", "histogram")}))
    return EXIT_OK


def _read_maps(path: Path, width: int):
    seeds = []
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            edges = [int(t) for t in row["edges"].split()]
            seeds.append((row["label"].strip(), CoverageMap.from_edges(edges, width)))
    if not seeds:
        raise UsageError(f"{path}: no seeds")
    return seeds


def cmd_simulate_coverage(args) -> int:
    if args.maps:
        seeds = _read_maps(Path(args.maps), args.map_width)
    else:
        seeds = overlap_population(seed=args.seed)
    res = simulate_coverage_selection(seeds, args.seed, args.repetitions)
    rows = [[i, f"{v:.4f}", b] for i, (v, b) in enumerate(res.per_repetition)]
    print(f"vulnerable_retained_fraction={res.vulnerable_retained_fraction:.4f} "
          f"benign_retained_count={res.benign_retained_count:.1f} over {args.repetitions} repetitions")
    if args.out:
        _write_table(Path(args.out), "# jsguide-coverage-selection v1",
                     ["repetition", "vulnerable_retained_fraction", "benign_retained"], rows)
        _snapshot(args, Path(args.out).parent)
    return EXIT_OK


# parser

def _engine_args(p, required=False):
    g = p.add_argument_group("engine")
    g.add_argument("--engine", help="engine binary (default: $JSGUIDE_ENGINE)")
    g.add_argument("--base-flag", action="append", help="flag passed on every run (repeatable)")
    g.add_argument("--timeout", type=float, default=10.0, help="seconds per run")
    g.add_argument("--trace-mode", choices=("per_flag", "combined"), default="per_flag")


def _train_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--trees", type=int, default=200)
    g.add_argument("--depth", type=int, default=6)
    g.add_argument("--learning-rate", type=float, default=0.1)
    g.add_argument("--min-child-cover", type=float, default=1.0)
    g.add_argument("--pos-weight", type=float, default=None,
                   help="positive-class weight (default: #neg/#pos)")
    g.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="jsguide", description="Feature-guided fuzzing toolkit for JS engines.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=f"jsguide {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="feature vectors for inputs or a labeled manifest")
    p.add_argument("--catalog", required=True)
    p.add_argument("--manifest", help="labeled manifest CSV; writes a dataset table")
    p.add_argument("inputs", nargs="*", help="JS files or directories")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    _engine_args(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("run", help="run one input under the trace flags and save a run record")
    p.add_argument("--catalog", required=True)
    p.add_argument("input")
    p.add_argument("-o", "--out", required=True)
    _engine_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train a model on a dataset table")
    p.add_argument("--dataset", required=True)
    p.add_argument("--catalog", help="catalog the dataset was built with (checked)")
    p.add_argument("--top-fraction", type=float, help="retrain on the top fraction of features")
    p.add_argument("--catalog-out", help="where to write the restricted catalog")
    p.add_argument("-o", "--out", required=True)
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score inputs")
    p.add_argument("--catalog", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("-o", "--out")
    _engine_args(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="per-feature contributions for one input")
    p.add_argument("--catalog", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("input")
    p.add_argument("--coverage", type=float, default=0.9)
    p.add_argument("-o", "--out")
    _engine_args(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("synth", help="write a planted-signal dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="predictive")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("evaluate", help="walk-forward evaluation report")
    p.add_argument("--dataset")
    p.add_argument("--boundaries", help="comma-separated fold start dates")
    p.add_argument("--synthetic", choices=sorted(PRESETS), help="use a planted dataset instead")
    p.add_argument("--methods", default="static,dynamic,combined,random,random_features")
    p.add_argument("--fractions", default=",".join(f"{f:g}" for f in DEFAULT_FRACTIONS),
                   help="ablation fractions ('' to skip)")
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("-o", "--out-dir", required=True)
    _train_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fuzz", help="guided fuzzing campaign")
    p.add_argument("--catalog", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True, help="directory of initial seeds")
    p.add_argument("--mutator-cmd", help="external mutator command (default: built-in)")
    p.add_argument("--explore-prob", type=float, default=0.1)
    p.add_argument("--k-sigma", type=float, default=1.0, help="tolerance in corpus sigmas")
    p.add_argument("--shap-coverage", type=float, default=0.9)
    p.add_argument("--score-mode", choices=SCORE_MODES, default="parent_dynamic")
    p.add_argument("--no-guidance", action="store_true", help="random-keep baseline")
    p.add_argument("--steps", type=int)
    p.add_argument("--seconds", type=float)
    p.add_argument("--stop-on-crash", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out-dir", required=True)
    _engine_args(p)
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("simulate-coverage", help="coverage-gain seed selection simulator")
    p.add_argument("--maps", help="CSV with columns label,edges (space-separated edge ids); "
                                  "default: the built-in overlap population")
    p.add_argument("--map-width", type=int, default=1 << 16)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_simulate_coverage)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"jsguide {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LeakageError as exc:
        print(f"jsguide {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except VALIDATION_ERRORS as exc:
        print(f"jsguide {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"jsguide {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EngineError, OSError) as exc:
        print(f"jsguide {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
