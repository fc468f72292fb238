"""Command-line entry point: ``sedpool {ingest,synth,evaluate,analyze,report}``.

Every command writes ``config.json`` (its exact parameters) next to its
outputs.  Errors go to stderr as ``sedpool: error[CODE]: message`` and the
exit status is non-zero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import analysis, evaluation, ingest, synth

logger = logging.getLogger("sedpool")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CommandError(RuntimeError):
    def __init__(self, code: str, message: str, exit_code: int = EXIT_FAILURE):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _write_config(out_dir: Path, command: str, params: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, **params}
    (out_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True, default=str) + "\n")


def _require_file(path, what: str) -> Path:
    if path is None:
        raise CommandError("E_USAGE", f"missing {what}", EXIT_USAGE)
    p = Path(path)
    if not p.is_file():
        raise CommandError("E_USAGE", f"{what} not found: {p}", EXIT_USAGE)
    return p


# -- ingest ------------------------------------------------------------------


def cmd_ingest(args) -> int:
    steps_path = _require_file(args.steps, "steps CSV")
    weather_path = _require_file(args.weather, "weather CSV")
    vocab = ingest.read_vocabulary(args.vocab) if args.vocab else ingest.default_vocabulary()
    weather = ingest.read_weather(weather_path, vocab)
    streams = ingest.parse_step_stream(steps_path.read_bytes())
    report = ingest.IngestReport()
    series = ingest.build_cohort(streams, weather, vocab, report)
    out = Path(args.out)
    _write_config(out, "ingest", {"steps": str(steps_path), "weather": str(weather_path), "vocab": args.vocab})
    ingest.write_day_records(series, out / "day_records.csv")
    (out / "ingest_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"{len(series)} participants, {sum(len(s) for s in series)} day records -> {out / 'day_records.csv'}")
    return 0


# -- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
    params = {f.name: getattr(args, f.name) for f in fields(synth.SynthConfig) if getattr(args, f.name, None) is not None}
    try:
        config = synth.SynthConfig(**params)
    except synth.SynthConfigError as exc:
        raise CommandError("E_CONFIG", str(exc), EXIT_USAGE) from None
    out = Path(args.out)
    _write_config(out, "synth", asdict(config))
    records, _ = synth.write_synthetic(config, out)
    print(f"{config.n_participants} participants -> {records}")
    return 0


# -- evaluate ----------------------------------------------------------------


def _parse_models(text: str) -> tuple[str, ...]:
    models = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in models if m not in evaluation.MODEL_NAMES]
    if bad or not models:
        raise CommandError(
            "E_USAGE",
            f"unknown model(s) {', '.join(bad) or '(none)'}; valid names are {', '.join(evaluation.MODEL_NAMES)}",
            EXIT_USAGE,
        )
    return models


def _parse_ints(text: str, what: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise CommandError("E_USAGE", f"{what} must be comma-separated integers", EXIT_USAGE) from None
    if not values or any(v < 1 for v in values):
        raise CommandError("E_USAGE", f"{what} must be positive integers", EXIT_USAGE)
    return values


def cmd_evaluate(args) -> int:
    records_path = _require_file(args.records, "day-records CSV")
    cohort = ingest.read_day_records(records_path)
    config = evaluation.EvalConfig(
        models=_parse_models(args.models),
        windows=_parse_ints(args.windows, "--windows"),
        s=args.s,
        seed=args.seed,
        clip=args.clip,
        gp_ind_refit=args.gp_ind_refit,
        pooled_refit=args.pooled_refit,
        jobs=args.jobs or evaluation.default_jobs(),
    )
    result = evaluation.run_cv(cohort, config)
    out = Path(args.out)
    _write_config(out, "evaluate", {"records": str(records_path), **config.snapshot()})
    evaluation.write_outputs(result, out)
    for (model, w), mse in sorted(result.overall_mse.items()):
        print(f"{model:9s} w={w}  MSE {mse:.4f}")
    return 0


# -- analyze -----------------------------------------------------------------


STATIONARITY_HEADER = ["participant_id", "window_length", "k", "statistic", "dof", "threshold", "reject"]


def cmd_analyze(args) -> int:
    records_path = _require_file(args.records, "day-records CSV")
    cohort = ingest.read_day_records(records_path)
    out = Path(args.out)
    if args.mode == "dtw":
        sim = analysis.similarity_matrix(cohort)
        _write_config(out, "analyze", {"records": str(records_path), "mode": "dtw", "sequence": "daily_targets"})
        sim.write_csv(out / "dtw_distance.csv", "distance")
        sim.write_csv(out / "dtw_similarity.csv", "similarity")
        print(f"{len(cohort)}x{len(cohort)} DTW matrix -> {out}")
        return 0

    windows = _parse_ints(args.windows, "--windows")
    dof = args.dof if args.dof in ("k-1", "lr") else int(args.dof)
    _write_config(
        out,
        "analyze",
        {
            "records": str(records_path),
            "mode": "stationarity",
            "windows": list(windows),
            "alpha": args.alpha,
            "dof": dof,
            "features": args.features,
        },
    )
    rows, summary = [], []
    for wl in windows:
        tested = rejected = degenerate = 0
        for p in cohort.participants:
            try:
                r = analysis.stationarity_test(p, wl, args.alpha, dof, args.features, cohort.weather_vocabulary)
            except analysis.DegenerateTestError:
                degenerate += 1
                rows.append([p.participant_id, wl, len(p) // wl, "", "", "", "degenerate"])
                continue
            tested += 1
            rejected += r.reject_null
            rows.append([p.participant_id, wl, r.k, repr(r.statistic), r.dof, repr(r.threshold), str(r.reject_null).lower()])
        frac = rejected / tested if tested else ""
        summary.append([wl, tested, rejected, degenerate, repr(frac) if tested else ""])
    with open(out / "stationarity.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATIONARITY_HEADER)
        w.writerows(rows)
    with open(out / "stationarity_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_length", "n_tested", "n_rejected", "n_degenerate", "reject_fraction"])
        w.writerows(summary)
    for wl, tested, rej, deg, frac in summary:
        print(f"window {wl}: {rej}/{tested} nonstationary ({deg} degenerate)")
    return 0


# -- report ------------------------------------------------------------------


def _md_table(header, rows) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return lines


def cmd_report(args) -> int:
    lines = ["# Sedentary-period prediction report", ""]
    if args.stationarity:
        path = _require_file(Path(args.stationarity) / "stationarity_summary.csv", "stationarity summary")
        with open(path) as fh:
            rows = list(csv.reader(fh))
        lines += ["## Within-person stationarity", ""]
        lines += _md_table(rows[0], rows[1:]) + [""]
    if args.dtw:
        path = _require_file(Path(args.dtw) / "dtw_similarity.csv", "DTW similarity CSV")
        with open(path) as fh:
            rows = list(csv.reader(fh))
        vals = [float(v) for row in rows[1:] for v in row[1:]]
        n = len(rows) - 1
        off = [float(rows[i + 1][j + 1]) for i in range(n) for j in range(n) if i != j]
        lines += ["## Between-person similarity (1 / (1 + DTW))", ""]
        lines += _md_table(
            ["participants", "mean off-diagonal", "min", "max"],
            [[n, f"{sum(off) / len(off):.4f}" if off else "-", f"{min(vals):.4f}", f"{max(vals):.4f}"]],
        ) + [""]
    if args.evaluation:
        path = _require_file(Path(args.evaluation) / "summary.json", "evaluation summary")
        summary = json.loads(path.read_text())
        models = summary["models"]
        lines += ["## Overall MSE", ""]
        rows = [[m, w, f"{v['overall_mse']:.4f}", v["n"]] for m in sorted(models) for w, v in sorted(models[m].items())]
        lines += _md_table(["model", "w", "MSE", "n"], rows) + [""]
        lines += ["## MSE on the first predicted window", ""]
        rows = [
            [m, w, f"{v['mse_by_window_position'].get('0', float('nan')):.4f}"]
            for m in sorted(models)
            for w, v in sorted(models[m].items())
        ]
        lines += _md_table(["model", "w", "MSE"], rows) + [""]
        lines += ["## MSE by day in study", ""]
        days = sorted({int(d) for m in models.values() for v in m.values() for d in v["mse_by_day_index"]})
        keys = [(m, w) for m in sorted(models) for w in sorted(models[m])]
        rows = [
            [d] + [f"{models[m][w]['mse_by_day_index'].get(str(d), float('nan')):.3f}" for m, w in keys]
            for d in days
        ]
        lines += _md_table(["day"] + [f"{m} (w={w})" for m, w in keys], rows) + [""]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines))
    print(f"report -> {out}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sedpool", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file whose keys override command-line flags")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="step counts + weather -> day-records CSV")
    p.add_argument("--steps", required=True)
    p.add_argument("--weather")
    p.add_argument("--vocab", help="weather vocabulary, one description per line (default: built-in)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    defaults = synth.SynthConfig()
    p.add_argument("--seed", type=int)
    p.add_argument("--participants", dest="n_participants", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--days-jitter", type=int)
    p.add_argument("--rho", type=float, help=f"shared-function weight (default {defaults.rho})")
    p.add_argument("--nonstationarity", choices=synth.NONSTATIONARITY)
    p.add_argument("--drift-rate", type=float)
    p.add_argument("--regime-day", type=int)
    p.add_argument("--regime-magnitude", type=float)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--clusters", dest="cluster_count", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("evaluate", help="five-fold sliding-window evaluation")
    p.add_argument("--records", required=True)
    p.add_argument("--models", default=",".join(evaluation.MODEL_NAMES))
    p.add_argument("--windows", default="3,5")
    p.add_argument("--s", type=int, default=5, help="initial observed days before the first forecast")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip", action="store_true", help="clip predictions to [0, 9]")
    p.add_argument("--gp-ind-refit", choices=("step", "once"), default="step")
    p.add_argument("--pooled-refit", choices=("fold", "step"), default="fold")
    p.add_argument("--jobs", type=int, default=0, help="worker processes (default: all cores)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="stationarity test or DTW similarity")
    p.add_argument("--records", required=True)
    p.add_argument("--mode", choices=("stationarity", "dtw"), required=True)
    p.add_argument("--windows", default="1,2,5,10")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--dof", default="k-1", help="'k-1' (one per extra window), 'lr' or an integer")
    p.add_argument("--features", choices=analysis.FEATURE_SETS, default="intercept")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="Markdown summary of evaluation and analysis outputs")
    p.add_argument("--evaluation", help="evaluate output directory")
    p.add_argument("--stationarity", help="analyze --mode stationarity output directory")
    p.add_argument("--dtw", help="analyze --mode dtw output directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config:
            overrides = json.loads(_require_file(args.config, "config file").read_text())
            for key, value in overrides.items():
                setattr(args, key.replace("-", "_"), value)
        return args.func(args)
    except CommandError as exc:
        print(f"sedpool: error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except ingest.IngestError as exc:
        print(f"sedpool: error[E_INPUT]: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (ValueError, OSError) as exc:
        print(f"sedpool: error[E_RUN]: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
