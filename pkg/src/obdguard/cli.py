"""Command-line front end.

One subcommand per pipeline stage (simulate, attack, session, preprocess,
fit, detect, eval), a figure-rendering `report`, and a `pipeline` command
that runs the whole chain into an output directory. Logs go to stderr;
data only ever goes to the paths you name.

Exit codes: 0 success, 2 usage or bad parameter values, 3 file/format
problems, 4 numerical failure inside the sampler.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .attack import FlattenConfig, ReplayConfig, flatten_attack, replay_attack
from .detect import detect_trip, read_report, write_report
from .evaluation import (
    combine_event_metrics,
    evaluate_detection,
    write_metrics,
    write_roc_csv,
)
from .mixture import (
    HyperParams,
    NumericalError,
    PosteriorFormatError,
    SchemaVersionError,
    fit,
    load_posterior,
    nonempty_components,
    save_posterior,
)
from .obd import DeviceConfig, run_session, session_trip, write_events
from .preprocess import PreprocessConfig, preprocess_trip
from .trace import (
    RawTrip,
    TraceFormatError,
    read_aligned,
    read_trip,
    write_aligned,
    write_trip,
)
from .vehicle import Scenario, generate_trip, scenario_from_dict

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

log = logging.getLogger("obdguard")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (TraceFormatError, PosteriorFormatError, SchemaVersionError) as exc:
        log.error("bad input file: %s", exc)
        return EXIT_IO
    except (OSError, json.JSONDecodeError) as exc:
        log.error("i/o failure: %s", exc)
        return EXIT_IO
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        log.error("bad parameters: %s", exc)
        return EXIT_USAGE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="obdguard",
        description="Simulate, manipulate and screen telematics speed streams.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a trip from a scenario file")
    p.add_argument("--scenario", required=True, help="scenario JSON")
    p.add_argument("--out", required=True, help="trip CSV to write")
    p.add_argument("--seed", type=int, default=None, help="overrides the scenario's seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", help="manipulate a trip's speed stream")
    p.add_argument("--kind", choices=("flatten", "replay"), required=True)
    p.add_argument("--in", dest="input", required=True, help="trip CSV to manipulate")
    p.add_argument("--out", required=True, help="manipulated trip CSV")
    p.add_argument("--threshold", type=int, default=11, help="flatten threshold, km/h per tick")
    p.add_argument("--recording", help="recorded trip CSV (replay only)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("session", help="run the dongle state machine over a trip")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="observed-speed trip CSV")
    p.add_argument("--events", help="event log JSONL")
    p.add_argument("--threshold", type=int, default=11, help="hard-brake beep threshold")
    p.add_argument("--no-dtc", action="store_true", help="skip trouble-code collection")
    p.set_defaults(func=cmd_session)

    p = sub.add_parser("preprocess", help="trip CSV -> aligned regression records")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="aligned CSV")
    p.add_argument("--window", type=float, default=1.0, help="accel window seconds")
    p.add_argument("--min-samples", type=int, default=1, help="min samples per window")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fit", help="fit the mixture model on aligned records")
    p.add_argument("--data", required=True, nargs="+", help="aligned CSV(s)")
    p.add_argument("--hyper", help="hyperparameter JSON (defaults otherwise)")
    p.add_argument("--out", required=True, help="posterior JSON")
    p.add_argument("--seed", type=int, default=None, help="required unless the hyper file has one")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("detect", help="flag records a posterior cannot explain")
    p.add_argument("--data", required=True, help="aligned CSV")
    p.add_argument("--model", required=True, help="posterior JSON")
    p.add_argument("--out", required=True, help="report JSONL")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--samples", type=int, default=2000, help="predictive draws per record")
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score a report against ground truth")
    p.add_argument("--report", required=True, help="report JSONL")
    p.add_argument("--data", required=True, help="aligned CSV with labels")
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--roc-csv", help="also write the ROC sweep as CSV")
    p.add_argument("--gap", type=float, default=2.0, help="event grouping gap, seconds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="eval + figures into a directory")
    p.add_argument("--report", required=True, help="report JSONL")
    p.add_argument("--data", required=True, help="aligned CSV with labels")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--gap", type=float, default=2.0)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="simulate -> ... -> eval, one output directory")
    p.add_argument("--config", required=True, help="pipeline JSON")
    p.add_argument("--out-dir", default=None, help="overrides config out_dir")
    p.add_argument("--seed", type=int, default=None, help="overrides config seed")
    p.add_argument("--level", type=float, default=None, help="overrides detect level")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config field by dotted path (repeatable)",
    )
    p.set_defaults(func=cmd_pipeline)
    return parser


# ---------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    with open(args.scenario) as fh:
        raw = json.load(fh)
    if args.seed is None and "seed" not in raw:
        raise ValueError("no --seed given and the scenario file has none")
    scenario = scenario_from_dict(raw)
    trip = generate_trip(scenario, seed=args.seed)
    write_trip(trip, args.out)
    log.info(
        "simulated %d speed / %d accel samples over %.0f s -> %s",
        len(trip.speed), len(trip.accel), scenario.duration_s, args.out,
    )
    return EXIT_OK


def cmd_attack(args: argparse.Namespace) -> int:
    trip = read_trip(args.input)
    if args.kind == "flatten":
        out = flatten_attack(trip, FlattenConfig(args.threshold))
    else:
        if not args.recording:
            raise ValueError("replay needs --recording")
        out = replay_attack(trip, ReplayConfig(read_trip(args.recording)))
    write_trip(out, args.out)
    n = sum(out.labels or ())
    log.info("%s attack changed %d of %d samples -> %s", args.kind, n, len(out.speed), args.out)
    return EXIT_OK


def cmd_session(args: argparse.Namespace) -> int:
    trip = read_trip(args.input)
    config = DeviceConfig(
        hard_brake_threshold_kmh_per_s=args.threshold, collect_dtc=not args.no_dtc
    )
    result = run_session(trip, config)
    write_trip(session_trip(trip, result), args.out)
    if args.events:
        write_events(result.events, args.events)
    log.info(
        "session observed %d samples, emitted %d events -> %s",
        len(result.observed), len(result.events), args.out,
    )
    return EXIT_OK


def cmd_preprocess(args: argparse.Namespace) -> int:
    trip = read_trip(args.input)
    cfg = PreprocessConfig(window_s=args.window, min_samples_per_window=args.min_samples)
    records, dropped = preprocess_trip(trip, cfg)
    write_aligned(records, args.out)
    log.info("aligned %d records (%d dropped) -> %s", len(records), dropped, args.out)
    return EXIT_OK


def _hyper_from_args(args: argparse.Namespace) -> HyperParams:
    raw: dict = {}
    if args.hyper:
        with open(args.hyper) as fh:
            raw = json.load(fh)
    if args.seed is not None:
        raw["seed"] = args.seed
    elif "seed" not in raw:
        raise ValueError("no --seed given and the hyperparameter file has none")
    if "coef_mean" in raw:
        raw["coef_mean"] = tuple(raw["coef_mean"])
    return HyperParams(**raw)


def cmd_fit(args: argparse.Namespace) -> int:
    records = []
    for path in args.data:
        records.extend(read_aligned(path))
    params = _hyper_from_args(args)
    samples = fit(records, params)
    save_posterior(samples, args.out)
    summary = nonempty_components(samples, threshold=1e-2)
    log.info(
        "fitted %d records, kept %d draws, %d components above 1%% weight -> %s",
        samples.n_records_fitted, samples.n_draws, summary.count, args.out,
    )
    return EXIT_OK


def cmd_detect(args: argparse.Namespace) -> int:
    records = read_aligned(args.data)
    samples = load_posterior(args.model)
    report = detect_trip(records, samples, level=args.level, size=args.samples, seed=args.seed)
    write_report(report, args.out)
    log.info("flagged %d of %d records -> %s", report.n_flagged, len(records), args.out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    report = read_report(args.report)
    records = read_aligned(args.data)
    metrics = evaluate_detection(report, records, gap_s=args.gap)
    write_metrics(metrics, args.out)
    if args.roc_csv:
        write_roc_csv(metrics.roc, args.roc_csv)
    log.info(
        "fpr=%s fnr=%s auc=%s events: %d truth / %d detected -> %s",
        _fmt_ratio(metrics.point.fpr), _fmt_ratio(metrics.point.fnr),
        _fmt_ratio(metrics.auc), metrics.events.n_truth,
        metrics.events.n_truth_detected, args.out,
    )
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from . import figures  # matplotlib only loads on the figure path

    report = read_report(args.report)
    records = read_aligned(args.data)
    metrics = evaluate_detection(report, records, gap_s=args.gap)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(metrics, str(out / "metrics.json"))
    write_roc_csv(metrics.roc, str(out / "roc.csv"))
    figures.plot_roc(metrics.roc, str(out / "roc.png"), metrics.auc)
    figures.plot_detection_timeline(report, str(out / "timeline.png"))
    log.info("wrote metrics.json, roc.csv, roc.png, timeline.png under %s", out)
    return EXIT_OK


def _fmt_ratio(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.4f}"


# ---------------------------------------------------------------------------
# Pipeline


_PIPELINE_DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "pipeline-out",
    "scenario": None,
    "n_train_trips": 4,
    "n_eval_trips": 6,
    "attack": {"kind": "flatten", "threshold_kmh_per_s": 11},
    "session": {"hard_brake_threshold_kmh_per_s": 11, "collect_dtc": True},
    "preprocess": {"window_s": 1.0, "min_samples_per_window": 1},
    "fit": {},
    "detect": {"level": 0.95, "size": 2000},
    "eval": {"gap_s": 2.0},
    "figures": True,
}


def _apply_override(config: dict, assignment: str) -> None:
    key, sep, value = assignment.partition("=")
    if not sep:
        raise ValueError(f"--set needs KEY=VALUE, got {assignment!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValueError(f"--set path {key!r} crosses a non-object field")
    node[parts[-1]] = parsed


def _trip_seed(base: int, index: int) -> int:
    # spread per-trip seeds deterministically without collisions
    return base * 1000 + index


def cmd_pipeline(args: argparse.Namespace) -> int:
    with open(args.config) as fh:
        user_cfg = json.load(fh)
    cfg = json.loads(json.dumps(_PIPELINE_DEFAULTS))  # deep copy
    for key, value in user_cfg.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    for assignment in args.overrides:
        _apply_override(cfg, assignment)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out_dir is not None:
        cfg["out_dir"] = args.out_dir
    if args.level is not None:
        cfg["detect"]["level"] = args.level
    if cfg["scenario"] is None:
        raise ValueError("pipeline config needs a 'scenario' path")

    scenario_path = Path(args.config).parent / cfg["scenario"] if not Path(cfg["scenario"]).is_absolute() else Path(cfg["scenario"])
    with open(scenario_path) as fh:
        scenario_dict = json.load(fh)
    base = scenario_from_dict(scenario_dict)

    out = Path(cfg["out_dir"])
    (out / "trips").mkdir(parents=True, exist_ok=True)
    (out / "aligned").mkdir(exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)

    seed = int(cfg["seed"])
    device_cfg = DeviceConfig(**cfg["session"])
    pre_cfg = PreprocessConfig(**cfg["preprocess"])

    def run_one(scenario: Scenario, trip_seed: int, name: str, attacked: bool) -> tuple[RawTrip, list]:
        trip = generate_trip(scenario, seed=trip_seed)
        if attacked:
            trip = _apply_pipeline_attack(trip, cfg["attack"], base, trip_seed)
        write_trip(trip, str(out / "trips" / f"{name}.csv"))
        observed = session_trip(trip, run_session(trip, device_cfg))
        records, dropped = preprocess_trip(observed, pre_cfg)
        if dropped:
            log.debug("%s: dropped %d records during alignment", name, dropped)
        write_aligned(records, str(out / "aligned" / f"{name}.csv"))
        return trip, records

    log.info("pipeline: %d training trips", cfg["n_train_trips"])
    train_records = []
    for i in range(int(cfg["n_train_trips"])):
        _, records = run_one(base, _trip_seed(seed, i), f"train_{i:02d}", attacked=False)
        train_records.extend(records)

    fit_cfg = dict(cfg["fit"])
    fit_cfg.setdefault("seed", _trip_seed(seed, 777))
    if "coef_mean" in fit_cfg:
        fit_cfg["coef_mean"] = tuple(fit_cfg["coef_mean"])
    params = HyperParams(**fit_cfg)
    log.info(
        "pipeline: fitting %d records (%d sweeps, truncation %d)",
        len(train_records), params.n_iter, params.max_components,
    )
    samples = fit(train_records, params)
    save_posterior(samples, str(out / "model.json"))

    log.info("pipeline: %d evaluation trips (every other one attacked)", cfg["n_eval_trips"])
    level = float(cfg["detect"]["level"])
    size = int(cfg["detect"]["size"])
    gap_s = float(cfg["eval"]["gap_s"])
    all_verdicts: list = []
    all_records: list = []
    per_trip_events = []
    first_attacked_report = None
    for i in range(int(cfg["n_eval_trips"])):
        attacked = i % 2 == 1
        name = f"eval_{i:02d}" + ("_attacked" if attacked else "_clean")
        _, records = run_one(base, _trip_seed(seed, 100 + i), name, attacked)
        report = detect_trip(records, samples, level=level, size=size, seed=_trip_seed(seed, 500 + i))
        write_report(report, str(out / "reports" / f"{name}.json"))
        per_trip_events.append(evaluate_detection(report, records, gap_s=gap_s).events)
        if attacked and first_attacked_report is None:
            first_attacked_report = report
        all_verdicts.extend(report.records)
        all_records.extend(records)

    from dataclasses import replace

    from .detect import DetectionReport

    pooled = DetectionReport(tuple(all_verdicts), level)
    write_report(pooled, str(out / "report.json"))
    # record-level metrics pool cleanly; event grouping must stay per trip
    # because every trip's clock starts at zero
    metrics = replace(
        evaluate_detection(pooled, all_records, gap_s=gap_s),
        events=combine_event_metrics(per_trip_events),
    )
    write_metrics(metrics, str(out / "metrics.json"))
    write_roc_csv(metrics.roc, str(out / "roc.csv"))

    if cfg["figures"]:
        from . import figures

        (out / "figures").mkdir(exist_ok=True)
        figures.plot_roc(metrics.roc, str(out / "figures" / "roc.png"), metrics.auc)
        if first_attacked_report is not None:
            figures.plot_detection_timeline(
                first_attacked_report, str(out / "figures" / "timeline.png")
            )

    log.info(
        "pipeline done: fpr=%s fnr=%s auc=%s -> %s",
        _fmt_ratio(metrics.point.fpr), _fmt_ratio(metrics.point.fnr),
        _fmt_ratio(metrics.auc), out,
    )
    return EXIT_OK


def _apply_pipeline_attack(trip: RawTrip, attack_cfg: dict, base: Scenario, trip_seed: int) -> RawTrip:
    kind = attack_cfg.get("kind", "flatten")
    if kind == "flatten":
        return flatten_attack(trip, FlattenConfig(int(attack_cfg.get("threshold_kmh_per_s", 11))))
    if kind == "replay":
        recorded = generate_trip(base, seed=trip_seed + 999983)
        return replay_attack(trip, ReplayConfig(recorded))
    raise ValueError(f"unknown pipeline attack kind {kind!r}")


if __name__ == "__main__":
    sys.exit(main())
