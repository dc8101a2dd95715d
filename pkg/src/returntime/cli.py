"""Command-line entry point: generate, train, predict, evaluate.

Every run writes a manifest (config hash, seed, versions) into its output
directory so identical configurations are verifiably identical runs.

Exit codes: 0 success, 2 config or input validation error, 3 data/model
mismatch (including missing files at predict time), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from pathlib import Path

from . import experiment, metrics
from .config import load_config, validate_model_name, write_manifest
from .errors import ConfigError, ReturnTimeError
from .synth import CohortConfig, GeneratorConfig, generate_to_files

logger = logging.getLogger(__name__)

_GENERATOR_SCALARS = (
    "user_count", "horizon_days", "activity_window_days", "prediction_window_days",
    "signup_spread", "duration_log_mean", "duration_log_sigma", "session_cap",
    "epoch_iso",
)


def generator_from_config(config: dict) -> GeneratorConfig:
    gcfg = dict(config.get("generator") or {})
    cohorts = gcfg.pop("cohorts", None)
    unknown = set(gcfg) - set(_GENERATOR_SCALARS)
    if unknown:
        raise ConfigError(f"unknown generator option(s): {sorted(unknown)}")
    kwargs = {k: v for k, v in gcfg.items() if v is not None}
    if cohorts is not None:
        parsed = []
        for c in cohorts:
            c = dict(c)
            if "lapse_window" in c:
                c["lapse_window"] = tuple(c["lapse_window"])
            if "device_probs" in c:
                c["device_probs"] = tuple(c["device_probs"])
            try:
                parsed.append(CohortConfig(**c))
            except TypeError as exc:
                raise ConfigError(f"bad cohort entry {c.get('name', '?')!r}: {exc}") from exc
        kwargs["cohorts"] = tuple(parsed)
    gen = GeneratorConfig(seed=int(config["seed"]), **kwargs)
    gen.validate()
    return gen


def _window_dates(gen: GeneratorConfig) -> dict:
    epoch = dt.datetime.fromisoformat(gen.epoch_iso)
    window = gen.window
    as_date = lambda days: (epoch + dt.timedelta(days=days)).isoformat()
    return {
        "activity_start_date": as_date(window.activity_start),
        "prediction_start_date": as_date(window.prediction_start),
        "horizon_end_date": as_date(window.horizon_end),
    }


def cmd_generate(args: argparse.Namespace) -> int:
    config = load_config(args.config, _cli_overrides(args))
    gen = generator_from_config(config)
    out = Path(args.out)
    summary = generate_to_files(gen, out)
    run_config = {
        "seed": int(config["seed"]),
        "data": {"sessions": str(out / "sessions.jsonl")},
        "window": _window_dates(gen),
    }
    (out / "run_config.json").write_text(json.dumps(run_config, sort_keys=True, indent=2))
    write_manifest(out, "generate", config)
    print(
        f"generated {summary['sessions']} sessions for "
        f"{summary['users_with_sessions']} users under {out}"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config, _cli_overrides(args))
    model_name = validate_model_name(args.model)
    data = experiment.load_and_split(config)
    meta = experiment.train_model(model_name, data, config, args.out)
    write_manifest(args.out, f"train:{model_name}", config)
    extras = ""
    if "w" in meta:
        extras = f" (w={meta['w']})"
    print(f"trained {model_name}{extras}; artifact under {args.out}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    config = load_config(args.config, _cli_overrides(args))
    model_name = validate_model_name(args.model)
    data = experiment.load_and_split(config)
    subset = {"train": data.train, "test": data.test, "all": data.dataset}[args.split]
    records = experiment.predict_model(model_name, args.checkpoint, subset, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_predictions_csv(out, model_name, records, epoch_iso=subset.epoch_iso)
    print(f"wrote {len(records)} predictions for {model_name} to {out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = load_config(args.config, _cli_overrides(args))
    model_records: dict[str, list] = {}
    for path in args.pred:
        name, records = metrics.read_predictions_csv(path)
        if name in model_records:
            raise ConfigError(f"duplicate predictions for model {name!r}")
        model_records[name] = records
    report = experiment.write_report(
        args.out, model_records,
        auc_score_mode=(config.get("evaluation") or {}).get("auc_score_mode", "shifted"),
    )
    write_manifest(args.out, "evaluate", config)
    width = max(len(m) for m in report["models"])
    print(f"{'model'.ljust(width)}  rmse_days  concordance  nr_auc  nr_recall")
    for name, row in report["models"].items():
        print(
            f"{name.ljust(width)}  {row['rmse_days']:9.2f}  {row['concordance']:11.3f}"
            f"  {row['nonreturning_auc']:6.3f}  {row['nonreturning_recall']:9.3f}"
        )
    return 0


def _cli_overrides(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    if getattr(args, "data", None) is not None:
        overrides["data"] = {"sessions": args.data}
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="returntime",
        description="Return-time prediction for web users under right censoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, with_data: bool = True) -> None:
        p.add_argument(
            "--config", action="append", default=None,
            help="JSON run configuration file; repeatable, later files win",
        )
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="per-user parallelism for prediction")
        if with_data:
            p.add_argument("--data", help="sessions JSONL path (overrides config)")

    p = sub.add_parser("generate", help="write a synthetic session dataset")
    common(p, with_data=False)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model on the train split")
    common(p)
    p.add_argument("--model", required=True, help="baseline|rnn|cph|cpha|rnnsm|rnnsma")
    p.add_argument("--out", required=True, help="artifact directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write predictions for one model")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--checkpoint", required=True, help="artifact directory from train")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", required=True, help="prediction CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metric report over prediction CSVs")
    common(p, with_data=False)
    p.add_argument("--pred", nargs="+", required=True, help="prediction CSV files")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ReturnTimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
