import argparse
import json
import logging
import re

from pydantic import ValidationError
from rich.console import Console

from src.config import load_settings
from src.data import SplitSpec, SynthSpec
from src.engine import (
    load_dataset,
    run_forecast,
    run_grid,
    run_ingest,
    run_mcb,
    run_report,
    run_score,
    run_synthesize,
    run_train,
)
from src.evaluation import NEMENYI_Q
from src.exceptions import ConfigError, EngineError, IngestionError
from src.experiment_loader import resolve_experiment
from src.utils import setup_logging

logger = logging.getLogger(__name__)
console = Console(stderr=True)

# Exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

FORMAT_CHOICES = ["m4", "long"]
SEED = re.compile(r"^\d+$")
SEED_RANGE = re.compile(r"^(\d+)-(\d+)$")


def parse_seeds(text):
    """'1,2,3' or '1-5' (inclusive) -> list of ints."""
    seeds = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        match = SEED_RANGE.match(part)
        if match:
            seeds.extend(range(int(match.group(1)), int(match.group(2)) + 1))
        elif SEED.match(part):
            seeds.append(int(part))
        else:
            raise argparse.ArgumentTypeError(f"invalid seed list '{text}'")
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nbeats-s",
        description="Train and evaluate N-BEATS forecasters under a composite accuracy/instability loss.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    ingest = commands.add_parser("ingest", help="Convert an M4-style or long CSV into canonical long CSV")
    ingest.add_argument("--dataset", required=True)
    ingest.add_argument("--format", choices=FORMAT_CHOICES, default="m4")
    ingest.add_argument("--out", required=True, help="Output directory")

    synth = commands.add_parser("synthesize", help="Write a synthetic monthly panel as long CSV")
    synth.add_argument("--out", required=True, help="Output CSV path")
    synth.add_argument("--config", help="JSON file with generator settings")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--num-series", type=int)
    synth.add_argument("--length", type=int)

    for name, text in (("train", "Train an ensemble and evaluate it on the test window"),
                       ("grid", "Grid-search hyperparameters on the validation window")):
        cmd = commands.add_parser(name, help=text)
        cmd.add_argument("--config", required=True, help="Experiment JSON path or name in the experiments dir")
        cmd.add_argument("--out")
        cmd.add_argument("--seeds", type=parse_seeds)
        cmd.add_argument("--workers", type=int)
        cmd.add_argument("--dataset")
        cmd.add_argument("--format", choices=FORMAT_CHOICES)

    forecast = commands.add_parser("forecast", help="Rolling-origin forecasts from a trained run or a baseline")
    _add_dataset_args(forecast)
    forecast.add_argument("--run", help="Run directory with member checkpoints (default: the config's output dir)")
    forecast.add_argument("--baseline", choices=["seasonal-naive"])
    forecast.add_argument("--window", choices=["test", "validation"], default="test")
    forecast.add_argument("--method", help="Method name written into the panel")
    forecast.add_argument("--out", required=True, help="Output panel CSV path")

    score = commands.add_parser("score", help="sMAPE / sMAPC of forecast panels")
    _add_dataset_args(score)
    score.add_argument("--panels", nargs="+", required=True)
    score.add_argument("--window", choices=["test", "validation"], default="test")
    score.add_argument("--out", required=True, help="Output directory")

    mcb = commands.add_parser("mcb", help="Multiple comparisons with the best on a score file")
    mcb.add_argument("--scores", required=True)
    mcb.add_argument("--alpha", type=float, choices=sorted(NEMENYI_Q), default=0.05)
    mcb.add_argument("--out", required=True, help="Output directory")

    report = commands.add_parser("report", help="Summary table and diagnostic plots")
    report.add_argument("--inputs", nargs="+", required=True, help="Run directories, grid reports, score files")
    report.add_argument("--out", required=True, help="Output directory")
    return parser


def _add_dataset_args(cmd):
    cmd.add_argument("--config", help="Experiment whose dataset and split to use")
    cmd.add_argument("--dataset")
    cmd.add_argument("--format", choices=FORMAT_CHOICES)


# --- Command handlers ---

def _experiment(args, settings):
    experiment = resolve_experiment(args.config, settings.experiments_dir)
    return experiment.with_overrides(
        seeds=getattr(args, "seeds", None),
        dataset=getattr(args, "dataset", None),
        fmt=getattr(args, "format", None),
        output_dir=getattr(args, "out", None),
    )


def _dataset(args, settings):
    if args.config:
        experiment = resolve_experiment(args.config, settings.experiments_dir)
        path = args.dataset or experiment.dataset.path
        fmt = args.format or experiment.dataset.format
        return load_dataset(path, fmt, experiment.split), experiment
    if not args.dataset:
        raise ConfigError("Give --config or --dataset")
    return load_dataset(args.dataset, args.format or "long", SplitSpec()), None


def cmd_ingest(args, settings):
    run_ingest(args.dataset, args.format, args.out)


def cmd_synthesize(args, settings):
    data = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read generator settings {args.config}: {e}") from e
    if args.num_series is not None:
        data["num_series"] = args.num_series
    if args.length is not None:
        data["length"] = args.length
    try:
        spec = SynthSpec.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid generator settings: {e.errors()[0]['msg']}") from e
    run_synthesize(spec, args.seed, args.out)


def cmd_train(args, settings):
    experiment = _experiment(args, settings)
    console.print(f"🚀 Training '{experiment.name}' ({experiment.ensemble_size} members)", style="bold")
    run_train(experiment, workers=args.workers or settings.workers, progress_every=settings.progress_every)


def cmd_grid(args, settings):
    experiment = _experiment(args, settings)
    if experiment.grid is None:
        raise ConfigError(f"Experiment '{experiment.name}' has no grid section")
    console.print(f"🔎 Grid search '{experiment.name}' ({len(experiment.grid.cells())} cells)", style="bold")
    run_grid(experiment, workers=args.workers or settings.workers, progress_every=settings.progress_every)


def cmd_forecast(args, settings):
    dataset, experiment = _dataset(args, settings)
    run_dir = args.run
    if args.baseline is None and run_dir is None:
        if experiment is None:
            raise ConfigError("Give --run, --config or --baseline")
        run_dir = experiment.output_path
    run_forecast(dataset, args.out, run_dir=run_dir, baseline=args.baseline, window=args.window, method=args.method)


def cmd_score(args, settings):
    dataset, _ = _dataset(args, settings)
    run_score(args.panels, dataset, args.out, window=args.window)


def cmd_mcb(args, settings):
    run_mcb(args.scores, args.out, alpha=args.alpha)


def cmd_report(args, settings):
    run_report(args.inputs, args.out)


HANDLERS = {
    "ingest": cmd_ingest,
    "synthesize": cmd_synthesize,
    "train": cmd_train,
    "grid": cmd_grid,
    "forecast": cmd_forecast,
    "score": cmd_score,
    "mcb": cmd_mcb,
    "report": cmd_report,
}


def run_app(argv=None):
    """Parses the command line, runs one command and returns the exit code."""
    settings = load_settings()
    setup_logging(settings.log_file)

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_CONFIG

    logger.info(f"Command '{args.command}' started")
    try:
        HANDLERS[args.command](args, settings)
    except (ConfigError, IngestionError, ValidationError) as e:
        logger.error(f"Configuration error in '{args.command}': {e}")
        console.print(f"\n❌ Configuration error: {e}", style="bold red")
        return EXIT_CONFIG
    except (EngineError, OSError) as e:
        logger.error(f"'{args.command}' failed", exc_info=True)
        console.print(f"\n❌ {type(e).__name__}: {e}", style="bold red")
        snapshot = getattr(e, "snapshot", None)
        if snapshot:
            console.print(f"   Snapshot: {snapshot}", style="dim")
        return EXIT_RUNTIME

    logger.info(f"Command '{args.command}' finished")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(run_app())
