import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd
from rich.console import Console

from src.data import Dataset, SplitSpec, export_long, ingest, synthesize, write_exclusion_log
from src.dlw import write_trajectory
from src.evaluation import (
    EnsembleForecaster,
    SCORE_COLUMNS,
    ScoreTable,
    SeasonalNaive,
    mcb,
    read_panels,
    roll_forecasts,
    score,
    window_actuals,
    write_panel,
)
from src.exceptions import ContractError, EngineError, TrainingAbortedError
from src.experiment_loader import dump_experiment
from src.model import TrainedModel, load_checkpoint, save_checkpoint
from src.plots import plot_cosine_similarity, plot_kappa_sweep, plot_lambda_trajectory, plot_mcb
from src.trainer import train
from src.utils import content_hash, get_code_revision, save_data_to_file

logger = logging.getLogger(__name__)
console = Console(stderr=True)

# Run directory layout
MEMBERS_DIR = "members"
CHECKPOINT_FILE = "checkpoint.json"
RUNLOG_FILE = "runlog.csv"
TRAJECTORY_FILE = "trajectory.csv"
MANIFEST_FILE = "manifest.json"
CONFIG_FILE = "config.json"
EXCLUSIONS_FILE = "excluded_series.tsv"
GRID_REPORT_FILE = "grid_report.csv"
WINNER_FILE = "selected_config.json"
METRICS = ("smape", "smapc")


@dataclass
class MemberResult:
    seed: int
    directory: str
    iterations: int
    wall_clock: float
    max_target_index: int
    target_reach: dict = field(default_factory=dict)


# --- Data ---

def load_dataset(path, fmt, split_spec):
    """Ingest + split. Raises before anything is written."""
    series = ingest(path, fmt)
    dataset = Dataset.from_series(series, split_spec)
    if not len(dataset):
        raise ContractError(f"No series in {path} is long enough for the train/validation/test split")
    return dataset


def run_ingest(path, fmt, out_dir, split_spec=None):
    """Dataset file -> canonical long CSV plus the exclusion log of series too short to split."""
    series = ingest(path, fmt)
    dataset = Dataset.from_series(series, split_spec or SplitSpec())
    out_dir = Path(out_dir)
    export_long(series, out_dir / "series.csv")
    write_exclusion_log(dataset.excluded, out_dir / EXCLUSIONS_FILE)
    console.print(f"✅ Ingested {len(series)} series ({len(dataset.excluded)} too short) into {out_dir}", style="green")
    return out_dir / "series.csv"


def run_synthesize(spec, seed, out_path):
    series = synthesize(spec, seed)
    path = export_long(series, out_path)
    console.print(f"✅ Wrote {len(series)} synthetic series to {path}", style="green")
    return path


# --- Training ---

def _train_member(experiment, dataset, seed, member_dir, progress_every, show_progress):
    """One ensemble member; module-level so the process pool can pickle it."""
    member_dir = Path(member_dir)
    config = experiment.train_config(seed, progress_every)

    def checkpoint_callback(iteration, model):
        save_checkpoint(member_dir / "checkpoints" / f"iter_{iteration:06d}.json", model)

    params, log = train(
        dataset, config,
        final_fit=experiment.train.final_fit,
        checkpoint_callback=checkpoint_callback,
        show_progress=show_progress,
    )
    save_checkpoint(member_dir / CHECKPOINT_FILE, TrainedModel(config.model, params))
    log.write(member_dir / RUNLOG_FILE)
    write_trajectory(log.trajectory_frame().itertuples(index=False, name=None), member_dir / TRAJECTORY_FILE)
    return MemberResult(
        seed=seed,
        directory=str(member_dir),
        iterations=len(log),
        wall_clock=log.wall_clock,
        max_target_index=log.max_target_index,
        target_reach=log.target_reach,
    )


def _run_members(experiment, dataset, out_dir, workers, progress_every):
    seeds = experiment.member_seeds
    dirs = [out_dir / MEMBERS_DIR / f"seed_{seed}" for seed in seeds]
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            futures = [
                pool.submit(_train_member, experiment, dataset, seed, d, progress_every, False)
                for seed, d in zip(seeds, dirs)
            ]
            return [f.result() for f in futures]

    results = []
    for seed, d in zip(seeds, dirs):
        console.print(f"   ⚙️  Training member seed={seed}...", style="dim")
        results.append(_train_member(experiment, dataset, seed, d, progress_every, True))
    return results


def leak_audit(dataset, members, final_fit=False):
    """Every sampled target index must lie inside the fitting segment of its series."""
    limits = {s.series_id: len(s.fit_segment(final_fit)) for s in dataset.splits}
    violations = [
        {"seed": m.seed, "series_id": sid, "reach": reach, "limit": limits[sid]}
        for m in members
        for sid, reach in sorted(m.target_reach.items())
        if reach >= limits[sid]
    ]
    return {"passed": not violations, "violations": violations}


def load_members(run_dir, seeds=None):
    """Member checkpoints of a run: the given seeds, the manifest's seeds, or every member found."""
    run_dir = Path(run_dir)
    if seeds is None and (run_dir / MANIFEST_FILE).exists():
        with open(run_dir / MANIFEST_FILE, "r", encoding="utf-8") as f:
            seeds = json.load(f)["seeds"]
    if seeds is not None:
        paths = [run_dir / MEMBERS_DIR / f"seed_{seed}" / CHECKPOINT_FILE for seed in seeds]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise ContractError(f"Missing member checkpoints: {missing}")
    else:
        paths = sorted((run_dir / MEMBERS_DIR).glob(f"*/{CHECKPOINT_FILE}"))
    if not paths:
        raise ContractError(f"No member checkpoints under {run_dir / MEMBERS_DIR}")
    return [load_checkpoint(p) for p in paths]


def run_train(experiment, workers=1, progress_every=100):
    """
    Trains the ensemble, rolls the median forecast over the test window and
    writes the manifest last. Returns the manifest dict.
    """
    # 1. Validate inputs before touching the output directory
    dataset = load_dataset(experiment.dataset.path, experiment.dataset.format, experiment.split)
    out_dir = Path(experiment.output_path)
    logger.info(f"Run '{experiment.name}': {len(dataset)} series, seeds {experiment.member_seeds}, out={out_dir}")

    # 2. Members
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_experiment(experiment, out_dir / CONFIG_FILE)
    write_exclusion_log(dataset.excluded, out_dir / EXCLUSIONS_FILE)
    members = _run_members(experiment, dataset, out_dir, workers, progress_every)

    # 3. Median ensemble over the test window
    forecaster = EnsembleForecaster(load_members(out_dir, [m.seed for m in members]), method=experiment.name)
    panel, actuals = roll_forecasts(forecaster, dataset, window="test")
    write_panel(panel, out_dir / "forecasts_test.csv")
    scores = score(panel, actuals)
    scores.write(out_dir / "scores_test.csv")
    summary = scores.summary()
    summary.to_csv(out_dir / "summary_test.csv", index=False, lineterminator="\n")

    # 4. Manifest
    audit = leak_audit(dataset, members, experiment.train.final_fit)
    if not audit["passed"]:
        logger.error(f"Leak audit failed: {audit['violations'][:5]}")
    manifest = {
        "experiment": experiment.model_dump(mode="json"),
        "seeds": experiment.member_seeds,
        "dataset": {
            "path": experiment.dataset.path,
            "format": experiment.dataset.format,
            "content_hash": content_hash(experiment.dataset.path),
            "num_series": len(dataset),
            "excluded": len(dataset.excluded),
        },
        "code_revision": get_code_revision(),
        "max_target_index": max(m.max_target_index for m in members),
        "test_start_index": min(len(s.history) for s in dataset.splits),
        "leak_audit": audit,
        "members": [
            {"seed": m.seed, "iterations": m.iterations, "wall_clock_seconds": m.wall_clock,
             "max_target_index": m.max_target_index}
            for m in members
        ],
        "test_scores": summary.to_dict(orient="records"),
        "finished_at": datetime.now(timezone.utc),
    }
    if not save_data_to_file(manifest, str(out_dir / MANIFEST_FILE)):
        raise EngineError(f"Could not write manifest to {out_dir}")

    row = summary.iloc[0]
    console.print(
        f"✅ {experiment.name}: test sMAPE={row['smape']:.3f}  sMAPC={row['smapc']:.3f}  ({out_dir})",
        style="bold green",
    )
    return manifest


# --- Grid search ---

def _run_cell(cell_experiment, dataset, progress_every):
    config = cell_experiment.train_config(cell_experiment.member_seeds[0], progress_every)
    params, log = train(dataset, config, final_fit=False, show_progress=False)
    forecaster = EnsembleForecaster([TrainedModel(config.model, params)], method=cell_experiment.name)
    panel, actuals = roll_forecasts(forecaster, dataset, window="validation")
    row = score(panel, actuals).summary().iloc[0]
    return float(row["smape"]), float(row["smapc"]), log.wall_clock


def run_grid(experiment, workers=1, progress_every=100):
    """
    One training run per grid cell, scored by rolling over the validation
    window. Writes the ranked report and the winning config.
    """
    if experiment.grid is None:
        raise ContractError(f"Experiment '{experiment.name}' has no grid section")
    dataset = load_dataset(experiment.dataset.path, experiment.dataset.format, experiment.split)
    if experiment.split.validation_length < experiment.model.horizon:
        raise ContractError("Grid search needs a validation window at least one horizon long")

    cells = experiment.grid.cells()
    cell_experiments = [experiment.with_cell(cell) for cell in cells]
    logger.info(f"Grid '{experiment.name}': {len(cells)} cells over {list(experiment.grid.params)}")

    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            futures = [pool.submit(_run_cell, e, dataset, progress_every) for e in cell_experiments]
            outcomes = [_outcome(f.result) for f in futures]
    else:
        outcomes = []
        for cell, cell_experiment in zip(cells, cell_experiments):
            console.print(f"   ⚙️  Grid cell {cell}...", style="dim")
            outcomes.append(_outcome(lambda: _run_cell(cell_experiment, dataset, progress_every)))

    rows = []
    for cell, (result, error) in zip(cells, outcomes):
        if error is not None:
            logger.error(f"Grid cell {cell} failed: {error}")
            rows.append({**cell, "validation_smape": None, "validation_smapc": None,
                         "wall_clock_seconds": None, "status": "failed", "error": error})
        else:
            smape_value, smapc_value, wall_clock = result
            rows.append({**cell, "validation_smape": smape_value, "validation_smapc": smapc_value,
                         "wall_clock_seconds": wall_clock, "status": "ok", "error": ""})

    report = pd.DataFrame(rows)
    report = report.sort_values("validation_smape", na_position="last", kind="stable").reset_index(drop=True)
    report.insert(0, "rank", range(1, len(report) + 1))

    out_dir = Path(experiment.output_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.drop(columns=["wall_clock_seconds"]).to_csv(out_dir / GRID_REPORT_FILE, index=False, lineterminator="\n")

    ok = report[report["status"] == "ok"]
    if ok.empty:
        raise TrainingAbortedError(f"All {len(cells)} grid cells failed", {"cells": len(cells)})

    winner = {name: _native(ok.iloc[0][name]) for name in experiment.grid.params}
    selected = experiment.with_cell(winner, single_run=False)
    dump_experiment(selected, out_dir / WINNER_FILE)
    console.print(f"✅ Grid winner {winner} (validation sMAPE={ok.iloc[0]['validation_smape']:.3f})", style="bold green")
    return report, selected


def _outcome(run):
    try:
        return run(), None
    except (EngineError, ValueError, FloatingPointError) as e:
        logger.warning("Grid cell raised", exc_info=True)
        return None, f"{type(e).__name__}: {e}"


def _native(value):
    return value.item() if hasattr(value, "item") else value


# --- Forecast / score / mcb ---

def run_forecast(dataset, out_path, run_dir=None, baseline=None, window="test", method=None):
    if baseline == "seasonal-naive":
        forecaster = SeasonalNaive()
    elif baseline is not None:
        raise ContractError(f"Unknown baseline '{baseline}'")
    elif run_dir is not None:
        forecaster = EnsembleForecaster(load_members(run_dir), method=method or Path(run_dir).name)
    else:
        raise ContractError("forecast needs a run directory or a baseline")

    panel, _ = roll_forecasts(forecaster, dataset, window=window, method=method)
    path = write_panel(panel, out_path)
    console.print(f"✅ {panel.method}: {len(panel.series_ids)} series x {panel.num_origins} origins -> {path}", style="green")
    return panel


def run_score(panel_paths, dataset, out_dir, window="test"):
    """Scores every method in every panel file against the dataset's window actuals."""
    tables = []
    for path in panel_paths:
        for method, panel in read_panels(path).items():
            tables.append(score(panel, window_actuals(dataset, panel.series_ids, window)))
    if not tables:
        raise ContractError("No forecast panels to score")

    scores = ScoreTable.concat(tables)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores.write(out_dir / "scores.csv")
    summary = scores.summary()
    summary.to_csv(out_dir / "summary.csv", index=False, lineterminator="\n")
    for row in summary.itertuples(index=False):
        console.print(f"   {row.method:<24} sMAPE={row.smape:8.3f}  sMAPC={row.smapc:8.3f}")
    return scores


def run_mcb(score_path, out_dir, alpha=0.05):
    scores = ScoreTable.read(score_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for metric in METRICS:
        result = mcb(scores.matrix(metric), alpha)
        result.write(out_dir / f"mcb_{metric}.csv")
        plot_mcb(result, out_dir / f"mcb_{metric}.svg", title=f"MCB on {metric}")
        console.print(f"   {metric}: best={result.best}, half-width={result.half_width:.3f}")
        results[metric] = result
    return results


# --- Report ---

def _classify(path):
    """'run', 'grid', 'scores' or None for an input of the report command."""
    path = Path(path)
    if path.is_dir():
        return "run" if (path / MANIFEST_FILE).exists() or (path / MEMBERS_DIR).is_dir() else None
    if path.suffix != ".csv" or not path.exists():
        return None
    header = list(pd.read_csv(path, nrows=0).columns)
    if "validation_smape" in header and "rank" in header:
        return "grid"
    if all(c in header for c in SCORE_COLUMNS):
        return "scores"
    return None


def _first_trajectory(run_dir):
    paths = sorted((Path(run_dir) / MEMBERS_DIR).glob(f"*/{TRAJECTORY_FILE}"))
    if not paths:
        raise ContractError(f"No trajectory logs under {run_dir}")
    return pd.read_csv(paths[0])


def run_report(inputs, out_dir):
    """
    Summary table and diagnostic plots from run directories, grid reports and
    score files. Missing inputs skip their plot with a warning.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs, grids, score_files = [], [], []
    for path in inputs:
        kind = _classify(path)
        if kind == "run":
            runs.append(Path(path))
        elif kind == "grid":
            grids.append(Path(path))
        elif kind == "scores":
            score_files.append(Path(path))
        else:
            logger.warning(f"Report input {path} not recognized; skipped")
            console.print(f"   ⚠️  Skipping unrecognized input {path}", style="yellow")
    score_files += [r / "scores_test.csv" for r in runs if (r / "scores_test.csv").exists()]

    written, skipped = [], []

    def attempt(name, action):
        try:
            written.append(action())
        except (EngineError, ValueError, KeyError, OSError) as e:
            logger.warning(f"Report: skipping {name}: {e}", exc_info=True)
            skipped.append(name)

    trajectories = {}
    for run in runs:
        try:
            trajectories[run.name] = _first_trajectory(run)
        except (EngineError, OSError) as e:
            logger.warning(f"Report: no trajectory for {run}: {e}")
    if trajectories:
        attempt("lambda trajectory", lambda: plot_lambda_trajectory(trajectories, out_dir / "lambda_trajectory.svg"))
        attempt("cosine similarity", lambda: plot_cosine_similarity(trajectories, out_dir / "cosine_similarity.svg"))
    else:
        skipped.extend(["lambda trajectory", "cosine similarity"])

    for grid in grids:
        frame = pd.read_csv(grid)
        if "kappa" in frame.columns:
            attempt(f"kappa sweep {grid.stem}",
                    lambda: plot_kappa_sweep(frame[frame["status"] == "ok"], out_dir / f"kappa_sweep_{grid.parent.name}.svg"))

    if score_files:
        scores = ScoreTable.concat([ScoreTable.read(p) for p in score_files])
        summary_path = out_dir / "summary.csv"
        scores.summary().to_csv(summary_path, index=False, lineterminator="\n")
        written.append(summary_path)
        for metric in METRICS:
            def mcb_plot(metric=metric):
                result = mcb(scores.matrix(metric))
                result.write(out_dir / f"mcb_{metric}.csv")
                return plot_mcb(result, out_dir / f"mcb_{metric}.svg", title=f"MCB on {metric}")
            attempt(f"mcb {metric}", mcb_plot)
    else:
        skipped.extend(["summary", "mcb"])

    for name in skipped:
        console.print(f"   ⚠️  Skipped {name}", style="yellow")
    console.print(f"✅ Report: {len(written)} files in {out_dir}", style="bold green")
    return written, skipped
