#!/usr/bin/env python3
"""Command-line entry point: synth, ingest, fit, predict and sweep.

Every command reads one run configuration, writes its artifacts into the output
directory and records them in manifest.json. Flags only override configuration keys.
"""

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import pandas as pd
import pydantic
import scipy
import yaml

from baseline_asm import asm_estimate
from config import ConfigError, RunConfig, load_config
from evaluation import (
    Method,
    SweepDataset,
    composite_field,
    evaluate,
    export_heatmaps,
    predict_model,
    run_sweep,
    train_model,
)
from grid import (
    SpeedField,
    TrajectorySet,
    aggregate_to_grid,
    field_to_observations,
    ingest_trajectories,
    read_field,
    sample_penetration,
    write_field,
    write_trajectories,
)
from multilane import JointPrediction
from synth import generate_field, generate_trajectories, wave_angle
from vsgp import TrainedModel

LOGGER = logging.getLogger(__name__)

VERSION = "0.1.0"
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _relative(path: Path, directory: Path) -> str:
    try:
        return str(path.relative_to(directory))
    except ValueError:
        return str(path)


def _dumps(document) -> str:
    return json.dumps(document, indent=2, sort_keys=True) + "\n"


def library_versions() -> Dict[str, str]:
    """Versions of the interpreter and of the numerical stack."""
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
        "pyyaml": yaml.__version__,
        "rotated-gp-tse": VERSION,
    }


def write_manifest(
    config: RunConfig, command: str, artifacts: List[Path], seeds: List[int]
) -> Path:
    """Record a command's configuration digest, seeds, versions and artifact hashes.

    Commands sharing an output directory each keep their own entry.
    """
    directory = config.output.directory
    path = directory / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.setdefault("commands", {})[command] = {
        "config_sha256": config.digest(),
        "config": config.canonical(),
        "seeds": seeds,
        "versions": library_versions(),
        "artifacts": {
            _relative(artifact, directory): _sha256(artifact)
            for artifact in sorted(artifacts)
        },
    }
    path.write_text(_dumps(manifest))
    LOGGER.info(f"Wrote manifest {path}")
    return path


def _load_points(config: RunConfig) -> TrajectorySet:
    source = config.trajectories_path
    if not source.exists():
        raise FileNotFoundError(f"trajectory file {source} does not exist")
    result = ingest_trajectories(source, config.data.columns, config.grid)
    LOGGER.info(f"Ingested {len(result.points)} points from {source} ({result.dropped} dropped)")
    return result.points


def _load_truth(config: RunConfig, points: TrajectorySet) -> SpeedField:
    if config.data.truth is None:
        return aggregate_to_grid(points, config.grid)
    if not config.data.truth.exists():
        raise FileNotFoundError(f"truth field {config.data.truth} does not exist")
    return read_field(config.data.truth)


def _observed_field(config: RunConfig, points: TrajectorySet) -> SpeedField:
    if config.data.rate < 1.0:
        points, _ = sample_penetration(points, config.data.rate, config.seed)
    return aggregate_to_grid(points, config.grid)


def cmd_synth(config: RunConfig) -> List[Path]:
    """Generate a synthetic truth field and trajectories driven through it."""
    directory = config.output.directory
    scenario = config.synth.scenario
    truth = generate_field(scenario, seed=config.seed)
    points = generate_trajectories(scenario, seed=config.seed, field=truth)

    scenario_path = directory / "scenario.json"
    scenario_path.write_text(
        _dumps(
            {
                "scenario": scenario.model_dump(mode="json"),
                "seed": config.seed,
                "wave_angles": [wave_angle(scenario, k) for k in range(len(scenario.bands))],
            }
        )
    )
    truth_path = write_field(truth, directory / "truth.csv")
    return [
        write_trajectories(points, directory / "trajectories.csv"),
        truth_path,
        truth_path.with_suffix(".grid.json"),
        scenario_path,
    ]


def cmd_ingest(config: RunConfig) -> List[Path]:
    """Aggregate trajectories onto the grid, plus the probe subset when rate < 1."""
    directory = config.output.directory
    points = _load_points(config)
    fields = {"field.csv": aggregate_to_grid(points, config.grid)}
    if config.data.rate < 1.0:
        fields["observed.csv"] = _observed_field(config, points)
    artifacts = []
    for name, field in fields.items():
        path = write_field(field, directory / name)
        artifacts += [path, path.with_suffix(".grid.json")]
        LOGGER.info(f"Wrote {path}: {int(field.present.sum())} observed cells")
    return artifacts


def _model_paths(config: RunConfig, lanes: int) -> List[Path]:
    base = config.model_path
    return [base.with_name(f"{base.stem}_lane{lane}{base.suffix}") for lane in range(1, lanes + 1)]


def cmd_fit(config: RunConfig) -> List[Path]:
    """Train the configured GP method and save the model.

    Independent per-lane models go to model_lane<k>.json next to the configured path;
    lanes without data get no file.
    """
    method = config.model.method
    if method is Method.ASM:
        raise ValueError("method asm has no trainable model; use predict")
    observed = _observed_field(config, _load_points(config))
    model = train_model(method, observed, config.estimator_settings(), config.seed)
    if isinstance(model, TrainedModel):
        return [model.save(config.model_path)]
    return [
        lane_model.save(path)
        for lane_model, path in zip(model, _model_paths(config, len(model)))
        if lane_model is not None
    ]


def _load_model(config: RunConfig) -> Union[TrainedModel, List[Optional[TrainedModel]]]:
    if config.model_path.exists():
        return TrainedModel.load(config.model_path)
    paths = _model_paths(config, config.grid.L)
    if not any(path.exists() for path in paths):
        raise FileNotFoundError(f"model file {config.model_path} does not exist")
    return [TrainedModel.load(path) if path.exists() else None for path in paths]


def _prediction_frame(prediction: JointPrediction) -> pd.DataFrame:
    grid = prediction.estimate.grid
    i, j, lane = np.meshgrid(
        np.arange(grid.S), np.arange(grid.T), np.arange(grid.L), indexing="ij"
    )
    frame = pd.DataFrame(
        {
            "lane": lane.ravel() + 1,
            "space_index": i.ravel(),
            "time_index": j.ravel(),
            "mean": prediction.estimate.values.ravel(),
            "variance": prediction.variance.ravel(),
            "noise_variance": prediction.noise_variance.ravel(),
        }
    )
    return frame.sort_values(["lane", "space_index", "time_index"], kind="stable")


def cmd_predict(config: RunConfig) -> List[Path]:
    """Estimate every cell; GP methods load the model saved by `fit`.

    Writes the estimate field, the composite field and, for GP methods, the per-cell
    latent and noise variances. Heatmaps are scored against the truth field when one
    is available.
    """
    directory = config.output.directory
    points = _load_points(config)
    observed = _observed_field(config, points)
    prediction = None
    if config.model.method is Method.ASM:
        observations = field_to_observations(observed, physical_units=config.data.physical_units)
        estimate = asm_estimate(
            observations, config.grid, config.baselines.asm, config.data.physical_units
        )
    else:
        prediction = predict_model(_load_model(config), config.grid)
        estimate = prediction.estimate

    artifacts = []
    for name, field in (
        ("estimate.csv", estimate),
        ("composite.csv", composite_field(estimate, observed)),
    ):
        path = write_field(field, directory / name)
        artifacts += [path, path.with_suffix(".grid.json")]
    uncertainty = None
    if prediction is not None:
        path = directory / "prediction.csv"
        _prediction_frame(prediction).to_csv(path, index=False, float_format="%.17g")
        artifacts.append(path)
        uncertainty = config.model.sigma_multiplier * prediction.std(include_noise=True)

    truth = _load_truth(config, points)
    metrics = evaluate(truth, composite_field(estimate, observed))
    LOGGER.info(
        f"Composite field vs truth: MAE {metrics.mae:.4f} RMSE {metrics.rmse:.4f} "
        f"over {metrics.n_cells} cells"
    )
    if config.output.heatmaps:
        artifacts += export_heatmaps(directory / "heatmaps", truth, estimate, uncertainty)
    return artifacts


def cmd_sweep(config: RunConfig) -> List[Path]:
    """Run the penetration-rate sweep and write the report files.

    Only the reproducible files are recorded in the manifest; report.csv and
    timings.json carry wall-clock times.
    """
    points = _load_points(config)
    dataset = SweepDataset.from_points(points, config.grid, _load_truth(config, points))
    report = run_sweep(
        dataset,
        config.sweep.methods,
        config.sweep.rates,
        config.sweep.seeds,
        config.estimator_settings(),
        base_seed=config.seed,
        threads=config.sweep.threads,
        unobserved_only=config.sweep.unobserved_only,
        provenance={"config_sha256": config.digest()},
    )
    paths = report.write(config.output.directory)
    for aggregate in report.aggregates:
        LOGGER.info(
            f"{aggregate.method} @ {aggregate.rate:g}: "
            f"MAE {aggregate.mae_mean:.3f} ({aggregate.mae_std:.3f}), "
            f"RMSE {aggregate.rmse_mean:.3f} ({aggregate.rmse_std:.3f}), "
            f"{aggregate.failed} failed"
        )
    return [paths["metrics"], paths["summary"]]


COMMANDS: Dict[str, Callable[[RunConfig], List[Path]]] = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
}


def _seeds(config: RunConfig, command: str) -> List[int]:
    if command == "sweep":
        return list(range(config.seed, config.seed + config.sweep.seeds))
    return [config.seed]


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per entry of `COMMANDS`."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides seed")
    common.add_argument("--threads", type=int, help="overrides sweep.threads")
    common.add_argument("--output", type=Path, help="overrides output.directory")
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging verbosity",
    )

    parser = argparse.ArgumentParser(
        prog="rotgp",
        description="Traffic speed field estimation with rotated-kernel Gaussian processes.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, command in COMMANDS.items():
        summary = (command.__doc__ or "").splitlines()[0]
        subparsers.add_parser(name, parents=[common], help=summary, description=summary)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    overrides = {
        "seed": args.seed,
        "sweep.threads": args.threads,
        "output.directory": str(args.output) if args.output is not None else None,
    }
    try:
        config = load_config(args.config, overrides)
    except ConfigError as e:
        LOGGER.error(f"Invalid configuration at {e.pointer or '/'} ({e.path}): {e.message}")
        return EXIT_CONFIG
    except FileNotFoundError as e:
        LOGGER.error(f"Configuration file not found: {e}")
        return EXIT_FAILURE

    LOGGER.info(f"Starting {args.command} (seed {config.seed})")
    try:
        config.output.directory.mkdir(parents=True, exist_ok=True)
        artifacts = COMMANDS[args.command](config)
        write_manifest(config, args.command, artifacts, _seeds(config, args.command))
    except Exception as e:
        LOGGER.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return EXIT_FAILURE
    directory = config.output.directory
    LOGGER.info(f"Finished {args.command}: {len(artifacts)} artifacts in {directory}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
