"""Metrics, uncertainty maps and the penetration-rate sweep.

Estimates are scored on the composite field: observed cells keep their training
value and only the remaining cells come from the estimator. Truth cells that are
missing are left out of the metrics and counted.
"""

import hashlib
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from baseline_asm import AsmParams, asm_estimate
from grid import (
    SpatioTemporalGrid,
    SpeedField,
    TrajectorySet,
    aggregate_to_grid,
    field_to_observations,
    sample_penetration,
)
from kernels import KernelSpec, wrap_angle
from multilane import (
    JointPrediction,
    fit_independent,
    fit_joint,
    predict_independent,
    predict_joint,
    problem_from_field,
)
from vsgp import KernelInit, TrainedModel, VsgpOptions, fit, fit_pretrained

logger = logging.getLogger(__name__)

KMH = 3.6
REPORT_COLUMNS = [
    "method",
    "rate",
    "seed",
    "mae",
    "rmse",
    "fit_seconds",
    "predict_seconds",
    "status",
]
METRIC_COLUMNS = ["method", "rate", "seed", "mae", "rmse", "status"]


class EvaluationError(Exception):
    """Base class for evaluation errors."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self):
        """Human-readable description of the error."""
        return self.message


class GridMismatchError(EvaluationError):
    """Raised when two fields live on different grids."""


class IncompleteEstimateError(EvaluationError):
    """Raised when an estimate leaves a needed cell empty."""


class NoEvaluableCellsError(EvaluationError):
    """Raised when no cell can be scored."""


class WaveSpeedError(EvaluationError):
    """Raised when an angle corresponds to an infinitely fast wave."""


class MissingPretrainedKernelError(EvaluationError):
    """Raised when the pretrained method is requested without a kernel."""


class Method(str, Enum):
    """Estimation methods known to the sweep."""

    ASM = "asm"
    GP_ARD = "gp-ard"
    GP_ROTATED = "gp-rotated"
    P_GP_ROTATED = "p-gp-rotated"


def _same_grid(first: SpeedField, second: SpeedField):
    if first.grid != second.grid:
        raise GridMismatchError(f"fields live on different grids: {first.grid} vs {second.grid}")


def composite_field(estimate: SpeedField, observed: SpeedField) -> SpeedField:
    """Observed cells keep their value; every other cell takes the estimate.

    Raises:
        GridMismatchError: if the grids differ.
        IncompleteEstimateError: if a cell is missing in both fields.
    """
    _same_grid(estimate, observed)
    uncovered = ~observed.present & ~estimate.present
    if np.any(uncovered):
        raise IncompleteEstimateError(
            f"estimate leaves {np.count_nonzero(uncovered)} unobserved cells empty"
        )
    values = np.where(observed.present, observed.values, estimate.values)
    counts = np.where(observed.present, observed.counts, estimate.counts)
    return SpeedField(estimate.grid, values, counts)


class MetricResult(NamedTuple):
    """Scores over the evaluated cells and how many cells were left out."""

    mae: float
    rmse: float
    n_cells: int
    n_excluded: int


def evaluate(
    truth: SpeedField, estimate: SpeedField, exclude: Optional[np.ndarray] = None
) -> MetricResult:
    """MAE and RMSE over every cell present in `truth` and not in `exclude`.

    Raises:
        GridMismatchError: if the grids differ.
        IncompleteEstimateError: if the estimate misses an evaluated cell.
        NoEvaluableCellsError: if nothing is left to score.
    """
    _same_grid(truth, estimate)
    cells = truth.present.copy()
    if exclude is not None:
        cells &= ~np.asarray(exclude, dtype=bool)
    n_cells = int(np.count_nonzero(cells))
    if n_cells == 0:
        raise NoEvaluableCellsError("no cell has both a truth value and an evaluation slot")
    if np.any(~estimate.present[cells]):
        raise IncompleteEstimateError("estimate is missing cells that are being evaluated")

    error = estimate.values[cells] - truth.values[cells]
    mae = float(np.mean(np.abs(error)))
    rmse = float(np.sqrt(np.mean(error**2)))
    return MetricResult(mae, max(rmse, mae), n_cells, int(cells.size - n_cells))


def rmse(truth: SpeedField, estimate: SpeedField) -> float:
    """Root-mean-square error in m/s."""
    return evaluate(truth, estimate).rmse


def mae(truth: SpeedField, estimate: SpeedField) -> float:
    """Mean absolute error in m/s."""
    return evaluate(truth, estimate).mae


def uncertainty_field(
    model: TrainedModel, grid: Optional[SpatioTemporalGrid] = None, k: float = 3.0
) -> np.ndarray:
    """k·std of the predictive speed (noise included) for every cell, S×T×L."""
    return k * predict_joint(model, grid).std(include_noise=True)


def wave_speed_from_angle(angle: float, ds: float, dt: float) -> float:
    """Wave speed in km/h (negative travels upstream) of a cell-unit angle.

    Raises:
        WaveSpeedError: if the angle is a multiple of π.
    """
    if abs(math.sin(angle)) < 1e-12:
        raise WaveSpeedError(f"angle {angle} describes an infinitely fast wave")
    return -KMH * (ds / dt) / math.tan(angle)


def angle_from_wave_speed(speed: float, ds: float, dt: float) -> float:
    """Cell-unit angle in (−π/2, π/2] of a wave travelling at `speed` km/h."""
    if speed == 0:
        return math.pi / 2
    return wrap_angle(math.atan((ds / dt) / (-speed / KMH)))


def wave_angle(spec: KernelSpec) -> float:
    """Angle of the direction of longest correlation of a rotated kernel."""
    if spec.lengthscale_s >= spec.lengthscale_t:
        return spec.angle
    return wrap_angle(spec.angle + math.pi / 2)


def export_heatmaps(
    directory: Union[str, Path],
    truth: Optional[SpeedField],
    estimate: SpeedField,
    uncertainty: Optional[np.ndarray] = None,
    prefix: str = "",
) -> List[Path]:
    """Write per-lane S×T CSV matrices for the estimate, residuals and k·std.

    Residuals are estimate − truth; cells missing in truth are left blank.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if truth is not None:
        _same_grid(truth, estimate)

    layers: Dict[str, np.ndarray] = {"estimate": estimate.values}
    if truth is not None:
        layers["residual"] = estimate.values - truth.values
        layers["abs_residual"] = np.abs(estimate.values - truth.values)
    if uncertainty is not None:
        layers["uncertainty"] = np.asarray(uncertainty).reshape(estimate.grid.shape)

    paths = []
    for name, layer in layers.items():
        for lane in range(estimate.grid.L):
            path = directory / f"{prefix}{name}_lane{lane + 1}.csv"
            pd.DataFrame(layer[:, :, lane]).to_csv(
                path, header=False, index=False, float_format="%.17g", na_rep=""
            )
            paths.append(path)
    return paths


class EstimatorSettings(BaseModel):
    """Everything an estimator needs besides the observed field."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kernel: KernelInit = Field(default_factory=KernelInit)
    vsgp: VsgpOptions = Field(default_factory=VsgpOptions)
    asm: AsmParams = Field(default_factory=AsmParams)
    pretrained: Optional[KernelSpec] = None
    multilane: bool = True
    rank: Optional[int] = Field(default=None, ge=1)
    physical_units: bool = False


Model = Union[TrainedModel, List[Optional[TrainedModel]]]


class Estimate(NamedTuple):
    """Output of one estimator run."""

    field: SpeedField
    prediction: Optional[JointPrediction]
    model: Optional[Model]
    fit_seconds: float
    predict_seconds: float


def _gp_options(method: Method, settings: EstimatorSettings) -> Tuple[VsgpOptions, KernelInit]:
    if method is Method.GP_ARD:
        return (
            settings.vsgp.model_copy(update={"optimize_angle": False}),
            settings.kernel.model_copy(update={"angle": 0.0}),
        )
    return settings.vsgp, settings.kernel


def train_model(
    method: Method, observed: SpeedField, settings: EstimatorSettings, seed: int
) -> Model:
    """Fit the GP behind `method` to an observed field.

    Multi-lane grids use a joint coregionalized model unless `settings.multilane` is
    off, in which case each lane is fitted on its own and a list comes back.

    Raises:
        ValueError: for the smoother, which has nothing to train.
        MissingPretrainedKernelError: for the pretrained method without a kernel.
    """
    if method is Method.ASM:
        raise ValueError("method asm has no trainable model")
    if method is Method.P_GP_ROTATED and settings.pretrained is None:
        raise MissingPretrainedKernelError("method p-gp-rotated needs a pretrained kernel")
    grid = observed.grid
    units = settings.physical_units
    options, init = _gp_options(method, settings)

    if grid.L == 1:
        train = field_to_observations(observed, physical_units=units)
        if method is Method.P_GP_ROTATED:
            return fit_pretrained(
                train, settings.pretrained, seed, grid, options, physical_units=units
            )
        return fit(train, grid, options, init, seed, physical_units=units)
    problem = problem_from_field(observed, settings.rank, units)
    if settings.multilane or method is Method.P_GP_ROTATED:
        pretrained = settings.pretrained if method is Method.P_GP_ROTATED else None
        return fit_joint(problem, options, seed, init, pretrained, physical_units=units)
    return fit_independent(problem, options, seed, init, units)


def predict_model(model: Model, grid: SpatioTemporalGrid) -> JointPrediction:
    """Predict every cell of `grid` with a joint model or a list of per-lane models."""
    if isinstance(model, list):
        return predict_independent(model, grid)
    return predict_joint(model, grid)


def estimate_field(
    method: Method, observed: SpeedField, settings: EstimatorSettings, seed: int
) -> Estimate:
    """Run one estimator on an observed field, timing the fit and predict phases."""
    grid = observed.grid
    if method is Method.ASM:
        start = time.perf_counter()
        units = settings.physical_units
        observations = field_to_observations(observed, physical_units=units)
        estimate = asm_estimate(observations, grid, settings.asm, units)
        return Estimate(estimate, None, None, 0.0, time.perf_counter() - start)

    start = time.perf_counter()
    model = train_model(method, observed, settings, seed)
    fit_seconds = time.perf_counter() - start

    start = time.perf_counter()
    prediction = predict_model(model, grid)
    predict_seconds = time.perf_counter() - start
    return Estimate(prediction.estimate, prediction, model, fit_seconds, predict_seconds)


@dataclass(frozen=True, eq=False)
class SweepDataset:
    """Trajectories to subsample and the truth field to score against."""

    points: TrajectorySet
    grid: SpatioTemporalGrid
    truth: SpeedField

    @classmethod
    def from_points(
        cls, points: TrajectorySet, grid: SpatioTemporalGrid, truth: Optional[SpeedField] = None
    ) -> "SweepDataset":
        """Truth defaults to the aggregate of every trajectory point."""
        return cls(points, grid, truth if truth is not None else aggregate_to_grid(points, grid))


class RunRecord(NamedTuple):
    """Outcome of one (method, rate, seed) job."""

    method: str
    rate: float
    seed: int
    mae: float
    rmse: float
    fit_seconds: float
    predict_seconds: float
    status: str
    error: Optional[str] = None
    n_cells: int = 0
    n_excluded: int = 0


class AggregateRecord(NamedTuple):
    """Mean and sample standard deviation over the successful seeds of a group."""

    method: str
    rate: float
    mae_mean: float
    mae_std: float
    rmse_mean: float
    rmse_std: float
    runs: int
    failed: int


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    if not values:
        return math.nan, math.nan
    spread = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return float(np.mean(values)), spread


@dataclass
class ExperimentReport:
    """Per-run metrics, per-group aggregates and the provenance of a sweep."""

    records: List[RunRecord]
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        order = {method.value: k for k, method in enumerate(Method)}
        self.records = sorted(
            self.records, key=lambda r: (order.get(r.method, len(order)), r.method, r.rate, r.seed)
        )

    @property
    def aggregates(self) -> List[AggregateRecord]:
        """One entry per (method, rate), in record order."""
        groups: Dict[Tuple[str, float], List[RunRecord]] = {}
        for record in self.records:
            groups.setdefault((record.method, record.rate), []).append(record)
        aggregates = []
        for (method, rate), records in groups.items():
            ok = [r for r in records if r.status == "ok"]
            mae_mean, mae_std = _mean_std([r.mae for r in ok])
            rmse_mean, rmse_std = _mean_std([r.rmse for r in ok])
            aggregates.append(
                AggregateRecord(
                    method,
                    rate,
                    mae_mean,
                    mae_std,
                    rmse_mean,
                    rmse_std,
                    len(ok),
                    len(records) - len(ok),
                )
            )
        return aggregates

    def frame(self, columns: Sequence[str] = REPORT_COLUMNS) -> pd.DataFrame:
        """Records as a DataFrame restricted to `columns`."""
        rows = [record._asdict() for record in self.records]
        return pd.DataFrame(rows, columns=list(RunRecord._fields))[list(columns)]

    def summary(self) -> dict:
        """Deterministic JSON document: aggregates, failures and provenance."""
        return {
            "aggregates": [a._asdict() for a in self.aggregates],
            "failures": [
                {"method": r.method, "rate": r.rate, "seed": r.seed, "error": r.error}
                for r in self.records
                if r.status != "ok"
            ],
            "provenance": self.provenance,
        }

    def timings(self) -> dict:
        """Wall-clock seconds per run, kept apart from the reproducible outputs."""
        return {
            "runs": [
                {
                    "method": r.method,
                    "rate": r.rate,
                    "seed": r.seed,
                    "fit_seconds": r.fit_seconds,
                    "predict_seconds": r.predict_seconds,
                }
                for r in self.records
            ]
        }

    def write(self, directory: Union[str, Path]) -> Dict[str, Path]:
        """Write report.csv, metrics.csv, summary.json and timings.json.

        Every file except report.csv and timings.json is byte-identical across reruns.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "report": directory / "report.csv",
            "metrics": directory / "metrics.csv",
            "summary": directory / "summary.json",
            "timings": directory / "timings.json",
        }
        self.frame(REPORT_COLUMNS).to_csv(paths["report"], index=False, float_format="%.17g")
        self.frame(METRIC_COLUMNS).to_csv(paths["metrics"], index=False, float_format="%.17g")
        paths["summary"].write_text(_dumps(self.summary()))
        paths["timings"].write_text(_dumps(self.timings()))
        return paths


def _dumps(document) -> str:
    return json.dumps(document, indent=2, sort_keys=True) + "\n"


def digest(document) -> str:
    """SHA-256 of the canonical JSON form of a document."""
    return hashlib.sha256(json.dumps(document, sort_keys=True).encode()).hexdigest()


class SweepJob(NamedTuple):
    """One cell of the sweep."""

    method: Method
    rate: float
    seed: int


def run_job(
    dataset: SweepDataset,
    job: SweepJob,
    settings: EstimatorSettings,
    unobserved_only: bool = False,
) -> RunRecord:
    """Subsample, estimate, composite and score one job; failures become records."""
    try:
        observed_points, _ = sample_penetration(dataset.points, job.rate, job.seed)
        observed = aggregate_to_grid(observed_points, dataset.grid)
        result = estimate_field(job.method, observed, settings, job.seed)
        composite = composite_field(result.field, observed)
        metrics = evaluate(dataset.truth, composite, observed.present if unobserved_only else None)
    except Exception as e:
        logger.error(f"Sweep job {job.method.value} rate={job.rate} seed={job.seed} failed: {e}")
        return RunRecord(
            job.method.value,
            job.rate,
            job.seed,
            math.nan,
            math.nan,
            math.nan,
            math.nan,
            "failed",
            f"{type(e).__name__}: {e}",
        )
    logger.info(
        f"Sweep job {job.method.value} rate={job.rate} seed={job.seed}: "
        f"MAE {metrics.mae:.4f} RMSE {metrics.rmse:.4f}"
    )
    return RunRecord(
        job.method.value,
        job.rate,
        job.seed,
        metrics.mae,
        metrics.rmse,
        result.fit_seconds,
        result.predict_seconds,
        "ok",
        None,
        metrics.n_cells,
        metrics.n_excluded,
    )


def run_sweep(
    dataset: SweepDataset,
    methods: Sequence[Method],
    rates: Sequence[float] = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5),
    seeds: int = 10,
    settings: Optional[EstimatorSettings] = None,
    base_seed: int = 0,
    threads: int = 1,
    unobserved_only: bool = False,
    provenance: Optional[dict] = None,
) -> ExperimentReport:
    """Run every (method, rate, seed) job on a bounded worker pool.

    Seeds are base_seed, base_seed + 1, ...; the same seed drives the probe draw
    and the inducing initialisation.

    Raises:
        MissingPretrainedKernelError: if p-gp-rotated is requested without a kernel.
    """
    settings = settings or EstimatorSettings()
    methods = [Method(method) for method in methods]
    if Method.P_GP_ROTATED in methods and settings.pretrained is None:
        raise MissingPretrainedKernelError("method p-gp-rotated needs a pretrained kernel")

    jobs = [
        SweepJob(method, float(rate), base_seed + k)
        for method in methods
        for rate in rates
        for k in range(seeds)
    ]
    logger.info(f"Running {len(jobs)} sweep jobs on {threads} threads")
    records: List[RunRecord] = []
    lock = threading.Lock()

    def work(job: SweepJob):
        record = run_job(dataset, job, settings, unobserved_only)
        with lock:
            records.append(record)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for future in [pool.submit(work, job) for job in jobs]:
            future.result()

    document = {
        "methods": [method.value for method in methods],
        "rates": [float(rate) for rate in rates],
        "seeds": list(range(base_seed, base_seed + seeds)),
        "settings": settings.model_dump(mode="json"),
        "unobserved_only": unobserved_only,
        "grid": dataset.grid.model_dump(),
    }
    document.update(provenance or {})
    return ExperimentReport(records, document)
