"""Joint estimation across lanes with an intrinsic coregionalization kernel.

Lanes are observed at different places and times (heterotopic data). Observations are
stacked into one set tagged with their lane, and a single sparse GP is fitted on the
extended (location, lane) input space.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from grid import (
    EmptyObservationsError,
    ObservationSet,
    SpatioTemporalGrid,
    SpeedField,
    field_to_observations,
)
from kernels import CoregionalizationSpec, KernelSpec
from vsgp import (
    InducingSet,
    KernelInit,
    TrainedModel,
    VsgpOptions,
    fit,
    fit_pretrained,
    num_inducing,
    predict,
    sample_locations,
)

logger = logging.getLogger(__name__)


class MultiLaneError(Exception):
    """Raised for inconsistent or empty multi-lane problems."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self):
        """Human-readable description of the error."""
        return self.message


@dataclass(frozen=True, eq=False)
class MultiLaneProblem:
    """Per-lane observations (index 0 is lane 1) on one shared grid."""

    observations: Tuple[ObservationSet, ...]
    grid: SpatioTemporalGrid
    coregionalization: CoregionalizationSpec

    def __post_init__(self):
        L = self.grid.L
        if len(self.observations) != L:
            raise MultiLaneError(f"{len(self.observations)} observation sets for {L} lanes")
        if self.coregionalization.num_outputs != L:
            raise MultiLaneError(
                f"coregionalization has {self.coregionalization.num_outputs} outputs for {L} lanes"
            )
        for lane, observations in enumerate(self.observations, start=1):
            if len(observations) and np.any(observations.lane != lane):
                raise MultiLaneError(f"observation set {lane} carries foreign lane tags")
        object.__setattr__(self, "observations", tuple(self.observations))

    @property
    def counts(self) -> List[int]:
        """Number of observations per lane."""
        return [len(observations) for observations in self.observations]


def _empty_observations() -> ObservationSet:
    return ObservationSet(np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros(0))


def problem_from_field(
    field: SpeedField,
    rank: Optional[int] = None,
    physical_units: bool = False,
    coregionalization: Optional[CoregionalizationSpec] = None,
) -> MultiLaneProblem:
    """Split an observed field into per-lane observation sets.

    The coregionalization defaults to an identity-padded A of the given rank.
    """
    observations = []
    for lane in range(1, field.grid.L + 1):
        try:
            observations.append(field_to_observations(field, [lane], physical_units))
        except EmptyObservationsError:
            logger.info(f"Lane {lane} has no observed cells")
            observations.append(_empty_observations())
    if coregionalization is None:
        coregionalization = CoregionalizationSpec.identity_padded(field.grid.L, rank)
    return MultiLaneProblem(tuple(observations), field.grid, coregionalization)


def stack_heterotopic(problem: MultiLaneProblem) -> ObservationSet:
    """Concatenate the lanes, lane-major, keeping the input order within each lane.

    Raises:
        MultiLaneError: if no lane has an observation.
    """
    if sum(problem.counts) == 0:
        raise MultiLaneError("multi-lane problem has no observations")
    return ObservationSet(
        np.concatenate([observations.X for observations in problem.observations]),
        np.concatenate([observations.lane for observations in problem.observations]),
        np.concatenate([observations.y for observations in problem.observations]),
    )


def allocate_inducing(counts: Sequence[int], m: int) -> np.ndarray:
    """Split m inducing points across lanes in proportion to their observation counts.

    Every lane with data gets at least one point, so the total may exceed m; the rest is
    shared by largest remainder with ties going to the lower lane.
    """
    counts = np.asarray(counts, dtype=int)
    allocation = (counts > 0).astype(int)
    remaining = max(m - int(allocation.sum()), 0)
    total = counts.sum()
    if remaining and total:
        quotas = remaining * counts / total
        base = np.floor(quotas).astype(int)
        leftover = remaining - int(base.sum())
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:leftover]] += 1
        allocation += base
    return allocation


def joint_inducing(
    problem: MultiLaneProblem, seed: int, physical_units: bool = False
) -> InducingSet:
    """Random inducing points on the extended space, lanes allocated by data share."""
    allocation = allocate_inducing(problem.counts, num_inducing(sum(problem.counts)))
    Z = sample_locations(problem.grid, int(allocation.sum()), seed, physical_units)
    lanes = np.repeat(np.arange(1, problem.grid.L + 1), allocation)
    return InducingSet(Z, lanes)


def fit_joint(
    problem: MultiLaneProblem,
    options: Optional[VsgpOptions] = None,
    seed: int = 0,
    init: Optional[KernelInit] = None,
    pretrained: Optional[KernelSpec] = None,
    inducing: Optional[InducingSet] = None,
    physical_units: bool = False,
) -> TrainedModel:
    """One sparse GP over all lanes with an ICM kernel.

    With `pretrained`, hyperparameters (including A) are taken as given and only the
    inducing posterior is computed.
    """
    train = stack_heterotopic(problem)
    if inducing is None:
        inducing = joint_inducing(problem, seed, physical_units)
    elif inducing.lanes is None:
        raise MultiLaneError("joint inducing points need lane indices")

    if pretrained is not None:
        if pretrained.coregionalization is None:
            pretrained = pretrained.replace(coregionalization=problem.coregionalization)
        return fit_pretrained(
            train, pretrained, seed, problem.grid, options, inducing, physical_units
        )
    return fit(
        train,
        problem.grid,
        options,
        init,
        seed,
        inducing,
        coregionalization=problem.coregionalization,
        physical_units=physical_units,
    )


def fit_independent(
    problem: MultiLaneProblem,
    options: Optional[VsgpOptions] = None,
    seed: int = 0,
    init: Optional[KernelInit] = None,
    physical_units: bool = False,
) -> List[Optional[TrainedModel]]:
    """A separate single-output fit per lane; lanes without data get None."""
    lane_grid = problem.grid.model_copy(update={"L": 1})
    models: List[Optional[TrainedModel]] = []
    for observations in problem.observations:
        if len(observations) == 0:
            models.append(None)
            continue
        ones = np.ones(len(observations), dtype=int)
        single = ObservationSet(observations.X, ones, observations.y)
        models.append(fit(single, lane_grid, options, init, seed, physical_units=physical_units))
    return models


@dataclass(frozen=True, eq=False)
class JointPrediction:
    """Estimated field plus per-cell latent variance (S×T×L) and the noise variance."""

    estimate: SpeedField
    variance: np.ndarray
    noise_variance: np.ndarray

    def std(self, include_noise: bool = True) -> np.ndarray:
        """Per-cell predictive standard deviation, of y by default."""
        variance = self.variance + (self.noise_variance if include_noise else 0.0)
        return np.sqrt(variance)


def predict_joint(
    model: TrainedModel, grid: Optional[SpatioTemporalGrid] = None
) -> JointPrediction:
    """Predict every cell of every lane.

    The model needs one output per lane; a single-output model only fits a one-lane grid.
    """
    grid = grid if grid is not None else model.grid
    if grid is None:
        raise MultiLaneError("prediction needs a grid")
    if model.spec.num_outputs != grid.L:
        raise MultiLaneError(
            f"model with {model.spec.num_outputs} outputs cannot predict {grid.L} lanes"
        )

    X = grid.cell_centers(model.physical_units)
    mean = np.empty(grid.shape)
    variance = np.empty(grid.shape)
    for lane in range(1, grid.L + 1):
        lanes = np.full(len(X), lane) if model.is_multi_output else None
        posterior = predict(model, X, lanes, full_cov=False)
        mean[:, :, lane - 1] = posterior.mean.reshape(grid.S, grid.T)
        variance[:, :, lane - 1] = posterior.variance.reshape(grid.S, grid.T)
    noise = np.full(grid.shape, model.spec.noise_variance)
    return JointPrediction(SpeedField.from_estimate(grid, np.maximum(mean, 0.0)), variance, noise)


def predict_independent(
    models: Sequence[Optional[TrainedModel]], grid: SpatioTemporalGrid
) -> JointPrediction:
    """Assemble per-lane predictions of independent single-output models.

    Lanes without a model are filled from the nearest lane that has one.

    Raises:
        MultiLaneError: if the model count differs from the lane count or no lane has a model.
    """
    if len(models) != grid.L:
        raise MultiLaneError(f"{len(models)} models for {grid.L} lanes")
    available = [lane for lane, model in enumerate(models) if model is not None]
    if not available:
        raise MultiLaneError("no lane has a fitted model")

    lane_grid = grid.model_copy(update={"L": 1})
    mean = np.empty(grid.shape)
    variance = np.empty(grid.shape)
    noise = np.empty(grid.shape)
    for lane in range(grid.L):
        source = min(available, key=lambda k: (abs(k - lane), k))
        if source != lane:
            logger.warning(f"Lane {lane + 1} has no model; using lane {source + 1}")
        prediction = predict_joint(models[source], lane_grid)
        mean[:, :, lane] = prediction.estimate.values[:, :, 0]
        variance[:, :, lane] = prediction.variance[:, :, 0]
        noise[:, :, lane] = prediction.noise_variance[:, :, 0]
    return JointPrediction(SpeedField.from_estimate(grid, mean), variance, noise)
