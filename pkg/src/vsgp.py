"""Variational sparse GP with collapsed-bound training.

The training objective is the collapsed evidence lower bound

    F = log N(y | 0, Q_nn + σ_ε² I) − tr(K_nn − Q_nn) / (2σ_ε²),   Q_nn = K_nm K_mm⁻¹ K_mn

evaluated through an m×m reduction so the cost is O(n·m²). Hyperparameters, inducing
locations and (for multi-output kernels) the coregionalization factor A are fitted by
gradient ascent on F with analytic gradients.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from gp_exact import ConditioningError, Posterior, stable_cholesky
from grid import EmptyObservationsError, ObservationSet, SpatioTemporalGrid
from kernels import (
    DEFAULT_JITTER,
    CoregionalizationSpec,
    KernelError,
    KernelFamily,
    KernelSpec,
    from_vector,
    gram,
    gram_diag,
    gram_input_grad,
    kernel_grad,
    parameter_names,
    to_vector,
)

logger = logging.getLogger(__name__)

MAX_INDUCING = 500
VARIANCE_FLOOR = 1e-6
MODEL_FORMAT = 1


@dataclass(frozen=True, eq=False)
class InducingSet:
    """Inducing locations Z (m×2) and, for multi-output models, their 1-based lanes."""

    Z: np.ndarray
    lanes: Optional[np.ndarray] = None

    def __post_init__(self):
        Z = np.array(self.Z, dtype=float).reshape(-1, 2)
        if len(Z) < 1:
            raise ValueError("an inducing set needs at least one point")
        if not np.all(np.isfinite(Z)):
            raise ValueError("inducing locations must be finite")
        Z.setflags(write=False)
        object.__setattr__(self, "Z", Z)
        if self.lanes is not None:
            lanes = np.array(self.lanes, dtype=int).reshape(-1)
            if len(lanes) != len(Z):
                raise ValueError(f"{len(lanes)} inducing lanes for {len(Z)} locations")
            lanes.setflags(write=False)
            object.__setattr__(self, "lanes", lanes)

    def __len__(self) -> int:
        return len(self.Z)

    def moved(self, Z: np.ndarray) -> "InducingSet":
        """Same lanes, new locations."""
        return InducingSet(Z, self.lanes)


def num_inducing(n: int) -> int:
    """m = max(1, min(⌈0.02·n⌉, 500))."""
    return max(1, min((n + 49) // 50, MAX_INDUCING))


def sample_locations(
    grid: SpatioTemporalGrid, m: int, seed: int, physical_units: bool = False
) -> np.ndarray:
    """m locations drawn uniformly over the grid's input domain."""
    (s_low, s_high), (t_low, t_high) = grid.bounds(physical_units)
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(s_low, s_high, m), rng.uniform(t_low, t_high, m)])


def init_inducing(
    grid: SpatioTemporalGrid, n: int, seed: int, physical_units: bool = False
) -> InducingSet:
    """Random inducing set sized for n training points.

    Raises:
        ValueError: if n < 1.
    """
    if n < 1:
        raise ValueError(f"cannot size an inducing set for {n} training points")
    return InducingSet(sample_locations(grid, num_inducing(n), seed, physical_units))


class VsgpOptions(BaseModel):
    """Optimizer and numerical settings of a sparse fit."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    optimizer: Literal["adaptive", "lbfgs"] = "adaptive"
    max_iterations: int = Field(default=2000, ge=0)
    tolerance: float = Field(default=1e-7, gt=0, description="relative ELBO improvement")
    patience: int = Field(default=20, ge=1, description="window for the tolerance test")
    initial_step: float = Field(default=0.02, gt=0)
    inducing_step: float = Field(default=0.1, gt=0)
    max_step: float = Field(default=1.0, gt=0)
    min_step: float = Field(default=1e-10, gt=0)
    jitter: float = Field(default=DEFAULT_JITTER, ge=0, description="K_mm jitter relative to σ²")
    covariance_cap: int = Field(default=4096, ge=0)
    chunk_size: int = Field(default=4096, ge=1)
    optimize_angle: bool = True
    optimize_inducing: bool = True
    constant_mean: bool = False


class KernelInit(BaseModel):
    """Starting point of a fit; unset values are derived from the data and grid."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    family: KernelFamily = KernelFamily.MATERN52
    variance: Optional[float] = Field(default=None, gt=0)
    lengthscale_s: Optional[float] = Field(default=None, gt=0)
    lengthscale_t: Optional[float] = Field(default=None, gt=0)
    angle: float = 0.0
    noise_variance: Optional[float] = Field(default=None, gt=0)
    shape: float = Field(default=1.0, gt=0)

    def resolve(
        self, grid: SpatioTemporalGrid, y: np.ndarray, physical_units: bool = False
    ) -> KernelSpec:
        """σ² = var(y), ℓs = S/10, ℓt = T/10, σ_ε² = 0.1·σ² unless set."""
        spread = max(float(np.var(y)), VARIANCE_FLOOR)
        (_, s_high), (_, t_high) = grid.bounds(physical_units)
        variance = self.variance if self.variance is not None else spread
        return KernelSpec(
            family=self.family,
            variance=variance,
            lengthscale_s=self.lengthscale_s or s_high / 10.0,
            lengthscale_t=self.lengthscale_t or t_high / 10.0,
            angle=self.angle,
            noise_variance=self.noise_variance or 0.1 * variance,
            shape=self.shape,
        )


class ElboResult(NamedTuple):
    """Collapsed bound, its two parts and its gradients."""

    value: float
    log_likelihood_term: float
    trace_term: float
    gradients: Dict[str, float]
    inducing_gradient: np.ndarray


def _lanes_for(spec: KernelSpec, inducing: InducingSet, train: ObservationSet):
    if spec.coregionalization is None:
        return None, None
    if inducing.lanes is None:
        raise KernelError("a coregionalized kernel needs inducing points with lanes")
    return inducing.lanes, train.lane


def elbo(
    spec: KernelSpec,
    inducing: InducingSet,
    train: ObservationSet,
    jitter: float = DEFAULT_JITTER,
    mean_offset: float = 0.0,
    with_gradients: bool = True,
    warn_sizes: bool = True,
) -> ElboResult:
    """Collapsed ELBO of `train` under `spec` with inducing set `inducing`.

    Args:
        spec: kernel and noise hyperparameters.
        inducing: inducing locations (and lanes for coregionalized kernels).
        train: observations.
        jitter: K_mm diagonal jitter relative to σ²; escalated on failure.
        mean_offset: constant prior mean subtracted from y.
        with_gradients: skip the gradient computation when False.
        warn_sizes: log a warning when there are more inducing points than observations.

    Returns:
        the bound, its log-likelihood and trace parts, gradients keyed as
        `kernels.parameter_names`, and the m×2 gradient with respect to Z.

    Raises:
        ConditioningError: if K_mm cannot be factorised.
    """
    if len(train) == 0:
        raise EmptyObservationsError("the ELBO needs at least one training observation")
    if warn_sizes:
        _check_sizes(len(inducing), len(train))
    lanes_m, lanes_n = _lanes_for(spec, inducing, train)
    Z, X = inducing.Z, train.X
    y = train.y - mean_offset
    n, m = len(y), len(Z)
    s = spec.noise_variance

    Kmm = gram(spec, Z, lanes=lanes_m)
    P = gram(spec, Z, X, lanes_m, lanes_n)
    kdiag = gram_diag(spec, X, lanes_n)

    Lm, used = stable_cholesky(Kmm, spec.variance, base_jitter=jitter)
    V = solve_triangular(Lm, P, lower=True)
    Bm = np.eye(m) + V @ V.T / s
    LB = cholesky(Bm, lower=True)
    c = solve_triangular(LB, V @ y, lower=True)

    yy = float(y @ y)
    cc = float(c @ c)
    VV = float(np.sum(V**2))
    logdet = n * math.log(s) + 2.0 * float(np.sum(np.log(np.diag(LB))))
    quad = (yy - cc / s) / s
    log_likelihood = -0.5 * n * math.log(2 * math.pi) - 0.5 * logdet - 0.5 * quad
    trace_term = -0.5 * max(float(np.sum(kdiag)) - VV, 0.0) / s
    value = log_likelihood + trace_term

    if not with_gradients:
        return ElboResult(value, log_likelihood, trace_term, {}, np.zeros_like(Z))

    eye = np.eye(m)
    Lm_inv = solve_triangular(Lm, eye, lower=True)
    Kmm_inv = Lm_inv.T @ Lm_inv
    Sigma_inv = Lm_inv.T @ cho_solve((LB, True), Lm_inv)
    w = solve_triangular(Lm, solve_triangular(LB, c, lower=True, trans="T"), lower=True, trans="T")
    U = solve_triangular(Lm, V, lower=True, trans="T")
    Sigma_inv_P = solve_triangular(Lm, cho_solve((LB, True), V), lower=True, trans="T")
    Pw = P.T @ w

    G_P = (U - Sigma_inv_P) / s + np.outer(w, y - Pw / s) / s**2
    G_mm = 0.5 * Kmm_inv - 0.5 * Sigma_inv - np.outer(w, w) / (2 * s**2) - U @ U.T / (2 * s)
    G_diag = -0.5 / s

    dF_ds = (
        float(np.sum(Sigma_inv_P * P)) / (2 * s**2)
        - n / (2 * s)
        + yy / (2 * s**2)
        - cc / s**3
        + float(Pw @ Pw) / (2 * s**4)
        + float(np.sum(kdiag)) / (2 * s**2)
        - VV / (2 * s**2)
    )

    dKmm = kernel_grad(spec, Z, lanes=lanes_m)
    dP = kernel_grad(spec, Z, X, lanes_m, lanes_n)
    gradients: Dict[str, float] = {}
    for name in dKmm:
        gradients[name] = float(np.sum(G_mm * dKmm[name]) + np.sum(G_P * dP[name]))
    # jitter·σ² on the K_mm diagonal scales with σ², the diagonal of K_nn as well
    gradients["log_variance"] += float(used * spec.variance * np.trace(G_mm))
    gradients["log_variance"] += G_diag * float(np.sum(kdiag))
    if spec.coregionalization is not None:
        A = spec.coregionalization.matrix
        for p in range(A.shape[0]):
            count = int(np.count_nonzero(lanes_n == p + 1))
            for q in range(A.shape[1]):
                gradients[f"A[{p},{q}]"] += G_diag * spec.variance * 2.0 * A[p, q] * count
    gradients["log_noise_variance"] = s * dF_ds

    D_mn = gram_input_grad(spec, Z, X, lanes_m, lanes_n)
    D_mm = gram_input_grad(spec, Z, Z, lanes_m, lanes_m)
    inducing_gradient = np.einsum("ij,ijd->id", G_P, D_mn) + 2.0 * np.einsum(
        "ik,ikd->id", G_mm, D_mm
    )
    ordered = {name: gradients[name] for name in parameter_names(spec)}
    return ElboResult(value, log_likelihood, trace_term, ordered, inducing_gradient)


def inducing_posterior(
    spec: KernelSpec,
    inducing: InducingSet,
    train: ObservationSet,
    jitter: float = DEFAULT_JITTER,
    mean_offset: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Optimal q(u): mean f̄_z and precision Λ = K_mm⁻¹ (K_mm + K_mn K_nm / σ_ε²) K_mm⁻¹.

    Returns:
        f̄_z, Λ and the K_mm jitter that was used.
    """
    lanes_m, lanes_n = _lanes_for(spec, inducing, train)
    m = len(inducing)
    s = spec.noise_variance
    Kmm = gram(spec, inducing.Z, lanes=lanes_m)
    P = gram(spec, inducing.Z, train.X, lanes_m, lanes_n)
    Lm, used = stable_cholesky(Kmm, spec.variance, base_jitter=jitter)
    V = solve_triangular(Lm, P, lower=True)
    Bm = np.eye(m) + V @ V.T / s
    LB = cholesky(Bm, lower=True)
    c = solve_triangular(LB, V @ (train.y - mean_offset), lower=True)

    mean_u = Lm @ solve_triangular(LB, c, lower=True, trans="T") / s
    Lm_inv = solve_triangular(Lm, np.eye(m), lower=True)
    precision = Lm_inv.T @ Bm @ Lm_inv
    return mean_u, 0.5 * (precision + precision.T), used


@dataclass(frozen=True)
class TrainingMetadata:
    """Provenance of a trained model."""

    optimizer: str
    iterations: int
    initial_elbo: float
    final_elbo: float
    seed: int
    termination: str
    data_digest: str
    num_data: int
    diagnostic: Optional[str] = None
    trace: Tuple[float, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        """JSON-ready representation."""
        return {
            "optimizer": self.optimizer,
            "iterations": self.iterations,
            "initial_elbo": self.initial_elbo,
            "final_elbo": self.final_elbo,
            "seed": self.seed,
            "termination": self.termination,
            "data_digest": self.data_digest,
            "num_data": self.num_data,
            "diagnostic": self.diagnostic,
            "trace": list(self.trace),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingMetadata":
        """Inverse of `to_dict`."""
        return cls(**{**data, "trace": tuple(data.get("trace", ()))})


class _Predictor(NamedTuple):
    Lm: np.ndarray
    LB: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True, eq=False)
class TrainedModel:
    """Fitted sparse GP: hyperparameters, inducing set and the optimal q(u)."""

    spec: KernelSpec
    inducing: InducingSet
    mean_u: np.ndarray
    precision: np.ndarray
    metadata: TrainingMetadata
    grid: Optional[SpatioTemporalGrid] = None
    mean_offset: float = 0.0
    physical_units: bool = False
    jitter: float = DEFAULT_JITTER
    covariance_cap: int = 4096
    chunk_size: int = 4096

    def __post_init__(self):
        mean_u = np.array(self.mean_u, dtype=float).reshape(-1)
        precision = np.array(self.precision, dtype=float)
        m = len(self.inducing)
        if mean_u.shape != (m,) or precision.shape != (m, m):
            raise ValueError(f"inducing posterior does not match {m} inducing points")
        for name, array in (("mean_u", mean_u), ("precision", precision)):
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    @cached_property
    def _predictor(self) -> _Predictor:
        lanes = self.inducing.lanes if self.spec.coregionalization is not None else None
        Kmm = gram(self.spec, self.inducing.Z, lanes=lanes)
        Lm, _ = stable_cholesky(Kmm, self.spec.variance, base_jitter=self.jitter, ladder=())
        LB = cholesky(Lm.T @ self.precision @ Lm, lower=True)
        beta = cho_solve((Lm, True), self.mean_u)
        return _Predictor(Lm, LB, beta)

    @property
    def is_multi_output(self) -> bool:
        """Whether the kernel carries a coregionalization."""
        return self.spec.coregionalization is not None

    def to_dict(self) -> dict:
        """JSON-ready representation; floats survive a dump/load unchanged."""
        return {
            "format": MODEL_FORMAT,
            "kernel": self.spec.model_dump(mode="json"),
            "inducing": {
                "Z": self.inducing.Z.tolist(),
                "lanes": None if self.inducing.lanes is None else self.inducing.lanes.tolist(),
            },
            "mean_u": self.mean_u.tolist(),
            "precision": self.precision.tolist(),
            "metadata": self.metadata.to_dict(),
            "grid": None if self.grid is None else self.grid.model_dump(),
            "mean_offset": self.mean_offset,
            "physical_units": self.physical_units,
            "jitter": self.jitter,
            "covariance_cap": self.covariance_cap,
            "chunk_size": self.chunk_size,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainedModel":
        """Inverse of `to_dict`."""
        if data.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {data.get('format')!r}")
        inducing = data["inducing"]
        return cls(
            spec=KernelSpec.model_validate(data["kernel"]),
            inducing=InducingSet(np.asarray(inducing["Z"], dtype=float), inducing["lanes"]),
            mean_u=np.asarray(data["mean_u"], dtype=float),
            precision=np.asarray(data["precision"], dtype=float),
            metadata=TrainingMetadata.from_dict(data["metadata"]),
            grid=None if data["grid"] is None else SpatioTemporalGrid.model_validate(data["grid"]),
            mean_offset=data["mean_offset"],
            physical_units=data["physical_units"],
            jitter=data["jitter"],
            covariance_cap=data["covariance_cap"],
            chunk_size=data["chunk_size"],
        )

    def save(self, path: Union[str, Path]) -> Path:
        """Write the model as JSON."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainedModel":
        """Read a model written by `save`."""
        return cls.from_dict(json.loads(Path(path).read_text()))


class _Objective:
    """ELBO as a function of the flat parameter vector [kernel parameters, Z]."""

    def __init__(
        self,
        template: KernelSpec,
        inducing: InducingSet,
        train: ObservationSet,
        options: VsgpOptions,
        mean_offset: float,
    ):
        self.template = template
        self.inducing = inducing
        self.train = train
        self.options = options
        self.mean_offset = mean_offset
        self.names = parameter_names(template)
        self.num_kernel = len(self.names)

        mask = np.ones(self.num_kernel, dtype=bool)
        if not options.optimize_angle:
            mask[self.names.index("angle")] = False
        z_mask = np.full(inducing.Z.size, options.optimize_inducing)
        self.mask = np.concatenate([mask, z_mask])
        self.steps = np.concatenate(
            [
                np.full(self.num_kernel, options.initial_step),
                np.full(inducing.Z.size, options.inducing_step),
            ]
        )

    def pack(self, spec: KernelSpec, inducing: InducingSet) -> np.ndarray:
        return np.concatenate([to_vector(spec), inducing.Z.ravel()])

    def unpack(self, theta: np.ndarray) -> Tuple[KernelSpec, InducingSet]:
        spec = from_vector(self.template, theta[: self.num_kernel])
        return spec, self.inducing.moved(theta[self.num_kernel :].reshape(-1, 2))

    def __call__(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        spec, inducing = self.unpack(theta)
        result = elbo(
            spec, inducing, self.train, self.options.jitter, self.mean_offset, warn_sizes=False
        )
        kernel = np.array([result.gradients[name] for name in self.names])
        grad = np.concatenate([kernel, result.inducing_gradient.ravel()])
        return result.value, np.where(self.mask, grad, 0.0)


class _Outcome(NamedTuple):
    theta: np.ndarray
    value: float
    iterations: int
    termination: str
    diagnostic: Optional[str]
    trace: Tuple[float, ...]


def _adaptive_ascent(objective: _Objective, theta: np.ndarray, options: VsgpOptions) -> _Outcome:
    """Sign-based gradient ascent with per-parameter steps and step rejection."""
    value, grad = objective(theta)
    steps = objective.steps.copy()
    previous = np.zeros_like(theta)
    trace: List[float] = [value]
    termination, diagnostic = "max_iterations", None

    iteration = 0
    while iteration < options.max_iterations:
        iteration += 1
        direction = np.sign(grad)
        agreement = direction * previous
        steps = np.where(agreement > 0, np.minimum(steps * 1.2, options.max_step), steps)
        steps = np.where(agreement < 0, np.maximum(steps * 0.5, options.min_step), steps)
        proposal = theta + steps * direction

        try:
            candidate, candidate_grad = objective(proposal)
        except ConditioningError as e:
            logger.debug(f"iteration {iteration}: rejected step, {e}")
            candidate, candidate_grad = None, None
        except (ValueError, OverflowError) as e:
            # overflowing parameters or NaNs reaching the factorisation
            candidate, candidate_grad = math.nan, None
            logger.debug(f"iteration {iteration}: {e}")

        if candidate is not None and not math.isfinite(candidate):
            termination = "aborted"
            diagnostic = f"non-finite ELBO ({candidate}) at iteration {iteration}"
            logger.warning(f"Optimizer aborted: {diagnostic}; keeping the last good parameters")
            break

        if candidate is None or candidate < value:
            steps = np.maximum(steps * 0.5, options.min_step)
            previous = np.zeros_like(theta)
            logger.debug(f"iteration {iteration}: rejected step, ELBO {value:.6f}")
        else:
            theta, value, grad = proposal, candidate, candidate_grad
            previous = direction
            logger.debug(f"iteration {iteration}: ELBO {value:.6f}")
        trace.append(value)

        if len(trace) > options.patience:
            gain = value - trace[-1 - options.patience]
            if gain <= options.tolerance * abs(value):
                termination = "converged"
                break
        if np.all(steps[objective.mask] <= options.min_step):
            termination = "stalled"
            break

    return _Outcome(theta, value, iteration, termination, diagnostic, tuple(trace))


def _lbfgs(objective: _Objective, theta: np.ndarray, options: VsgpOptions) -> _Outcome:
    """L-BFGS-B on −ELBO, returning the best point evaluated."""
    best = {"theta": theta, "value": -math.inf}
    trace: List[float] = []

    def negative(x: np.ndarray) -> Tuple[float, np.ndarray]:
        try:
            value, grad = objective(x)
        except (ConditioningError, ValueError, OverflowError):
            return math.inf, np.zeros_like(x)
        if not math.isfinite(value):
            return math.inf, np.zeros_like(x)
        if value > best["value"]:
            best["theta"], best["value"] = x.copy(), value
        return -value, -grad

    initial, _ = negative(theta)
    trace.append(-initial)
    result = minimize(
        negative,
        theta,
        jac=True,
        method="L-BFGS-B",
        callback=lambda x: trace.append(best["value"]),
        options={"maxiter": max(options.max_iterations, 1), "ftol": options.tolerance},
    )
    termination = "converged" if result.success else "stopped"
    return _Outcome(
        best["theta"],
        best["value"],
        int(result.nit),
        termination,
        str(result.message),
        tuple(trace),
    )


def _check_sizes(m: int, n: int):
    if m > n:
        logger.warning(f"{m} inducing points for only {n} observations")


def fit(
    train: ObservationSet,
    grid: SpatioTemporalGrid,
    options: Optional[VsgpOptions] = None,
    init: Optional[KernelInit] = None,
    seed: int = 0,
    inducing: Optional[InducingSet] = None,
    coregionalization: Optional[CoregionalizationSpec] = None,
    physical_units: bool = False,
) -> TrainedModel:
    """Fit hyperparameters and inducing locations by maximising the ELBO.

    Args:
        train: training observations.
        grid: grid the observations live on; sets defaults and the extrapolation check.
        options: optimizer settings.
        init: starting kernel; unset values come from the data.
        seed: seeds the random inducing locations.
        inducing: explicit starting inducing set, overriding the random one.
        coregionalization: starting A for a multi-output kernel.
        physical_units: whether coordinates are metres and seconds.

    Returns:
        the trained model; its ELBO is never below the initial one.

    Raises:
        EmptyObservationsError: if `train` is empty.
        ConditioningError: if the initial K_mm cannot be factorised.
    """
    options = options or VsgpOptions()
    if len(train) == 0:
        raise EmptyObservationsError("cannot fit a model without observations")
    mean_offset = float(np.mean(train.y)) if options.constant_mean else 0.0
    spec = (init or KernelInit()).resolve(grid, train.y, physical_units)
    if coregionalization is not None:
        spec = spec.replace(coregionalization=coregionalization)
    if inducing is None:
        inducing = init_inducing(grid, len(train), seed, physical_units)
    _check_sizes(len(inducing), len(train))

    objective = _Objective(spec, inducing, train, options, mean_offset)
    theta0 = objective.pack(spec, inducing)
    logger.info(
        f"Fitting sparse GP: n={len(train)}, m={len(inducing)}, "
        f"family={spec.family.value}, optimizer={options.optimizer}"
    )
    if options.optimizer == "lbfgs":
        outcome = _lbfgs(objective, theta0, options)
    else:
        outcome = _adaptive_ascent(objective, theta0, options)
    spec, inducing = objective.unpack(outcome.theta)
    logger.info(
        f"Optimizer finished ({outcome.termination}) after {outcome.iterations} iterations, "
        f"ELBO {outcome.trace[0]:.4f} -> {outcome.value:.4f}"
    )

    mean_u, precision, used = inducing_posterior(
        spec, inducing, train, options.jitter, mean_offset
    )
    metadata = TrainingMetadata(
        optimizer=options.optimizer,
        iterations=outcome.iterations,
        initial_elbo=outcome.trace[0],
        final_elbo=outcome.value,
        seed=seed,
        termination=outcome.termination,
        data_digest=train.digest(),
        num_data=len(train),
        diagnostic=outcome.diagnostic,
        trace=outcome.trace,
    )
    return TrainedModel(
        spec=spec,
        inducing=inducing,
        mean_u=mean_u,
        precision=precision,
        metadata=metadata,
        grid=grid,
        mean_offset=mean_offset,
        physical_units=physical_units,
        jitter=used,
        covariance_cap=options.covariance_cap,
        chunk_size=options.chunk_size,
    )


def fit_pretrained(
    train: ObservationSet,
    pretrained: KernelSpec,
    seed: int = 0,
    grid: Optional[SpatioTemporalGrid] = None,
    options: Optional[VsgpOptions] = None,
    inducing: Optional[InducingSet] = None,
    physical_units: bool = False,
) -> TrainedModel:
    """Condition a model with fixed hyperparameters; only q(u) is computed.

    Inducing points are random over `grid` unless `inducing` is given.
    """
    options = options or VsgpOptions()
    if len(train) == 0:
        raise EmptyObservationsError("cannot condition a model without observations")
    if inducing is None:
        if grid is None:
            raise ValueError("fit_pretrained needs a grid or an explicit inducing set")
        inducing = init_inducing(grid, len(train), seed, physical_units)
    _check_sizes(len(inducing), len(train))

    mean_offset = float(np.mean(train.y)) if options.constant_mean else 0.0
    mean_u, precision, used = inducing_posterior(
        pretrained, inducing, train, options.jitter, mean_offset
    )
    bound = elbo(
        pretrained, inducing, train, used, mean_offset, with_gradients=False, warn_sizes=False
    ).value
    metadata = TrainingMetadata(
        optimizer="none",
        iterations=0,
        initial_elbo=bound,
        final_elbo=bound,
        seed=seed,
        termination="pretrained",
        data_digest=train.digest(),
        num_data=len(train),
        trace=(bound,),
    )
    return TrainedModel(
        spec=pretrained,
        inducing=inducing,
        mean_u=mean_u,
        precision=precision,
        metadata=metadata,
        grid=grid,
        mean_offset=mean_offset,
        physical_units=physical_units,
        jitter=used,
        covariance_cap=options.covariance_cap,
        chunk_size=options.chunk_size,
    )


def _warn_extrapolation(model: TrainedModel, X: np.ndarray):
    if model.grid is None:
        return
    (s_low, s_high), (t_low, t_high) = model.grid.bounds(model.physical_units)
    outside = (X[:, 0] < s_low) | (X[:, 0] > s_high) | (X[:, 1] < t_low) | (X[:, 1] > t_high)
    if np.any(outside):
        logger.warning(f"Extrapolating: {np.count_nonzero(outside)} queries lie outside the grid")


def predict(
    model: TrainedModel,
    X_star: np.ndarray,
    lanes: Optional[np.ndarray] = None,
    include_noise: bool = False,
    full_cov: Optional[bool] = None,
) -> Posterior:
    """Sparse predictive distribution at `X_star`.

    The full covariance is returned when the batch fits under the model's cap (or
    `full_cov` is True and it fits); otherwise only the diagonal, computed in chunks.
    """
    X_star = np.asarray(X_star, dtype=float).reshape(-1, 2)
    q = len(X_star)
    full = q <= model.covariance_cap and (full_cov is None or full_cov)
    if q == 0:
        return Posterior.empty(full)
    _warn_extrapolation(model, X_star)
    spec = model.spec
    lanes_m = model.inducing.lanes if model.is_multi_output else None
    if model.is_multi_output:
        lanes = np.asarray(lanes, dtype=int).reshape(-1) if lanes is not None else None
    else:
        lanes = None
    Lm, LB, beta = model._predictor

    if full:
        Kms = gram(spec, model.inducing.Z, X_star, lanes_m, lanes)
        W = solve_triangular(Lm, Kms, lower=True)
        C = solve_triangular(LB, W, lower=True)
        covariance = gram(spec, X_star, lanes=lanes) - W.T @ W + C.T @ C
        if include_noise:
            covariance[np.diag_indices_from(covariance)] += spec.noise_variance
        mean = Kms.T @ beta + model.mean_offset
        return Posterior(mean, np.diag(covariance).copy(), covariance)

    means, variances = [], []
    for start in range(0, q, model.chunk_size):
        rows = slice(start, start + model.chunk_size)
        chunk_lanes = None if lanes is None else lanes[rows]
        Kms = gram(spec, model.inducing.Z, X_star[rows], lanes_m, chunk_lanes)
        W = solve_triangular(Lm, Kms, lower=True)
        C = solve_triangular(LB, W, lower=True)
        means.append(Kms.T @ beta + model.mean_offset)
        prior = gram_diag(spec, X_star[rows], chunk_lanes)
        variances.append(prior - np.sum(W**2, axis=0) + np.sum(C**2, axis=0))
    variance = np.concatenate(variances)
    if include_noise:
        variance = variance + spec.noise_variance
    return Posterior(np.concatenate(means), variance, None)
