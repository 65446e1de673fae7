"""Exact Gaussian-process regression.

Serves small problems and is the reference the sparse solver is checked against. The
prior mean is zero unless `constant_mean` is requested, in which case the training
mean is subtracted before conditioning and added back to the predictive mean.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from grid import EmptyObservationsError, ObservationSet
from kernels import KernelSpec, gram, gram_diag

logger = logging.getLogger(__name__)

JITTER_LADDER: Tuple[float, ...] = (1e-6, 1e-5, 1e-4)


class ConditioningError(Exception):
    """Raised when a covariance matrix cannot be factorised even with the largest jitter."""

    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.message = message
        self.jitter = jitter

    def __str__(self):
        """Human-readable description of the error."""
        return self.message


def stable_cholesky(
    K: np.ndarray,
    scale: float,
    base_jitter: float = 0.0,
    ladder: Sequence[float] = JITTER_LADDER,
) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor of K + jitter·scale·I.

    `base_jitter` is tried first, then every larger entry of `ladder`.

    Returns:
        the factor and the jitter (relative to `scale`) that was needed.

    Raises:
        ConditioningError: if every jitter on the ladder fails.
    """
    eye = np.eye(len(K))
    attempts = [base_jitter] + [jitter for jitter in ladder if jitter > base_jitter]
    for jitter in attempts:
        try:
            factor = cholesky(K + jitter * scale * eye, lower=True)
        except (LinAlgError, ValueError):
            continue
        if jitter > base_jitter:
            logger.warning(
                f"Cholesky needed jitter {jitter:g}·{scale:g} (asked for {base_jitter:g})"
            )
        return factor, jitter
    raise ConditioningError(
        f"matrix of size {len(K)} is not positive definite even with jitter "
        f"{attempts[-1]:g}·{scale:g}",
        jitter=attempts[-1],
    )


@dataclass(frozen=True)
class Posterior:
    """Predictive distribution at a batch of queries.

    `covariance` is None when only the diagonal was computed.
    """

    mean: np.ndarray
    variance: np.ndarray
    covariance: Optional[np.ndarray] = None

    def __post_init__(self):
        variance = np.maximum(np.asarray(self.variance, dtype=float), 0.0)
        object.__setattr__(self, "variance", variance)
        if self.covariance is not None:
            covariance = np.array(self.covariance, dtype=float)
            covariance = 0.5 * (covariance + covariance.T)
            np.fill_diagonal(covariance, variance)
            object.__setattr__(self, "covariance", covariance)

    @classmethod
    def empty(cls, full_cov: bool = True) -> "Posterior":
        """Posterior over zero queries."""
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, 0)) if full_cov else None)


class ExactGP:
    """A GP conditioned on a training set; the factorisation is shared by every query."""

    def __init__(self, spec: KernelSpec, train: ObservationSet, constant_mean: bool = False):
        if len(train) == 0:
            raise EmptyObservationsError("exact GP needs at least one training observation")
        self.spec = spec
        self.train = train
        self.mean_offset = float(np.mean(train.y)) if constant_mean else 0.0
        self._lanes = train.lane if spec.coregionalization is not None else None

        K = gram(spec, train.X, lanes=self._lanes)
        K[np.diag_indices_from(K)] += spec.noise_variance
        self._chol, self.jitter = stable_cholesky(K, spec.variance)
        self._residual = train.y - self.mean_offset
        self._alpha = cho_solve((self._chol, True), self._residual)

    def log_marginal_likelihood(self) -> float:
        """log N(y | m, K + σ_ε² I) in nats."""
        n = len(self._residual)
        return float(
            -0.5 * self._residual @ self._alpha
            - np.sum(np.log(np.diag(self._chol)))
            - 0.5 * n * np.log(2 * np.pi)
        )

    def posterior(
        self,
        X_star: np.ndarray,
        lanes: Optional[np.ndarray] = None,
        include_noise: bool = False,
        full_cov: bool = True,
    ) -> Posterior:
        """Predictive mean and (co)variance of f, or of y with `include_noise`."""
        X_star = np.asarray(X_star, dtype=float).reshape(-1, 2)
        if len(X_star) == 0:
            return Posterior.empty(full_cov)
        lanes = lanes if self.spec.coregionalization is not None else None

        K_cross = gram(self.spec, self.train.X, X_star, self._lanes, lanes)
        mean = K_cross.T @ self._alpha + self.mean_offset
        W = solve_triangular(self._chol, K_cross, lower=True)
        variance = gram_diag(self.spec, X_star, lanes) - np.sum(W**2, axis=0)
        if include_noise:
            variance = variance + self.spec.noise_variance

        covariance = None
        if full_cov:
            covariance = gram(self.spec, X_star, lanes=lanes) - W.T @ W
            if include_noise:
                covariance[np.diag_indices_from(covariance)] += self.spec.noise_variance
        return Posterior(mean, variance, covariance)


def posterior(
    spec: KernelSpec,
    train: ObservationSet,
    X_star: np.ndarray,
    lanes: Optional[np.ndarray] = None,
    include_noise: bool = False,
    full_cov: bool = True,
    constant_mean: bool = False,
) -> Posterior:
    """Exact GP posterior at `X_star` given `train`.

    Raises:
        EmptyObservationsError: if `train` is empty.
        ConditioningError: if K + σ_ε² I cannot be factorised.
    """
    return ExactGP(spec, train, constant_mean).posterior(X_star, lanes, include_noise, full_cov)


def log_marginal_likelihood(
    spec: KernelSpec, train: ObservationSet, constant_mean: bool = False
) -> float:
    """Exact log marginal likelihood of `train` under `spec`."""
    return ExactGP(spec, train, constant_mean).log_marginal_likelihood()
