"""Kernel algebra for spatiotemporal speed fields.

Distances are measured in a frame rotated by the angle α so that one lengthscale can
follow the direction in which traffic waves travel through the (space, time) plane:

    r² = (R δ)ᵀ M (R δ),   R = [[cos α, −sin α], [sin α, cos α]],   M = diag(ℓs⁻², ℓt⁻²)

With α = 0 this is the usual ARD distance. Every family is a function of r² alone,
so the hyperparameter gradients share the chain rule through `_profile`.
"""

import logging
import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-6

SQRT3 = math.sqrt(3.0)
SQRT5 = math.sqrt(5.0)


class KernelError(Exception):
    """Base class for errors raised by kernel evaluation."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self):
        """Human-readable description of the error."""
        return self.message


class LaneIndexError(KernelError):
    """Raised when a lane index is outside 1..L of a coregionalization."""


class KernelFamily(str, Enum):
    """Stationary kernel families available on the rotated distance."""

    SE = "SE"
    MATERN32 = "Matern32"
    MATERN52 = "Matern52"
    RQ = "RQ"


class CoregionalizationSpec(BaseModel):
    """Intrinsic coregionalization B = A·Aᵀ, with A (L×r) stored row-major."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rank: int = Field(ge=1)
    A: List[float]

    @model_validator(mode="after")
    def _check_shape(self):
        if not self.A or len(self.A) % self.rank:
            raise ValueError(f"A has {len(self.A)} entries, not a multiple of rank {self.rank}")
        if self.rank > len(self.A) // self.rank:
            raise ValueError(f"rank {self.rank} exceeds the number of outputs")
        if not all(math.isfinite(a) for a in self.A):
            raise ValueError("A entries must be finite")
        return self

    @classmethod
    def from_matrix(cls, A: np.ndarray) -> "CoregionalizationSpec":
        """Build a spec from an L×r matrix."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return cls(rank=A.shape[1], A=[float(a) for a in A.ravel()])

    @classmethod
    def identity_padded(
        cls, num_outputs: int, rank: Optional[int] = None
    ) -> "CoregionalizationSpec":
        """A[i, i mod r] = 1, everything else 0; rank defaults to the number of outputs."""
        rank = num_outputs if rank is None else rank
        A = np.zeros((num_outputs, rank))
        A[np.arange(num_outputs), np.arange(num_outputs) % rank] = 1.0
        return cls.from_matrix(A)

    @property
    def num_outputs(self) -> int:
        """Number of outputs (lanes) L."""
        return len(self.A) // self.rank

    @property
    def matrix(self) -> np.ndarray:
        """A as an L×r array."""
        return np.asarray(self.A, dtype=float).reshape(self.num_outputs, self.rank)

    @property
    def B(self) -> np.ndarray:
        """The L×L coregionalization matrix A·Aᵀ."""
        A = self.matrix
        return A @ A.T


class KernelSpec(BaseModel):
    """Kernel family and hyperparameters, plus an optional coregionalization."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    family: KernelFamily = KernelFamily.MATERN52
    variance: float = Field(gt=0)
    lengthscale_s: float = Field(gt=0)
    lengthscale_t: float = Field(gt=0)
    angle: float = 0.0
    noise_variance: float = Field(gt=0)
    shape: float = Field(default=1.0, gt=0, description="RQ shape parameter")
    coregionalization: Optional[CoregionalizationSpec] = None

    @field_validator("angle")
    @classmethod
    def _angle_in_range(cls, angle: float) -> float:
        if not (-math.pi / 2 < angle <= math.pi / 2):
            raise ValueError(f"angle {angle} is outside (-pi/2, pi/2]")
        return angle

    def replace(self, **update) -> "KernelSpec":
        """Return a validated copy with some fields replaced."""
        return KernelSpec.model_validate({**self.model_dump(), **update})

    @property
    def num_outputs(self) -> int:
        """Number of outputs; 1 without coregionalization."""
        return 1 if self.coregionalization is None else self.coregionalization.num_outputs


def wrap_angle(angle: float) -> float:
    """Map an angle onto (−π/2, π/2]; the rotated distance has period π."""
    wrapped = math.remainder(float(angle), math.pi)
    if wrapped <= -math.pi / 2:
        wrapped += math.pi
    return wrapped


def rotation_matrix(angle: float) -> np.ndarray:
    """Return [[cos α, −sin α], [sin α, cos α]]."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def ard_sq_dist(x: np.ndarray, x2: np.ndarray, lengthscale_s: float, lengthscale_t: float):
    """(Δs/ℓs)² + (Δt/ℓt)², broadcasting over leading axes."""
    delta = np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)
    return (delta[..., 0] / lengthscale_s) ** 2 + (delta[..., 1] / lengthscale_t) ** 2


def _rotate(
    delta_s: np.ndarray, delta_t: np.ndarray, angle: float
) -> Tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(angle), math.sin(angle)
    return c * delta_s - s * delta_t, s * delta_s + c * delta_t


def rotated_sq_dist(
    x: np.ndarray, x2: np.ndarray, lengthscale_s: float, lengthscale_t: float, angle: float
):
    """(Rδ)ᵀ M (Rδ) with δ = x − x2, broadcasting over leading axes."""
    delta = np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)
    u1, u2 = _rotate(delta[..., 0], delta[..., 1], angle)
    return (u1 / lengthscale_s) ** 2 + (u2 / lengthscale_t) ** 2


def _pairwise(spec: KernelSpec, X: np.ndarray, X2: np.ndarray):
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    X2 = np.asarray(X2, dtype=float).reshape(-1, 2)
    u1, u2 = _rotate(
        X[:, 0:1] - X2[:, 0][None, :], X[:, 1:2] - X2[:, 1][None, :], spec.angle
    )
    r2 = (u1 / spec.lengthscale_s) ** 2 + (u2 / spec.lengthscale_t) ** 2
    return r2, u1, u2


def _profile(family: KernelFamily, r2: np.ndarray, shape: float) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-variance kernel value f(r²) and its derivative df/d(r²)."""
    if family is KernelFamily.SE:
        f = np.exp(-0.5 * r2)
        return f, -0.5 * f
    if family is KernelFamily.MATERN32:
        r = np.sqrt(r2)
        e = np.exp(-SQRT3 * r)
        return (1.0 + SQRT3 * r) * e, -1.5 * e
    if family is KernelFamily.MATERN52:
        r = np.sqrt(r2)
        e = np.exp(-SQRT5 * r)
        return (1.0 + SQRT5 * r + 5.0 * r2 / 3.0) * e, -(5.0 / 6.0) * (1.0 + SQRT5 * r) * e
    if family is KernelFamily.RQ:
        base = 1.0 + 0.5 * r2 / shape
        return base**-shape, -0.5 * base ** (-shape - 1.0)
    raise KernelError(f"unknown kernel family {family}")


def _rq_log_shape_grad(r2: np.ndarray, shape: float) -> np.ndarray:
    """d f / d log a for the unit-variance RQ profile."""
    z = 0.5 * r2 / shape
    f = (1.0 + z) ** -shape
    return shape * f * (-np.log1p(z) + z / (1.0 + z))


def _check_lanes(spec: KernelSpec, lanes: Optional[np.ndarray], n: int) -> Optional[np.ndarray]:
    if spec.coregionalization is None:
        return None
    if lanes is None:
        raise KernelError("a coregionalized kernel needs lane indices for every input")
    lanes = np.asarray(lanes, dtype=int).reshape(-1)
    if len(lanes) != n:
        raise KernelError(f"got {len(lanes)} lane indices for {n} inputs")
    L = spec.coregionalization.num_outputs
    if lanes.size and (lanes.min() < 1 or lanes.max() > L):
        raise LaneIndexError(f"lane indices must lie in 1..{L}, got {lanes.min()}..{lanes.max()}")
    return lanes - 1


def _lane_pairs(spec, X, X2, lanes, lanes2):
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    if X2 is None:
        X2, lanes2 = X, lanes
    X2 = np.asarray(X2, dtype=float).reshape(-1, 2)
    return X, X2, _check_lanes(spec, lanes, len(X)), _check_lanes(spec, lanes2, len(X2))


def gram(
    spec: KernelSpec,
    X: np.ndarray,
    X2: Optional[np.ndarray] = None,
    lanes: Optional[np.ndarray] = None,
    lanes2: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Covariance matrix K[i, j] = k((X[i], lanes[i]), (X2[j], lanes2[j])).

    `X2` defaults to `X` (and `lanes2` to `lanes`). Lane indices are 1-based and only
    used when `spec` carries a coregionalization.
    """
    X, X2, li, lj = _lane_pairs(spec, X, X2, lanes, lanes2)
    r2, _, _ = _pairwise(spec, X, X2)
    f, _ = _profile(spec.family, r2, spec.shape)
    K = spec.variance * f
    if li is not None:
        K = K * spec.coregionalization.B[np.ix_(li, lj)]
    return K


def gram_diag(spec: KernelSpec, X: np.ndarray, lanes: Optional[np.ndarray] = None) -> np.ndarray:
    """Diagonal of gram(spec, X) without building the matrix."""
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    li = _check_lanes(spec, lanes, len(X))
    diag = np.full(len(X), spec.variance)
    if li is not None:
        diag = diag * np.diag(spec.coregionalization.B)[li]
    return diag


def kernel_eval(spec: KernelSpec, x: np.ndarray, x2: np.ndarray) -> float:
    """Covariance of two single inputs under the base (single-output) kernel."""
    r2 = rotated_sq_dist(x, x2, spec.lengthscale_s, spec.lengthscale_t, spec.angle)
    f, _ = _profile(spec.family, np.asarray(r2), spec.shape)
    return float(spec.variance * f)


def icm_eval(
    spec: KernelSpec,
    coregionalization: CoregionalizationSpec,
    first: Tuple[np.ndarray, int],
    second: Tuple[np.ndarray, int],
) -> float:
    """k(x, x′)·B[i, j] for inputs carrying 1-based lane indices.

    Raises:
        LaneIndexError: if either lane is outside 1..L.
    """
    (x, i), (x2, j) = first, second
    L = coregionalization.num_outputs
    for lane in (i, j):
        if not 1 <= lane <= L:
            raise LaneIndexError(f"lane index {lane} is outside 1..{L}")
    return kernel_eval(spec, x, x2) * float(coregionalization.B[i - 1, j - 1])


def parameter_names(spec: KernelSpec) -> List[str]:
    """Names of the free kernel and likelihood parameters, in vector order."""
    names = ["log_variance", "log_lengthscale_s", "log_lengthscale_t", "angle"]
    if spec.family is KernelFamily.RQ:
        names.append("log_shape")
    names.append("log_noise_variance")
    if spec.coregionalization is not None:
        L, r = spec.coregionalization.num_outputs, spec.coregionalization.rank
        names.extend(f"A[{p},{q}]" for p in range(L) for q in range(r))
    return names


def to_vector(spec: KernelSpec) -> np.ndarray:
    """Unconstrained parameter vector, ordered as `parameter_names`."""
    values = [
        math.log(spec.variance),
        math.log(spec.lengthscale_s),
        math.log(spec.lengthscale_t),
        spec.angle,
    ]
    if spec.family is KernelFamily.RQ:
        values.append(math.log(spec.shape))
    values.append(math.log(spec.noise_variance))
    if spec.coregionalization is not None:
        values.extend(spec.coregionalization.A)
    return np.asarray(values, dtype=float)


def from_vector(template: KernelSpec, vector: np.ndarray) -> KernelSpec:
    """Inverse of `to_vector`; the angle is wrapped into (−π/2, π/2]."""
    vector = np.asarray(vector, dtype=float)
    update = {
        "variance": math.exp(vector[0]),
        "lengthscale_s": math.exp(vector[1]),
        "lengthscale_t": math.exp(vector[2]),
        "angle": wrap_angle(vector[3]),
    }
    k = 4
    if template.family is KernelFamily.RQ:
        update["shape"] = math.exp(vector[k])
        k += 1
    update["noise_variance"] = math.exp(vector[k])
    k += 1
    if template.coregionalization is not None:
        update["coregionalization"] = CoregionalizationSpec(
            rank=template.coregionalization.rank, A=[float(a) for a in vector[k:]]
        )
    return template.replace(**update)


def kernel_grad(
    spec: KernelSpec,
    X: np.ndarray,
    X2: Optional[np.ndarray] = None,
    lanes: Optional[np.ndarray] = None,
    lanes2: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """Derivatives of gram(spec, X, X2) with respect to the unconstrained kernel parameters.

    Returns:
        a mapping from parameter name (see `parameter_names`, noise excluded) to an
        n×n′ matrix.
    """
    X, X2, li, lj = _lane_pairs(spec, X, X2, lanes, lanes2)
    r2, u1, u2 = _pairwise(spec, X, X2)
    f, df = _profile(spec.family, r2, spec.shape)
    ls2, lt2 = spec.lengthscale_s**2, spec.lengthscale_t**2

    scale = np.ones_like(r2) if li is None else spec.coregionalization.B[np.ix_(li, lj)]
    base = spec.variance * f
    chain = spec.variance * df * scale
    grads = {
        "log_variance": base * scale,
        "log_lengthscale_s": chain * (-2.0 * u1**2 / ls2),
        "log_lengthscale_t": chain * (-2.0 * u2**2 / lt2),
        "angle": chain * (2.0 * u1 * u2 * (1.0 / lt2 - 1.0 / ls2)),
    }
    if spec.family is KernelFamily.RQ:
        grads["log_shape"] = spec.variance * _rq_log_shape_grad(r2, spec.shape) * scale
    if li is not None:
        A = spec.coregionalization.matrix
        L, r = A.shape
        for p in range(L):
            rows, cols = (li == p)[:, None], (lj == p)[None, :]
            for q in range(r):
                dB = rows * A[lj, q][None, :] + A[li, q][:, None] * cols
                grads[f"A[{p},{q}]"] = base * dB
    return grads


def gram_input_grad(
    spec: KernelSpec,
    X: np.ndarray,
    X2: np.ndarray,
    lanes: Optional[np.ndarray] = None,
    lanes2: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Derivative of gram(spec, X, X2)[i, j] with respect to X[i, d], shape n×n′×2."""
    X, X2, li, lj = _lane_pairs(spec, X, X2, lanes, lanes2)
    _, u1, u2 = _pairwise(spec, X, X2)
    r2 = (u1 / spec.lengthscale_s) ** 2 + (u2 / spec.lengthscale_t) ** 2
    _, df = _profile(spec.family, r2, spec.shape)
    c, s = math.cos(spec.angle), math.sin(spec.angle)
    a1, a2 = u1 / spec.lengthscale_s**2, u2 / spec.lengthscale_t**2

    chain = spec.variance * df
    if li is not None:
        chain = chain * spec.coregionalization.B[np.ix_(li, lj)]
    return np.stack(
        [chain * 2.0 * (c * a1 + s * a2), chain * 2.0 * (-s * a1 + c * a2)], axis=-1
    )
