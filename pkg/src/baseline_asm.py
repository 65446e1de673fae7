"""Adaptive smoothing baseline.

Two anisotropic exponential smoothers run over the observations, one along the
characteristics of congested traffic (waves moving upstream at c_cong) and one along
free-flow characteristics (c_free). Per cell the two estimates are blended by a tanh
switch on the lower of the two speeds.
"""

import logging
import math
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from grid import EmptyObservationsError, ObservationSet, SpatioTemporalGrid, SpeedField

logger = logging.getLogger(__name__)

KMH = 3.6
MAX_BLOCK = 2_000_000


class AsmParams(BaseModel):
    """Smoother parameters; speeds in km/h, widths in metres and seconds.

    `sigma_space` and `tau_time` default to 0.6·ds·10 and 1.1·dt of the grid.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    c_cong: float = Field(default=-15.0, lt=0)
    c_free: float = Field(default=70.0, gt=0)
    sigma_space: Optional[float] = Field(default=None, gt=0)
    tau_time: Optional[float] = Field(default=None, gt=0)
    v_crit: float = Field(default=54.0, gt=0)
    delta_v: float = Field(default=18.0, gt=0)
    min_weight: float = Field(default=1e-20, ge=0)

    @model_validator(mode="after")
    def _ordered_wave_speeds(self):
        if not self.c_cong < 0 < self.c_free:
            raise ValueError("wave speeds must satisfy c_cong < 0 < c_free")
        return self

    def resolve(self, grid: SpatioTemporalGrid) -> "AsmParams":
        """Fill in the grid-dependent smoothing widths."""
        return self.model_copy(
            update={
                "sigma_space": self.sigma_space or 0.6 * grid.ds * 10,
                "tau_time": self.tau_time or 1.1 * grid.dt,
            }
        )


def _smooth(
    s_query: np.ndarray,
    t_query: np.ndarray,
    s_obs: np.ndarray,
    t_obs: np.ndarray,
    v_obs: np.ndarray,
    wave_speed: float,
    params: AsmParams,
) -> Tuple[np.ndarray, np.ndarray]:
    """Normalised smoother along characteristics of `wave_speed` (m/s).

    Returns:
        the smoothed speeds and the log of the largest weight per query.
    """
    ds = s_query[:, None] - s_obs[None, :]
    dt = t_query[:, None] - t_obs[None, :]
    log_w = -np.abs(ds) / params.sigma_space - np.abs(dt - ds / wave_speed) / params.tau_time
    peak = log_w.max(axis=1)
    weights = np.exp(log_w - peak[:, None])
    return weights @ v_obs / weights.sum(axis=1), peak


def asm_estimate(
    observations: ObservationSet,
    grid: SpatioTemporalGrid,
    params: Optional[AsmParams] = None,
    physical_units: bool = False,
) -> SpeedField:
    """Estimate every cell of `grid` from `observations`.

    Lanes are smoothed independently. Cells whose largest weight falls below
    `min_weight`, and lanes without observations, get the global mean speed.

    Raises:
        EmptyObservationsError: if there are no observations.
    """
    if len(observations) == 0:
        raise EmptyObservationsError("the smoother needs at least one observation")
    params = (params or AsmParams()).resolve(grid)
    scale = np.ones(2) if physical_units else np.array([grid.ds, grid.dt])
    positions = observations.X * scale
    fallback = float(np.mean(observations.y))
    log_floor = math.log(params.min_weight) if params.min_weight > 0 else -math.inf

    centers = grid.cell_centers(physical_units=True)
    block = max(1, MAX_BLOCK // max(1, len(observations)))
    values = np.full(grid.shape, fallback)
    for lane in range(1, grid.L + 1):
        mask = observations.lane == lane
        if not np.any(mask):
            logger.warning(f"Lane {lane} has no observations; filling it with the global mean")
            continue
        s_obs, t_obs = positions[mask, 0], positions[mask, 1]
        v_obs = observations.y[mask]

        estimate = np.empty(len(centers))
        weak = 0
        for start in range(0, len(centers), block):
            rows = slice(start, start + block)
            s_q, t_q = centers[rows, 0], centers[rows, 1]
            v_cong, peak_cong = _smooth(s_q, t_q, s_obs, t_obs, v_obs, params.c_cong / KMH, params)
            v_free, peak_free = _smooth(s_q, t_q, s_obs, t_obs, v_obs, params.c_free / KMH, params)
            v_cong = np.where(peak_cong < log_floor, fallback, v_cong)
            v_free = np.where(peak_free < log_floor, fallback, v_free)
            weak += int(np.count_nonzero((peak_cong < log_floor) | (peak_free < log_floor)))

            slowest = np.minimum(v_cong, v_free) * KMH
            w = 0.5 * (1.0 + np.tanh((params.v_crit - slowest) / params.delta_v))
            estimate[rows] = w * v_cong + (1.0 - w) * v_free
        if weak:
            logger.warning(f"Lane {lane}: {weak} cells fell back to the global mean speed")
        values[:, :, lane - 1] = estimate.reshape(grid.S, grid.T)
    return SpeedField.from_estimate(grid, values)
