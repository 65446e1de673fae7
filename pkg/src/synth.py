"""Synthetic traffic waves with a known propagation speed.

A scenario describes a free-flow field with congestion bands travelling along straight
characteristics s = s₀ + (c/3.6)·(t − t₀). The generator produces the ground-truth
speed field and probe trajectories driven through it, so the wave angle a model
recovers can be compared with the one the scenario was built from.
"""

import logging
import math
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.ndimage import map_coordinates

from grid import SpatioTemporalGrid, SpeedField, TrajectorySet

logger = logging.getLogger(__name__)

KMH = 3.6
MIN_CRAWL = 0.1  # m/s, keeps positions strictly increasing in stopped traffic


class CongestionBand(BaseModel):
    """A speed dip centred on one characteristic line."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    s0: float = Field(description="anchor position of the characteristic (m)")
    t0: float = Field(description="time the wave passes s0 (s)")
    wave_speed: float = Field(default=-15.0, lt=0, description="km/h, upstream")
    width: float = Field(default=40.0, gt=0, description="standard deviation across the band (s)")
    amplitude: float = Field(default=16.0, gt=0, description="depth of the dip (m/s)")


def _default_grid() -> SpatioTemporalGrid:
    return SpatioTemporalGrid(ds=3.0, dt=5.0, S=60, T=120, L=1)


def _default_bands() -> List[CongestionBand]:
    return [CongestionBand(s0=180.0, t0=280.0)]


class WaveScenario(BaseModel):
    """Field and traffic description of a synthetic data set."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    grid: SpatioTemporalGrid = Field(default_factory=_default_grid)
    v_free: float = Field(default=20.0, gt=0)
    v_jam: float = Field(default=4.0, ge=0)
    bands: List[CongestionBand] = Field(default_factory=_default_bands)
    lane_offsets: List[float] = Field(
        default_factory=list, description="per-lane shift of every band in time (s)"
    )
    noise_std: float = Field(default=0.5, ge=0)
    n_vehicles: int = Field(default=300, ge=1)
    mean_headway: float = Field(default=2.5, gt=0, description="mean entry headway (s)")
    min_headway: float = Field(default=1.5, ge=0, description="shortest entry headway (s)")
    min_gap: float = Field(default=7.5, gt=0, description="minimum spacing to the leader (m)")
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if not self.v_jam < self.v_free:
            raise ValueError("v_jam must be below v_free")
        if self.min_headway >= self.mean_headway:
            raise ValueError("min_headway must be below mean_headway")
        if self.lane_offsets and len(self.lane_offsets) != self.grid.L:
            raise ValueError(f"{len(self.lane_offsets)} lane offsets for {self.grid.L} lanes")
        return self

    def offset(self, lane: int) -> float:
        """Time shift of the bands in 1-based `lane`."""
        return self.lane_offsets[lane - 1] if self.lane_offsets else 0.0


def default_scenario() -> WaveScenario:
    """60×120 cells of 3 m × 5 s, one band at −15 km/h."""
    return WaveScenario()


def wave_angle(scenario: WaveScenario, band: int = 0) -> float:
    """Angle of a band's characteristic in cell units, atan((ds/dt)/(−c/3.6))."""
    c = scenario.bands[band].wave_speed
    return math.atan((scenario.grid.ds / scenario.grid.dt) / (-c / KMH))


def speed_at(scenario: WaveScenario, s: np.ndarray, t: np.ndarray, lane: int = 1) -> np.ndarray:
    """Noise-free speed at physical positions and times."""
    speed = np.full(np.broadcast(s, t).shape, scenario.v_free)
    for band in scenario.bands:
        centre = band.t0 + scenario.offset(lane) + (s - band.s0) / (band.wave_speed / KMH)
        speed = speed - band.amplitude * np.exp(-0.5 * ((t - centre) / band.width) ** 2)
    return np.clip(speed, scenario.v_jam, scenario.v_free)


def generate_field(scenario: WaveScenario, seed: Optional[int] = None) -> SpeedField:
    """Fully populated truth field at the cell centres, plus Gaussian noise."""
    grid = scenario.grid
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    s = grid.s_origin + (np.arange(grid.S) + 0.5) * grid.ds
    t = grid.t_origin + (np.arange(grid.T) + 0.5) * grid.dt
    S, T = np.meshgrid(s, t, indexing="ij")

    values = np.empty(grid.shape)
    for lane in range(1, grid.L + 1):
        values[:, :, lane - 1] = speed_at(scenario, S, T, lane)
    if scenario.noise_std > 0:
        values = values + rng.normal(0.0, scenario.noise_std, size=grid.shape)
    values = np.maximum(values, 0.0)
    return SpeedField(grid, values, np.ones(grid.shape, dtype=int))


def _entry_times(scenario: WaveScenario, count: int, rng: np.random.Generator) -> np.ndarray:
    spread = scenario.mean_headway - scenario.min_headway
    gaps = scenario.min_headway + rng.exponential(spread, count)
    return np.ceil(np.cumsum(gaps))


def generate_trajectories(
    scenario: WaveScenario,
    n_vehicles: Optional[int] = None,
    seed: Optional[int] = None,
    field: Optional[SpeedField] = None,
) -> TrajectorySet:
    """Drive probe vehicles through the field, sampling every second.

    Vehicles enter the upstream end of each lane at shifted-exponential arrival times
    (whole seconds), move with the speed of the cell they are in and are held back to
    keep `min_gap` to their leader. Sampled speeds are the cell values.
    """
    grid = scenario.grid
    n_vehicles = scenario.n_vehicles if n_vehicles is None else n_vehicles
    field = field if field is not None else generate_field(scenario)
    seed = scenario.seed if seed is None else seed
    rngs = [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(grid.L)]
    steps = int(math.ceil(grid.T * grid.dt))

    ids: List[str] = []
    times: List[np.ndarray] = []
    positions: List[np.ndarray] = []
    lanes: List[np.ndarray] = []
    speeds: List[np.ndarray] = []
    for lane in range(1, grid.L + 1):
        count = n_vehicles // grid.L + (1 if lane - 1 < n_vehicles % grid.L else 0)
        entries = _entry_times(scenario, count, rngs[lane - 1])
        cells = field.lane_values(lane)
        leader = np.full(steps + 1, np.inf)
        leader_entry = -1

        for k, entry in enumerate(entries.astype(int)):
            entry = max(entry, leader_entry + 1)
            while entry <= steps and leader[entry] - scenario.min_gap < 0:
                entry += 1
            track = np.full(steps + 1, np.inf)
            s, step = 0.0, entry
            sampled_t, sampled_s, sampled_v = [], [], []
            while step < steps and s < grid.S * grid.ds:
                i = min(int(s // grid.ds), grid.S - 1)
                j = min(int(step // grid.dt), grid.T - 1)
                v = cells[i, j]
                track[step] = s
                sampled_t.append(step)
                sampled_s.append(s)
                sampled_v.append(v)
                s = min(s + max(v, MIN_CRAWL), leader[step + 1] - scenario.min_gap)
                step += 1
            if step < steps + 1:
                track[step] = s
            leader, leader_entry = track, entry
            if not sampled_t:
                continue

            vehicle = f"L{lane}V{k:05d}"
            ids.extend([vehicle] * len(sampled_t))
            times.append(grid.t_origin + np.asarray(sampled_t, dtype=float))
            positions.append(grid.s_origin + np.asarray(sampled_s))
            lanes.append(np.full(len(sampled_t), lane))
            speeds.append(np.asarray(sampled_v))

    if not ids:
        logger.warning("No synthetic vehicle entered the window")
        return TrajectorySet.empty()
    logger.info(f"Generated {len(ids)} trajectory points for {n_vehicles} vehicles")
    return TrajectorySet(
        np.asarray(ids),
        np.concatenate(times),
        np.concatenate(positions),
        np.concatenate(lanes),
        np.concatenate(speeds),
    )


def estimate_wave_angle(
    field: SpeedField,
    lane: int = 1,
    resolution: float = math.radians(0.5),
    max_lag: Optional[int] = None,
) -> float:
    """Direction of strongest correlation of a field, in cell units.

    The field is correlated with copies of itself shifted by 1..max_lag cells along
    (cos θ, −sin θ) for θ on a `resolution` grid over (−π/2, π/2]; the angle with the
    largest mean correlation is returned. Missing cells are ignored.
    """
    values = np.asarray(field.lane_values(lane), dtype=float)
    S, T = values.shape
    max_lag = max_lag or max(1, min(S, T) // 4)
    centred = values - np.nanmean(values)
    i, j = np.meshgrid(np.arange(S, dtype=float), np.arange(T, dtype=float), indexing="ij")

    count = int(round(math.pi / resolution))
    angles = math.pi / 2 - resolution * np.arange(count)
    scores = np.empty(count)
    for k, theta in enumerate(angles):
        total = 0.0
        for lag in range(1, max_lag + 1):
            shifted = map_coordinates(
                centred,
                [i + lag * math.cos(theta), j - lag * math.sin(theta)],
                order=1,
                mode="constant",
                cval=np.nan,
            )
            valid = ~(np.isnan(shifted) | np.isnan(centred))
            a, b = centred[valid], shifted[valid]
            norm = math.sqrt(float(a @ a) * float(b @ b))
            total += float(a @ b) / norm if norm > 0 else 0.0
        scores[k] = total / max_lag
    return float(angles[int(np.argmax(scores))])
