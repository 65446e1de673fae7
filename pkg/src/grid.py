"""Trajectory ingestion and spatiotemporal grid aggregation.

Raw probe-vehicle trajectories are read from CSV, filtered to the road segment and
time window of a `SpatioTemporalGrid`, averaged into per-cell mean speeds and turned
into the observation sets consumed by the Gaussian-process models.

Kernel inputs are expressed in cell units (s/ds, t/dt) unless `physical_units` is
requested, in which case metres and seconds from the grid origin are used.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)

FIELD_COLUMNS = ["lane", "space_index", "time_index", "speed", "count"]


class GridError(Exception):
    """Base class for errors raised while building grids, fields and observations."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self):
        """Human-readable description of the error."""
        return self.message


class SchemaError(GridError):
    """Raised when a trajectory source lacks a required column."""


class MalformedRowError(GridError):
    """Raised when a trajectory row does not parse or violates a point invariant."""

    def __init__(self, message: str, row: int):
        super().__init__(message)
        self.row = row


class EmptyDatasetError(GridError):
    """Raised when ingestion leaves no trajectory points."""


class EmptyObservationsError(GridError):
    """Raised when a field has no observed cell in the selected lanes."""


class PenetrationRateError(GridError):
    """Raised when a penetration rate lies outside (0, 1]."""


class TrajectorySchema(BaseModel):
    """Mapping from the canonical trajectory fields to the CSV column names."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    vehicle_id: str = "vehicle_id"
    t: str = "t"
    s: str = "s"
    lane: str = "lane"
    speed: str = "speed"


class SpatioTemporalGrid(BaseModel):
    """Discretisation of a road segment and time window (and lanes) into cells."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    ds: float = Field(gt=0, description="cell length in metres")
    dt: float = Field(gt=0, description="cell duration in seconds")
    S: int = Field(ge=1, description="number of space cells")
    T: int = Field(ge=1, description="number of time cells")
    L: int = Field(default=1, ge=1, description="number of lanes")
    s_origin: float = 0.0
    t_origin: float = 0.0

    @property
    def shape(self) -> Tuple[int, int, int]:
        """Shape of the per-cell arrays of a field on this grid."""
        return (self.S, self.T, self.L)

    @property
    def s_end(self) -> float:
        """Downstream end of the segment in metres."""
        return self.s_origin + self.S * self.ds

    @property
    def t_end(self) -> float:
        """End of the time window in seconds."""
        return self.t_origin + self.T * self.dt

    def bounds(
        self, physical_units: bool = False
    ) -> Tuple[Tuple[float, float], Tuple[float, float]]:
        """Return the ((s_low, s_high), (t_low, t_high)) extent of the kernel input domain."""
        if physical_units:
            return (0.0, self.S * self.ds), (0.0, self.T * self.dt)
        return (0.0, float(self.S)), (0.0, float(self.T))

    def cell_centers(self, physical_units: bool = False) -> np.ndarray:
        """Return the (S*T, 2) array of cell-centre coordinates, space-major."""
        i, j = np.meshgrid(np.arange(self.S), np.arange(self.T), indexing="ij")
        centers = np.column_stack([i.ravel() + 0.5, j.ravel() + 0.5])
        if physical_units:
            centers = centers * np.array([self.ds, self.dt])
        return centers

    def contains(self, s: np.ndarray, t: np.ndarray, lane: np.ndarray) -> np.ndarray:
        """Element-wise membership test using half-open cell intervals."""
        return (
            (s >= self.s_origin)
            & (s < self.s_end)
            & (t >= self.t_origin)
            & (t < self.t_end)
            & (lane >= 1)
            & (lane <= self.L)
        )

    def cell_index(self, s: np.ndarray, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return the (space, time) cell indices of physical positions.

        Indices are clipped to the grid: a position just below the far edge can round
        up to S (or T) in floating point.
        """
        i = np.floor((np.asarray(s, dtype=float) - self.s_origin) / self.ds).astype(int)
        j = np.floor((np.asarray(t, dtype=float) - self.t_origin) / self.dt).astype(int)
        return np.clip(i, 0, self.S - 1), np.clip(j, 0, self.T - 1)


class TrajectoryPoint(NamedTuple):
    """A single probe-vehicle sample."""

    vehicle_id: str
    t: float
    s: float
    lane: int
    speed: float


@dataclass(frozen=True)
class TrajectorySet:
    """Columnar, immutable collection of trajectory points in input order."""

    vehicle_id: np.ndarray
    t: np.ndarray
    s: np.ndarray
    lane: np.ndarray
    speed: np.ndarray

    def __post_init__(self):
        columns = {
            "vehicle_id": np.asarray(self.vehicle_id).astype(str),
            "t": np.asarray(self.t, dtype=float),
            "s": np.asarray(self.s, dtype=float),
            "lane": np.asarray(self.lane, dtype=int),
            "speed": np.asarray(self.speed, dtype=float),
        }
        sizes = {len(column) for column in columns.values()}
        if len(sizes) > 1:
            raise ValueError(f"trajectory columns have mismatched lengths: {sorted(sizes)}")
        for name, column in columns.items():
            column.setflags(write=False)
            object.__setattr__(self, name, column)

    @classmethod
    def from_points(cls, points: Sequence[TrajectoryPoint]) -> "TrajectorySet":
        """Build a set from a sequence of points."""
        if not points:
            return cls.empty()
        vehicle_id, t, s, lane, speed = zip(*points)
        return cls(vehicle_id, t, s, lane, speed)

    @classmethod
    def empty(cls) -> "TrajectorySet":
        """Return a set with no points."""
        return cls(np.array([], dtype=str), [], [], np.array([], dtype=int), [])

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[TrajectoryPoint]:
        for row in zip(self.vehicle_id, self.t, self.s, self.lane, self.speed):
            vehicle_id, t, s, lane, speed = row
            yield TrajectoryPoint(str(vehicle_id), float(t), float(s), int(lane), float(speed))

    def select(self, mask: np.ndarray) -> "TrajectorySet":
        """Return the points where `mask` is true, preserving order."""
        mask = np.asarray(mask, dtype=bool)
        return TrajectorySet(
            self.vehicle_id[mask], self.t[mask], self.s[mask], self.lane[mask], self.speed[mask]
        )

    @property
    def vehicles(self) -> np.ndarray:
        """Sorted distinct vehicle identifiers."""
        return np.unique(self.vehicle_id)

    def to_frame(self) -> pd.DataFrame:
        """Return the points as a DataFrame with the canonical column names."""
        return pd.DataFrame(
            {
                "vehicle_id": self.vehicle_id,
                "t": self.t,
                "s": self.s,
                "lane": self.lane,
                "speed": self.speed,
            }
        )


class IngestResult(NamedTuple):
    """Points kept by `ingest_trajectories` and the number dropped by the window filter."""

    points: TrajectorySet
    dropped: int


@dataclass(frozen=True)
class SpeedField:
    """Per-cell mean speeds over a grid; NaN marks a missing cell.

    Aggregated fields count contributing samples per cell. Estimated fields carry a
    count of 1 on every filled cell, so a value is missing exactly where its count
    is zero in both cases.
    """

    grid: SpatioTemporalGrid
    values: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        counts = np.array(self.counts, dtype=int)
        if values.shape != self.grid.shape or counts.shape != self.grid.shape:
            raise ValueError(
                f"field arrays have shapes {values.shape} and {counts.shape}, "
                f"expected {self.grid.shape}"
            )
        present = counts > 0
        if np.any(np.isnan(values) == present):
            raise ValueError("field values must be missing exactly where counts are zero")
        if np.any(values[present] < 0):
            raise ValueError("field speeds must be non-negative")
        values.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def empty(cls, grid: SpatioTemporalGrid) -> "SpeedField":
        """Return an all-missing field on `grid`."""
        return cls(grid, np.full(grid.shape, np.nan), np.zeros(grid.shape, dtype=int))

    @classmethod
    def from_estimate(cls, grid: SpatioTemporalGrid, values: np.ndarray) -> "SpeedField":
        """Wrap estimated values; non-NaN cells get a unit count."""
        values = np.asarray(values, dtype=float).reshape(grid.shape)
        return cls(grid, values, (~np.isnan(values)).astype(int))

    @property
    def present(self) -> np.ndarray:
        """Boolean mask of cells holding a value."""
        return self.counts > 0

    def lane_values(self, lane: int) -> np.ndarray:
        """Return the S×T matrix of lane `lane` (1-based)."""
        return self.values[:, :, lane - 1]

    def to_frame(self) -> pd.DataFrame:
        """Return present cells as rows of the SpeedField CSV format."""
        i, j, k = np.nonzero(self.present)
        order = np.lexsort((j, i, k))
        i, j, k = i[order], j[order], k[order]
        return pd.DataFrame(
            {
                "lane": k + 1,
                "space_index": i,
                "time_index": j,
                "speed": self.values[i, j, k],
                "count": self.counts[i, j, k],
            },
            columns=FIELD_COLUMNS,
        )


@dataclass(frozen=True)
class ObservationSet:
    """Training or query observations in kernel coordinates.

    `X` holds (space, time) coordinates, `lane` the 1-based lane of each row and `y`
    the observed speeds in m/s.
    """

    X: np.ndarray
    lane: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float).reshape(-1, 2)
        lane = np.array(self.lane, dtype=int).reshape(-1)
        y = np.array(self.y, dtype=float).reshape(-1)
        if not (len(X) == len(lane) == len(y)):
            raise ValueError(
                f"observation arrays have mismatched lengths: {len(X)}, {len(lane)}, {len(y)}"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("observation coordinates and speeds must be finite")
        for name, array in (("X", X), ("lane", lane), ("y", y)):
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    def __len__(self) -> int:
        return len(self.y)

    def select(self, mask: np.ndarray) -> "ObservationSet":
        """Return the rows where `mask` is true."""
        mask = np.asarray(mask, dtype=bool)
        return ObservationSet(self.X[mask], self.lane[mask], self.y[mask])

    def digest(self) -> str:
        """SHA-256 over the coordinates, lanes and speeds."""
        sha = hashlib.sha256()
        for array in (self.X, self.lane.astype(np.int64), self.y):
            sha.update(np.ascontiguousarray(array).tobytes())
        return sha.hexdigest()


def ingest_trajectories(
    source: Union[str, Path, IO[str]],
    schema: Optional[TrajectorySchema] = None,
    grid: Optional[SpatioTemporalGrid] = None,
) -> IngestResult:
    """Read trajectory points from CSV, keeping those inside the grid window.

    Args:
        source: path or text stream of a CSV file with a header row.
        schema: column mapping; defaults to the canonical column names.
        grid: optional window; rows outside it (space, time or lane) are dropped
              and counted.

    Returns:
        the kept points in input order and the number of dropped rows.

    Raises:
        SchemaError: if a mapped column is absent.
        MalformedRowError: for the first row that does not parse or has a negative
                           speed, a lane below 1 or a non-finite number.
        EmptyDatasetError: if no point survives.
    """
    schema = schema if schema is not None else TrajectorySchema()
    frame = pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")

    mapping = schema.model_dump()
    missing = [column for column in mapping.values() if column not in frame.columns]
    if missing:
        raise SchemaError(f"trajectory source lacks required columns: {missing}")

    vehicle_id = frame[mapping["vehicle_id"]].to_numpy(dtype=str)
    numeric = {
        field: pd.to_numeric(frame[mapping[field]], errors="coerce").to_numpy(dtype=float)
        for field in ("t", "s", "lane", "speed")
    }

    bad = ~np.isfinite(numeric["t"]) | ~np.isfinite(numeric["s"]) | ~np.isfinite(numeric["lane"])
    bad |= ~np.isfinite(numeric["speed"]) | (vehicle_id == "")
    bad |= numeric["speed"] < 0
    bad |= (numeric["lane"] < 1) | (numeric["lane"] != np.round(numeric["lane"]))
    if np.any(bad):
        row = int(np.argmax(bad))
        # data rows start on line 2, after the header
        raise MalformedRowError(
            f"malformed trajectory row {row + 1} (line {row + 2}): {frame.iloc[row].to_dict()}",
            row=row + 1,
        )

    points = TrajectorySet(
        vehicle_id, numeric["t"], numeric["s"], numeric["lane"].astype(int), numeric["speed"]
    )
    dropped = 0
    if grid is not None:
        inside = grid.contains(points.s, points.t, points.lane)
        dropped = int(np.count_nonzero(~inside))
        points = points.select(inside)
    if dropped:
        logger.info(f"Dropped {dropped} trajectory rows outside the grid window")
    if len(points) == 0:
        raise EmptyDatasetError("no trajectory points left after ingestion")
    return IngestResult(points, dropped)


def write_trajectories(points: TrajectorySet, path: Union[str, Path]) -> Path:
    """Write points in the canonical trajectory CSV format."""
    path = Path(path)
    points.to_frame().to_csv(path, index=False, float_format="%.17g")
    return path


def aggregate_to_grid(points: TrajectorySet, grid: SpatioTemporalGrid) -> SpeedField:
    """Average point speeds per cell; cells without points are missing."""
    inside = grid.contains(points.s, points.t, points.lane)
    if not np.all(inside):
        logger.debug(f"Ignoring {np.count_nonzero(~inside)} points outside the grid")
    points = points.select(inside)

    i, j = grid.cell_index(points.s, points.t)
    flat = np.ravel_multi_index((i, j, points.lane - 1), grid.shape)
    size = grid.S * grid.T * grid.L
    counts = np.bincount(flat, minlength=size)
    sums = np.bincount(flat, weights=points.speed, minlength=size)

    values = np.full(size, np.nan)
    present = counts > 0
    values[present] = sums[present] / counts[present]
    return SpeedField(grid, values.reshape(grid.shape), counts.reshape(grid.shape))


def sample_penetration(
    points: TrajectorySet, rate: float, seed: int
) -> Tuple[TrajectorySet, TrajectorySet]:
    """Split points into observed and held-out sets by probe vehicle.

    ⌈rate × #vehicles⌉ distinct vehicles are drawn uniformly without replacement;
    every point of a drawn vehicle is observed.

    Raises:
        PenetrationRateError: if `rate` is outside (0, 1].
        EmptyDatasetError: if there is no vehicle to draw.
    """
    if not (0.0 < rate <= 1.0):
        raise PenetrationRateError(f"penetration rate must lie in (0, 1], got {rate}")
    vehicles = points.vehicles
    if len(vehicles) == 0:
        raise EmptyDatasetError("cannot sample probe vehicles from an empty trajectory set")

    # round before the ceiling so 0.3 * 10 stays 3
    n_observed = math.ceil(round(rate * len(vehicles), 9))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(vehicles, size=n_observed, replace=False)
    observed = np.isin(points.vehicle_id, chosen)
    return points.select(observed), points.select(~observed)


def field_to_observations(
    field: SpeedField,
    lanes: Optional[Sequence[int]] = None,
    physical_units: bool = False,
) -> ObservationSet:
    """Turn the present cells of a field into an observation set, lane-major.

    Raises:
        EmptyObservationsError: if no selected lane has a present cell.
    """
    grid = field.grid
    lanes = list(lanes) if lanes is not None else list(range(1, grid.L + 1))
    scale = np.array([grid.ds, grid.dt]) if physical_units else np.ones(2)

    X: List[np.ndarray] = []
    lane_tags: List[np.ndarray] = []
    y: List[np.ndarray] = []
    for lane in lanes:
        i, j = np.nonzero(field.present[:, :, lane - 1])
        X.append(np.column_stack([i + 0.5, j + 0.5]) * scale)
        lane_tags.append(np.full(len(i), lane))
        y.append(field.values[i, j, lane - 1])

    observations = ObservationSet(np.concatenate(X), np.concatenate(lane_tags), np.concatenate(y))
    if len(observations) == 0:
        raise EmptyObservationsError(f"field has no observed cells in lanes {lanes}")
    return observations


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".grid.json")


def write_field(field: SpeedField, path: Union[str, Path]) -> Path:
    """Write a field as CSV plus a JSON sidecar holding the grid."""
    path = Path(path)
    field.to_frame().to_csv(path, index=False, float_format="%.17g")
    _sidecar(path).write_text(json.dumps(field.grid.model_dump(), indent=2, sort_keys=True) + "\n")
    return path


def read_field(path: Union[str, Path]) -> SpeedField:
    """Read a field written by `write_field`."""
    path = Path(path)
    grid = SpatioTemporalGrid.model_validate_json(_sidecar(path).read_text())
    frame = pd.read_csv(path)
    missing = [column for column in FIELD_COLUMNS if column not in frame.columns]
    if missing:
        raise SchemaError(f"field file {path} lacks columns: {missing}")

    values = np.full(grid.shape, np.nan)
    counts = np.zeros(grid.shape, dtype=int)
    index = (
        frame["space_index"].to_numpy(dtype=int),
        frame["time_index"].to_numpy(dtype=int),
        frame["lane"].to_numpy(dtype=int) - 1,
    )
    values[index] = frame["speed"].to_numpy(dtype=float)
    counts[index] = frame["count"].to_numpy(dtype=int)
    return SpeedField(grid, values, counts)
