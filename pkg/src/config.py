"""Configuration parser for runs of the command-line tool."""

import hashlib
import json
from pathlib import Path
from typing import Annotated, Any, Dict, List, Mapping, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from baseline_asm import AsmParams
from evaluation import EstimatorSettings, Method
from grid import SpatioTemporalGrid, TrajectorySchema
from kernels import KernelSpec
from synth import WaveScenario
from vsgp import KernelInit, VsgpOptions

DEFAULT_RATES = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5]

Rate = Annotated[float, Field(gt=0, le=1)]


class ConfigError(Exception):
    """Raised when a run configuration cannot be read or validated.

    Attributes:
        pointer: JSON pointer of the offending key, e.g. "/sweep/rates/0".
        path: the same location as a dotted path, e.g. "sweep.rates[0]".
        message: what is wrong with it.
    """

    def __init__(self, pointer: str, path: str, message: str):
        super().__init__(message)
        self.pointer = pointer
        self.path = path
        self.message = message

    def __str__(self):
        """Human-readable description of the error."""
        where = self.path or "<document>"
        return f"{where}: {self.message}"


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class DataConfig(_Block):
    """Where the trajectories come from and how they are gridded.

    `trajectories` defaults to trajectories.csv in the output directory (where
    `synth` writes), and `grid` to the grid of the synthetic scenario.
    """

    trajectories: Optional[Path] = None
    truth: Optional[Path] = None
    columns: TrajectorySchema = Field(default_factory=TrajectorySchema, alias="schema")
    grid: Optional[SpatioTemporalGrid] = None
    physical_units: bool = False
    rate: Rate = 1.0


class ModelConfig(_Block):
    """Estimator used by `fit` and `predict`, and the GP settings shared with `sweep`."""

    method: Method = Method.GP_ROTATED
    kernel: KernelInit = Field(default_factory=KernelInit)
    vsgp: VsgpOptions = Field(default_factory=VsgpOptions)
    pretrained: Optional[KernelSpec] = None
    multilane: bool = True
    rank: Optional[int] = Field(default=None, ge=1)
    model_file: Optional[Path] = None
    sigma_multiplier: float = Field(default=3.0, ge=0)


class BaselinesConfig(_Block):
    """Comparison baselines."""

    asm: AsmParams = Field(default_factory=AsmParams)


class SweepConfig(_Block):
    """Penetration-rate experiment."""

    methods: List[Method] = Field(
        default_factory=lambda: [Method.ASM, Method.GP_ARD, Method.GP_ROTATED]
    )
    rates: List[Rate] = Field(default_factory=lambda: list(DEFAULT_RATES))
    seeds: int = Field(default=10, ge=1)
    unobserved_only: bool = False
    threads: int = Field(default=1, ge=1)

    @field_validator("rates", "methods")
    @classmethod
    def _not_empty(cls, value):
        if not value:
            raise ValueError("must not be empty")
        return value


class OutputConfig(_Block):
    """Where artifacts go."""

    directory: Path = Path("output")
    heatmaps: bool = True


class SynthConfig(_Block):
    """Synthetic data generation."""

    scenario: WaveScenario = Field(default_factory=WaveScenario)


class RunConfig(_Block):
    """Root of a run configuration document."""

    seed: int = 0
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    baselines: BaselinesConfig = Field(default_factory=BaselinesConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)

    @property
    def grid(self) -> SpatioTemporalGrid:
        """Grid of the data block, falling back to the synthetic scenario's."""
        return self.data.grid if self.data.grid is not None else self.synth.scenario.grid

    @property
    def trajectories_path(self) -> Path:
        """Trajectory CSV to read."""
        if self.data.trajectories is not None:
            return self.data.trajectories
        return self.output.directory / "trajectories.csv"

    @property
    def model_path(self) -> Path:
        """Model file written by `fit` and read by `predict`."""
        if self.model.model_file is not None:
            return self.model.model_file
        return self.output.directory / "model.json"

    def estimator_settings(self) -> EstimatorSettings:
        """Settings handed to the estimators."""
        return EstimatorSettings(
            kernel=self.model.kernel,
            vsgp=self.model.vsgp,
            asm=self.baselines.asm,
            pretrained=self.model.pretrained,
            multilane=self.model.multilane,
            rank=self.model.rank,
            physical_units=self.data.physical_units,
        )

    def canonical(self) -> Dict[str, Any]:
        """The fully resolved document, defaults included, as JSON-ready data."""
        return self.model_dump(mode="json", by_alias=True)

    def digest(self) -> str:
        """SHA-256 of the canonical document."""
        text = json.dumps(self.canonical(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


def _locations(loc: Tuple[Union[str, int], ...]) -> Tuple[str, str]:
    pointer = "".join(f"/{part}" for part in loc)
    dotted = ""
    for part in loc:
        if isinstance(part, int):
            dotted += f"[{part}]"
        else:
            dotted += f".{part}" if dotted else str(part)
    return pointer, dotted


def _apply_overrides(document: Dict[str, Any], overrides: Mapping[str, Any]):
    for key, value in overrides.items():
        if value is None:
            continue
        node = document
        *parents, leaf = key.split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"/{part}", part, "expected a mapping")
            node = child
        node[leaf] = value


def parse_config(
    document: Optional[Mapping[str, Any]], overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Validate a configuration document after applying dotted-key overrides.

    Raises:
        ConfigError: for the first offending key.
    """
    if document is None:
        document = {}
    if not isinstance(document, Mapping):
        raise ConfigError("", "", "configuration must be a mapping")
    document = json.loads(json.dumps(document, default=str))
    _apply_overrides(document, overrides or {})
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        error = e.errors()[0]
        pointer, dotted = _locations(tuple(error["loc"]))
        raise ConfigError(pointer, dotted, error["msg"]) from e


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Read a YAML or JSON configuration file; no path means all defaults.

    Raises:
        FileNotFoundError: if `path` does not exist.
        ConfigError: if the file does not parse or does not validate.
    """
    document = None
    if path is not None:
        text = Path(path).read_text()
        try:
            document = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError("", "", f"cannot parse {path}: {e}") from e
    return parse_config(document, overrides)
