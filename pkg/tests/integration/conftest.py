import logging
from datetime import datetime

import pytest

from evaluation import SweepDataset
from synth import WaveScenario, default_scenario, generate_field, generate_trajectories

logger = logging.getLogger(__name__)


def _dataset(name: str, scenario: WaveScenario) -> SweepDataset:
    logger.info(f"Started: {name} dataset")
    start_time = datetime.now()
    truth = generate_field(scenario)
    points = generate_trajectories(scenario, field=truth)
    logger.info(f"Finished: {name} dataset in: {datetime.now() - start_time} seconds")
    return SweepDataset(points, scenario.grid, truth)


@pytest.fixture(scope="session")
def single_lane():
    """The default one-band scenario with its noisy truth field."""
    return _dataset("single_lane", default_scenario())


@pytest.fixture(scope="session")
def two_lanes():
    """Two lanes whose bands are 40 s apart."""
    scenario = default_scenario().model_copy(
        update={
            "grid": default_scenario().grid.model_copy(update={"S": 40, "T": 90, "L": 2}),
            "lane_offsets": [0.0, 40.0],
            "bands": [default_scenario().bands[0].model_copy(update={"s0": 60.0, "t0": 200.0})],
            "n_vehicles": 400,
        }
    )
    return _dataset("two_lanes", scenario)
