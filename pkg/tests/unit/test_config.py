from pathlib import Path

import pytest

from config import DEFAULT_RATES, ConfigError, RunConfig, load_config, parse_config
from evaluation import Method
from grid import SpatioTemporalGrid

CONFIG_YAML = """\
seed: 11
data:
  trajectories: ngsim.csv
  schema:
    vehicle_id: Vehicle_ID
    t: Global_Time
    s: Local_Y
    lane: Lane_ID
    speed: v_Vel
  grid: {ds: 3.0, dt: 5.0, S: 20, T: 30, L: 2}
model:
  method: gp-ard
  vsgp: {max_iterations: 50, optimizer: lbfgs}
sweep:
  methods: [asm, gp-rotated]
  rates: [0.1, 0.2]
  seeds: 3
"""


def test_defaults():
    config = parse_config(None)

    assert isinstance(config, RunConfig)
    assert config.seed == 0
    assert config.sweep.rates == DEFAULT_RATES
    assert config.sweep.seeds == 10
    assert config.sweep.methods == [Method.ASM, Method.GP_ARD, Method.GP_ROTATED]
    assert config.model.method is Method.GP_ROTATED
    assert config.grid == config.synth.scenario.grid
    assert config.trajectories_path == Path("output") / "trajectories.csv"
    assert config.model_path == Path("output") / "model.json"


def test_load_yaml_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(CONFIG_YAML)

    config = load_config(path)

    assert config.seed == 11
    assert config.data.columns.speed == "v_Vel"
    assert config.grid == SpatioTemporalGrid(ds=3.0, dt=5.0, S=20, T=30, L=2)
    assert config.model.method is Method.GP_ARD
    assert config.model.vsgp.max_iterations == 50
    assert config.sweep.methods == [Method.ASM, Method.GP_ROTATED]
    assert config.trajectories_path == Path("ngsim.csv")


def test_canonical_document_uses_the_schema_alias():
    document = parse_config({"data": {"schema": {"lane": "Lane_ID"}}}).canonical()

    assert document["data"]["schema"]["lane"] == "Lane_ID"
    assert "columns" not in document["data"]
    assert parse_config(document).canonical() == document


def test_no_path_means_defaults():
    assert load_config().canonical() == parse_config({}).canonical()


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.yaml")


def test_unparseable_file(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("sweep: [rates\n")

    with pytest.raises(ConfigError):
        load_config(path)


def test_document_must_be_a_mapping(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")

    with pytest.raises(ConfigError):
        load_config(path)


def test_out_of_range_rate_is_located():
    with pytest.raises(ConfigError) as e:
        parse_config({"sweep": {"rates": [1.5, 0.2]}})

    assert e.value.pointer == "/sweep/rates/0"
    assert e.value.path == "sweep.rates[0]"
    assert str(e.value).startswith("sweep.rates[0]: ")


@pytest.mark.parametrize(
    "document, pointer",
    [
        ({"modle": {}}, "/modle"),
        ({"model": {"method": "kriging"}}, "/model/method"),
        ({"model": {"vsgp": {"max_iterations": -1}}}, "/model/vsgp/max_iterations"),
        ({"sweep": {"rates": []}}, "/sweep/rates"),
        ({"sweep": {"seeds": 0}}, "/sweep/seeds"),
        ({"data": {"grid": {"ds": 3.0, "dt": 5.0, "S": 0, "T": 4}}}, "/data/grid/S"),
    ],
)
def test_invalid_documents(document, pointer):
    with pytest.raises(ConfigError) as e:
        parse_config(document)

    assert e.value.pointer == pointer


def test_overrides_take_precedence():
    config = parse_config(
        {"seed": 1, "sweep": {"seeds": 4}},
        {"seed": 9, "sweep.threads": 3, "output.directory": "runs/a", "sweep.seeds": None},
    )

    assert config.seed == 9
    assert config.sweep.threads == 3
    assert config.sweep.seeds == 4
    assert config.output.directory == Path("runs/a")
    assert config.model_path == Path("runs/a/model.json")


def test_override_through_a_scalar():
    with pytest.raises(ConfigError) as e:
        parse_config({"seed": 3}, {"seed.value": 1})

    assert e.value.pointer == "/seed"


def test_digest_tracks_content():
    first = parse_config({"seed": 1})

    assert first.digest() == parse_config({"seed": 1}).digest()
    assert first.digest() != parse_config({"seed": 2}).digest()


def test_estimator_settings_collect_blocks():
    config = parse_config(
        {
            "data": {"physical_units": True},
            "model": {"multilane": False, "rank": 1},
            "baselines": {"asm": {"c_cong": -20.0}},
        }
    )

    settings = config.estimator_settings()

    assert settings.physical_units
    assert not settings.multilane
    assert settings.rank == 1
    assert settings.asm.c_cong == -20.0


def test_sample_configuration_lists_the_defaults():
    sample = Path(__file__).parents[2] / "config.yaml"

    assert load_config(sample).canonical() == parse_config({}).canonical()
