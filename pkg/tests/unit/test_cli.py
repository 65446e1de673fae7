import hashlib
import json
from pathlib import Path

import pytest
from jinja2 import Environment, FileSystemLoader

import cli
from cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, main

TEST_DATA_PATH = Path(__file__).parent / "cli_data"


def write_config(path: Path, **context) -> Path:
    """Render the run configuration template into `path`."""
    env = Environment(loader=FileSystemLoader(TEST_DATA_PATH))
    path.write_text(env.get_template("config.yaml.j2").render(**context))
    return path


@pytest.fixture()
def synthetic(tmp_path) -> Path:
    """Output directory holding a freshly generated synthetic data set."""
    output = tmp_path / "synth"
    config = write_config(tmp_path / "synth.yaml", output=output)
    assert main(["synth", "--config", str(config)]) == EXIT_OK
    return output


def read_manifest(directory: Path) -> dict:
    return json.loads((directory / "manifest.json").read_text())


def test_synth_writes_data_and_manifest(synthetic):
    for name in ("trajectories.csv", "truth.csv", "truth.grid.json", "scenario.json"):
        assert (synthetic / name).exists()

    entry = read_manifest(synthetic)["commands"]["synth"]
    assert entry["seeds"] == [0]
    assert set(entry["artifacts"]) == {
        "trajectories.csv",
        "truth.csv",
        "truth.grid.json",
        "scenario.json",
    }
    for name, sha in entry["artifacts"].items():
        assert hashlib.sha256((synthetic / name).read_bytes()).hexdigest() == sha
    assert "numpy" in entry["versions"]


def test_synth_then_sweep(synthetic, tmp_path):
    config = write_config(
        tmp_path / "sweep.yaml", output=synthetic, truth=synthetic / "truth.csv", seed=3
    )

    assert main(["sweep", "--config", str(config)]) == EXIT_OK

    summary = json.loads((synthetic / "summary.json").read_text())
    assert [a["method"] for a in summary["aggregates"]] == ["asm"]
    assert summary["aggregates"][0]["runs"] == 2
    manifest = read_manifest(synthetic)
    assert set(manifest["commands"]) == {"synth", "sweep"}
    assert manifest["commands"]["sweep"]["seeds"] == [3, 4]
    assert set(manifest["commands"]["sweep"]["artifacts"]) == {"metrics.csv", "summary.json"}


def test_fit_is_reproducible(synthetic, tmp_path):
    models = []
    for run in ("a", "b"):
        config = write_config(
            tmp_path / f"{run}.yaml",
            output=tmp_path / run,
            trajectories=synthetic / "trajectories.csv",
        )
        assert main(["fit", "--config", str(config)]) == EXIT_OK
        models.append((tmp_path / run / "model.json").read_bytes())

    assert models[0] == models[1]
    first = read_manifest(tmp_path / "a")["commands"]["fit"]
    second = read_manifest(tmp_path / "b")["commands"]["fit"]
    assert first["artifacts"] == second["artifacts"]


def test_fit_then_predict(synthetic, tmp_path):
    config = write_config(
        tmp_path / "run.yaml",
        output=tmp_path / "run",
        trajectories=synthetic / "trajectories.csv",
        truth=synthetic / "truth.csv",
        rate=0.5,
    )

    assert main(["fit", "--config", str(config)]) == EXIT_OK
    assert main(["predict", "--config", str(config)]) == EXIT_OK

    run = tmp_path / "run"
    for name in ("estimate.csv", "composite.csv", "prediction.csv"):
        assert (run / name).exists()
    assert (run / "heatmaps" / "uncertainty_lane1.csv").exists()
    header = (run / "prediction.csv").read_text().splitlines()[0]
    assert header == "lane,space_index,time_index,mean,variance,noise_variance"


def test_predict_with_the_smoother_needs_no_model(synthetic, tmp_path):
    config = write_config(
        tmp_path / "asm.yaml",
        output=tmp_path / "asm",
        trajectories=synthetic / "trajectories.csv",
        method="asm",
        rate=0.5,
    )

    assert main(["predict", "--config", str(config)]) == EXIT_OK
    assert not (tmp_path / "asm" / "prediction.csv").exists()


def test_fit_rejects_the_smoother(synthetic, tmp_path):
    config = write_config(
        tmp_path / "asm.yaml",
        output=tmp_path / "asm",
        trajectories=synthetic / "trajectories.csv",
        method="asm",
    )

    assert main(["fit", "--config", str(config)]) == EXIT_FAILURE


def test_predict_without_a_model(synthetic, tmp_path):
    config = write_config(
        tmp_path / "run.yaml", output=tmp_path / "run", trajectories=synthetic / "trajectories.csv"
    )

    assert main(["predict", "--config", str(config)]) == EXIT_FAILURE


def test_ingest_writes_observed_subset(synthetic, tmp_path):
    config = write_config(
        tmp_path / "ingest.yaml",
        output=tmp_path / "ingest",
        trajectories=synthetic / "trajectories.csv",
        rate=0.5,
    )

    assert main(["ingest", "--config", str(config)]) == EXIT_OK

    artifacts = read_manifest(tmp_path / "ingest")["commands"]["ingest"]["artifacts"]
    assert set(artifacts) == {"field.csv", "field.grid.json", "observed.csv", "observed.grid.json"}


def test_invalid_configuration_exits_with_code_2(tmp_path, caplog):
    config = write_config(tmp_path / "bad.yaml", output=tmp_path / "out", rates=[1.5])

    assert main(["sweep", "--config", str(config)]) == EXIT_CONFIG
    assert "/sweep/rates/0" in caplog.text
    assert "sweep.rates[0]" in caplog.text


def test_missing_trajectories(tmp_path, caplog):
    config = write_config(
        tmp_path / "run.yaml", output=tmp_path / "out", trajectories=tmp_path / "nothing.csv"
    )

    assert main(["fit", "--config", str(config)]) == EXIT_FAILURE
    assert "nothing.csv" in caplog.text


def test_missing_config_file(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "absent.yaml")]) == EXIT_FAILURE


def test_flags_override_the_configuration(tmp_path):
    config = write_config(tmp_path / "synth.yaml", output=tmp_path / "ignored")
    output = str(tmp_path / "o")

    code = main(["synth", "--config", str(config), "--seed", "5", "--output", output])

    assert code == EXIT_OK
    assert read_manifest(tmp_path / "o")["commands"]["synth"]["seeds"] == [5]
    assert not (tmp_path / "ignored").exists()


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])

    assert e.value.code == 0
    assert cli.VERSION in capsys.readouterr().out


def test_unknown_command():
    with pytest.raises(SystemExit) as e:
        main(["train"])

    assert e.value.code == 2
