from pathlib import Path

import pytest

from modalmix.config import (
    ConfigError,
    RunConfig,
    differing_keys,
    load_run_config,
    parse_config_text,
    stored_step,
)
from modalmix.roles import TaskKind


class TestRunConfig:
    def test_defaults(self):
        config = RunConfig(workdir="/tmp/mm")
        model = config.model_config()
        assert model.grid == (4, 8, 8)
        assert model.latent_channels == 96
        assert config.sampler_config().steps == 50
        assert config.train_config().fixed_task is None

    def test_text_roundtrip(self):
        config = RunConfig(workdir="/tmp/mm", lr=3e-4, use_msph=False, stage=1)
        assert parse_config_text(config.to_text()) == config

    def test_step_comment(self):
        config = RunConfig(workdir="/tmp/mm")
        assert stored_step(config.to_text(step=12)) == 12
        assert stored_step(config.to_text()) == 0
        assert parse_config_text(config.to_text(step=12)) == config

    @pytest.mark.parametrize("stage, mixture", [(1, (1.0, 0.0, 0.0, 0.0, 0.0)), (2, (0.2,) * 5)])
    def test_stage_presets(self, stage, mixture):
        config = RunConfig(workdir="/tmp/mm", stage=stage, task_mixture=(0.0, 1.0, 0.0, 0.0, 0.0))
        assert config.train_config().task_mixture == mixture

    def test_lowres_slot_trains_edges_task(self):
        config = RunConfig(workdir="/tmp/mm", edges_slot="lowres_rgb")
        assert config.train_config().fixed_task is TaskKind.COND_EDGES

    @pytest.mark.parametrize(
        "overrides",
        [
            dict(height=30),
            dict(stage=3),
            dict(edges_slot="canny"),
            dict(model_dim=30, heads=4),
            dict(task_mixture=(0.5, 0.5)),
            dict(sample_steps=0),
            dict(n_train=0),
        ],
    )
    def test_rejects(self, overrides):
        with pytest.raises(ConfigError):
            RunConfig(workdir="/tmp/mm", **overrides)

    def test_relative_paths_live_in_workdir(self):
        config = RunConfig(workdir="/tmp/mm", output="/abs/out")
        assert config.path("dataset") == Path("/tmp/mm/data/train")
        assert config.path("output") == Path("/abs/out")

    def test_differing_keys(self):
        a = RunConfig(workdir="/tmp/mm")
        b = a.with_overrides(use_msph=False, lr=1e-3)
        assert differing_keys(a, b) == ["use_msph", "lr"]


class TestLoadRunConfig:
    def test_file_then_overrides(self, tmp_path: Path):
        path = tmp_path / "run.conf"
        path.write_text(
            "# comment line\n"
            f"workdir = {tmp_path}\n"
            "steps = 10  # trailing comment\n"
            "use_amcs = no\n"
            "task_mixture = 0.5,0.5,0,0,0\n"
        )
        config = load_run_config(path, ["steps=20"])
        assert config.workdir == str(tmp_path)
        assert config.steps == 20
        assert config.use_amcs is False
        assert config.task_mixture == (0.5, 0.5, 0.0, 0.0, 0.0)

    def test_unknown_key(self, tmp_path: Path):
        path = tmp_path / "run.conf"
        path.write_text("learning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="unknown key 'learning_rate'"):
            load_run_config(path)

    @pytest.mark.parametrize("pair", ["steps = many", "use_msph = maybe", "lr"])
    def test_unparsable(self, pair):
        with pytest.raises(ConfigError):
            load_run_config(None, [pair])

    def test_missing_file(self, tmp_path: Path):
        with pytest.raises(ConfigError, match="does not exist"):
            load_run_config(tmp_path / "absent.conf")
