from pathlib import Path
from typing import List

import numpy as np
import pytest

from modalmix.checkpoints import load, read_checkpoint
from modalmix.cmd import EXIT_VALIDATION, _build_parser, _main
from modalmix.config import RunConfig, parse_config_text
from modalmix.stores import DatasetStore, read_sample


@pytest.fixture
def config_file(tmp_path: Path, tiny_run_config: RunConfig) -> Path:
    path = tmp_path / "run.conf"
    path.write_text(tiny_run_config.to_text())
    return path


@pytest.fixture
def trained(config_file: Path, tiny_run_config: RunConfig) -> RunConfig:
    assert run(config_file, "gen-data") == 0
    assert run(config_file, "train") == 0
    return tiny_run_config


def run(config_file: Path, *argv: str, overrides: List[str] = ()) -> int:
    args = ["--config", str(config_file)]
    for pair in overrides:
        args += ["--set", pair]
    return _main(args + list(argv))


def dataset_bytes(root: Path) -> List[bytes]:
    return [p.read_bytes() for p in sorted(root.iterdir())]


class TestParser:
    @pytest.mark.parametrize(
        "argv",
        [
            ["gen-data"],
            ["train", "--resume"],
            ["sample", "--task", "depth", "--source", "0"],
            ["eval", "--task", "rgb", "--split", "train"],
            ["ablate", "--quiet"],
            ["v2v-style", "--source", "0", "--caption", "red circle left"],
            ["adapt-sr", "--out", "sr.ovdf"],
            ["debug-info"],
        ],
    )
    def test_subcommands_parse(self, argv):
        args = _build_parser().parse_args(["--set", "steps=1"] + argv)
        assert callable(args.func)
        assert args.overrides == ["steps=1"]

    def test_subcommand_is_required(self):
        with pytest.raises(SystemExit):
            _build_parser().parse_args([])


class TestGenData:
    def test_writes_both_splits(self, config_file: Path, tiny_run_config: RunConfig):
        assert run(config_file, "gen-data") == 0
        train = DatasetStore(tiny_run_config.path("dataset"))
        held_out = DatasetStore(tiny_run_config.path("eval_dataset"))
        assert train.seeds() == [0, 1, 2, 3]
        assert held_out.seeds() == [100000, 100001]
        assert train.check() == []
        assert all(video.dims == (2, 8, 8) for video in train)

    def test_independent_of_worker_count(self, config_file: Path, tmp_path: Path):
        assert run(config_file, "gen-data", "--out", str(tmp_path / "a")) == 0
        argv = ["gen-data", "--out", str(tmp_path / "b")]
        assert run(config_file, *argv, overrides=["workers=1"]) == 0
        assert dataset_bytes(tmp_path / "a") == dataset_bytes(tmp_path / "b")


class TestTrain:
    def test_log_and_checkpoint(self, trained: RunConfig):
        lines = (Path(trained.workdir) / "train.log").read_text().splitlines()
        assert [line.split(",")[0] for line in lines] == ["1", "2", "3"]
        assert lines[0].count(";") == 4
        assert load(trained.path("checkpoint")).step == 3

    def test_resume(self, trained: RunConfig, config_file: Path):
        assert run(config_file, "train", "--resume", overrides=["steps=5"]) == 0
        lines = (Path(trained.workdir) / "train.log").read_text().splitlines()
        assert [line.split(",")[0] for line in lines] == ["1", "2", "3", "4", "5"]
        assert load(trained.path("checkpoint")).step == 5

    def test_missing_dataset(self, config_file: Path):
        assert run(config_file, "train") == EXIT_VALIDATION


class TestSample:
    def test_conditioning_passes_through(self, trained: RunConfig, config_file: Path):
        assert run(config_file, "sample", "--task", "depth", "--source", "0") == 0
        out = read_sample(trained.path("output") / "depth.ommv")
        source = DatasetStore(trained.path("eval_dataset"))[0]
        assert np.array_equal(out.depth, source.depth)
        assert (trained.path("output") / "depth_rgb.png").is_file()

    def test_text_to_video(self, trained: RunConfig, config_file: Path):
        argv = ["sample", "--task", "t2v", "--caption", "blue square up", "--name", "tv"]
        assert run(config_file, *argv) == 0
        out = read_sample(trained.path("output") / "tv.ommv")
        assert out.dims == (2, 8, 8)
        assert out.caption_tokens == (3, 10, 14)

    def test_missing_condition(self, trained: RunConfig, config_file: Path):
        assert run(config_file, "sample", "--task", "depth") == EXIT_VALIDATION

    def test_unknown_caption_word(self, trained: RunConfig, config_file: Path):
        argv = ["sample", "--task", "t2v", "--caption", "purple blob"]
        assert run(config_file, *argv) == EXIT_VALIDATION


class TestEval:
    def test_reports_and_logs(self, trained: RunConfig, config_file: Path, capsys):
        assert run(config_file, "eval", "--task", "rgb") == 0
        table = capsys.readouterr().out
        assert table.splitlines()[0].split()[:2] == ["variant", "absrel"]
        record = (Path(trained.workdir) / "metrics.log").read_text()
        assert record.startswith("task=rgb split=eval checkpoint=model.ovdf n_samples=2")

    def test_is_deterministic(self, trained: RunConfig, config_file: Path, capsys):
        run(config_file, "eval", "--task", "depth")
        first = capsys.readouterr().out
        run(config_file, "eval", "--task", "depth")
        assert capsys.readouterr().out == first


class TestWorkflows:
    def test_v2v_style_uses_guide_depth(self, trained: RunConfig, config_file: Path):
        argv = ["v2v-style", "--source", "1", "--caption", "red circle left"]
        assert run(config_file, *argv, "--depth-source", "gt") == 0
        output = trained.path("output")
        styled = read_sample(output / "v2v_styled.ommv")
        source = DatasetStore(trained.path("eval_dataset"))[1]
        assert np.array_equal(styled.depth, source.depth)
        assert (output / "v2v_understanding.ommv").is_file()

    def test_adapt_sr(self, trained: RunConfig, config_file: Path, capsys):
        base = trained.path("checkpoint")
        before = base.read_bytes()
        assert run(config_file, "adapt-sr", "--quiet") == 0
        assert base.read_bytes() == before
        adapted = parse_config_text(
            read_checkpoint(base.with_name("model_sr.ovdf")).config_text
        )
        assert adapted.edges_slot == "lowres_rgb"
        assert capsys.readouterr().out.startswith("sr_psnr=")

    def test_adapt_sr_refuses_to_overwrite_base(self, trained: RunConfig, config_file: Path):
        out = str(trained.path("checkpoint"))
        assert run(config_file, "adapt-sr", "--out", out) == EXIT_VALIDATION

    def test_ablate(self, trained: RunConfig, config_file: Path, capsys):
        assert run(config_file, "ablate", "--quiet") == 0
        rows = capsys.readouterr().out.splitlines()
        assert [row.split()[0] for row in rows] == [
            "variant",
            "full",
            "no_embedding",
            "no_amcs",
            "no_msph",
        ]
        stored = parse_config_text(
            read_checkpoint(Path(trained.workdir) / "ablate_no_msph.ovdf").config_text
        )
        assert stored.use_msph is False

    def test_debug_info(self, config_file: Path, capsys):
        assert run(config_file, "debug-info") == 0
        out = capsys.readouterr().out
        assert "Parameter budget:" in out
        assert "model_dim = 16" in out
