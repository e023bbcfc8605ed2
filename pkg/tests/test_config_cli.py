"""Config schema and CLI behavior tests, kept fast with a tiny model."""
import json

import numpy as np
import pytest

from cotrain.cli import main
from cotrain.config import SCHEMA, RunConfig, write_resolved
from cotrain.errors import ConfigError
from cotrain.tensor_io import load_arrays

TINY_INI = """\
[backbone]
input_t = 4
input_h = 8
input_w = 8
patch_t = 2
patch_h = 4
patch_w = 4
stage_blocks = 1
stage_dims = 8
stage_heads = 2
stage_q_strides = 1
stage_kv_strides = 1
mlp_ratio = 2.0

[datasets]
count = 2
classes = 4
train_size = 16
test_size = 8

[train]
steps = 6
warmup_steps = 2
batch_size = 4
"""


@pytest.fixture()
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_INI)
    return str(path)


class TestRunConfig:
    def test_defaults_cover_schema(self):
        cfg = RunConfig.defaults()
        for section, keys in SCHEMA.items():
            for key in keys:
                assert cfg.get(section, key) == SCHEMA[section][key][1]

    def test_file_then_override_precedence(self, tiny_ini):
        cfg = RunConfig.load(tiny_ini, ["train.steps=9"])
        assert cfg.get("train", "steps") == 9
        assert cfg.get("train", "warmup_steps") == 2

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[training]\nsteps = 5\n")
        with pytest.raises(ConfigError, match="training"):
            RunConfig.load(str(path))

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="train.step"):
            RunConfig.load(None, ["train.step=5"])

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="train.steps"):
            RunConfig.load(None, ["train.steps=soon"])

    def test_malformed_override_rejected(self):
        with pytest.raises(ConfigError, match="section.key=value"):
            RunConfig.load(None, ["train.steps"])
        with pytest.raises(ConfigError, match="section.key"):
            RunConfig.load(None, ["steps=5"])

    def test_missing_file_rejected(self):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.load("no_such_file.cfg")

    def test_render_roundtrips_through_file(self, tmp_path):
        cfg = RunConfig.load(None, ["train.base_lr=0.001", "datasets.classes=4,5,6"])
        path = tmp_path / "echo.cfg"
        path.write_text(cfg.render())
        again = RunConfig.load(str(path))
        assert again.values == cfg.values
        assert again.hash() == cfg.hash()

    def test_hash_tracks_values(self):
        base = RunConfig.load(None)
        changed = RunConfig.load(None, ["train.seed=2"])
        assert base.hash() != changed.hash()
        assert base.hash() == RunConfig.load(None).hash()

    def test_bool_parsing(self):
        cfg = RunConfig.load(None, ["loss.detach_sigma_loss=yes"])
        assert cfg.get("loss", "detach_sigma_loss") is True
        with pytest.raises(ConfigError):
            RunConfig.load(None, ["loss.detach_sigma_loss=maybe"])

    def test_backbone_materialization(self, tiny_ini):
        bb = RunConfig.load(tiny_ini).backbone_config()
        assert bb.input_shape == (4, 8, 8, 1)
        assert len(bb.stages) == 1
        assert bb.stages[0].dim == 8

    def test_stage_list_broadcast(self):
        cfg = RunConfig.load(
            None, ["backbone.stage_blocks=1,1", "backbone.stage_dims=8,16",
                   "backbone.stage_heads=2", ]
        )
        with pytest.raises(ConfigError, match="equal lengths"):
            cfg.backbone_config()

    def test_dataset_broadcast_mismatch(self):
        cfg = RunConfig.load(None, ["datasets.classes=4,5"])
        with pytest.raises(ConfigError, match="datasets.classes"):
            cfg.suite()

    def test_suite_follows_backbone_clip_shape(self, tiny_ini):
        suite = RunConfig.load(tiny_ini).suite()
        assert suite.clip_shape == (4, 8, 8, 1)
        assert len(suite.specs) == 2

    def test_train_config_mode_wiring(self, tiny_ini):
        cfg = RunConfig.load(tiny_ini)
        assert cfg.train_config("vanilla").vanilla is True
        assert cfg.train_config().mode == "full"
        with pytest.raises(ConfigError, match="train.mode"):
            cfg.train_config("bare")

    def test_write_resolved(self, tmp_path):
        cfg = RunConfig.load(None)
        path = write_resolved(cfg, tmp_path)
        assert path.name == "resolved_config.cfg"
        assert RunConfig.load(str(path)).hash() == cfg.hash()


class TestCliUsage:
    def test_missing_subcommand_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1

    def test_unknown_flag_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--steps", "5"])
        assert exc.value.code == 1

    def test_config_error_returns_one(self, tmp_path):
        code = main(["train", "--config", "missing.cfg", "--out", str(tmp_path / "r")])
        assert code == 1

    def test_bad_override_returns_one(self, tmp_path):
        code = main(["train", "--set", "train.step=5", "--out", str(tmp_path / "r")])
        assert code == 1


class TestCliTrain:
    def test_train_writes_run_directory(self, tiny_ini, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["train", "--config", tiny_ini, "--out", str(out), "--seed", "9"])
        assert code == 0
        report = (out / "report.csv").read_text().splitlines()
        assert report[0] == "mode,dataset,top1,top5,steps,seed"
        assert len(report) == 3
        assert report[1].startswith("full,aster,")
        assert report[1].endswith(",6,9")
        assert (out / "resolved_config.cfg").exists()
        assert (out / "checkpoint_6.mttn").exists()
        assert (out / "checkpoint_6.mttn.json").exists()
        records = [json.loads(line) for line in (out / "metrics.ndjson").read_text().splitlines()]
        kinds = [r["kind"] for r in records]
        assert kinds.count("step") == 6
        assert kinds.count("eval") == 2  # final eval, one line per dataset
        assert "run complete" in capsys.readouterr().out

    def test_identical_runs_are_byte_identical(self, tiny_ini, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", tiny_ini, "--out", str(out_a)]) == 0
        assert main(["train", "--config", tiny_ini, "--out", str(out_b)]) == 0
        assert (out_a / "report.csv").read_bytes() == (out_b / "report.csv").read_bytes()
        assert (out_a / "metrics.ndjson").read_bytes() == (out_b / "metrics.ndjson").read_bytes()
        assert (out_a / "checkpoint_6.mttn").read_bytes() == (out_b / "checkpoint_6.mttn").read_bytes()

    def test_refuses_nonempty_out_without_force(self, tiny_ini, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", tiny_ini, "--out", str(out)]) == 0
        assert main(["train", "--config", tiny_ini, "--out", str(out)]) == 1
        assert main(["train", "--config", tiny_ini, "--out", str(out), "--force"]) == 0

    def test_periodic_checkpoints_and_evals(self, tiny_ini, tmp_path):
        out = tmp_path / "run"
        code = main(
            [
                "train", "--config", tiny_ini, "--out", str(out),
                "--set", "train.checkpoint_every=2",
                "--set", "report.eval_every=3",
            ]
        )
        assert code == 0
        assert (out / "checkpoint_2.mttn").exists()
        assert (out / "checkpoint_4.mttn").exists()
        assert (out / "checkpoint_6.mttn").exists()
        records = [json.loads(line) for line in (out / "metrics.ndjson").read_text().splitlines()]
        eval_steps = {r["step"] for r in records if r["kind"] == "eval"}
        assert eval_steps == {3, 6}


class TestCliEvalAndInspect:
    @pytest.fixture()
    def trained_run(self, tiny_ini, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", tiny_ini, "--out", str(out)]) == 0
        return out

    def test_eval_prints_per_dataset(self, trained_run, tiny_ini, capsys):
        code = main(
            ["eval", "--config", tiny_ini, "--checkpoint", str(trained_run / "checkpoint_6.mttn")]
        )
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert any(line.startswith("aster") for line in lines)
        assert any(line.startswith("briar") for line in lines)

    def test_inspect_uses_sibling_config(self, trained_run, capsys):
        code = main(
            ["inspect-projections", "--checkpoint", str(trained_run / "checkpoint_6.mttn")]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "projection aster (0) -> briar (1)" in out
        assert "alias agreement:" in out

    def test_inspect_single_pair_with_clamp(self, trained_run, capsys):
        code = main(
            [
                "inspect-projections",
                "--checkpoint", str(trained_run / "checkpoint_6.mttn"),
                "--pair", "1:0", "--top", "99",
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "clamping --top 99 to 16" in out
        assert "projection briar (1) -> aster (0)" in out

    def test_inspect_rejects_bad_pair(self, trained_run):
        code = main(
            [
                "inspect-projections",
                "--checkpoint", str(trained_run / "checkpoint_6.mttn"),
                "--pair", "zero:one",
            ]
        )
        assert code == 1

    def test_inspect_refuses_bankless_mode(self, tiny_ini, tmp_path):
        out = tmp_path / "vrun"
        assert main(
            ["train", "--config", tiny_ini, "--out", str(out), "--set", "train.mode=vanilla"]
        ) == 0
        code = main(
            ["inspect-projections", "--checkpoint", str(out / "checkpoint_6.mttn")]
        )
        assert code == 1


class TestCliAblate:
    def test_ablate_covers_all_modes(self, tiny_ini, tmp_path):
        out = tmp_path / "abl"
        code = main(["ablate", "--config", tiny_ini, "--out", str(out), "--seeds", "1"])
        assert code == 0
        table = (out / "ablate.csv").read_text().splitlines()
        assert len(table) == 1 + 5 * 2  # header, five modes x two datasets
        modes = {line.split(",")[0] for line in table[1:]}
        assert modes == {"full", "vanilla", "wo_informative", "wo_informative_wo_projadd", "wo_projection"}
        assert (out / "full_seed1" / "report.csv").exists()
        assert (out / "vanilla_seed1" / "metrics.ndjson").exists()

    def test_ablate_rejects_empty_seeds(self, tiny_ini, tmp_path):
        code = main(["ablate", "--config", tiny_ini, "--out", str(tmp_path / "x"), "--seeds", " "])
        assert code == 1


class TestCliDumpDataset:
    def test_dump_writes_clips_and_index(self, tiny_ini, tmp_path):
        out = tmp_path / "dump"
        code = main(
            ["dump-dataset", "--config", tiny_ini, "--out", str(out), "--limit", "3"]
        )
        assert code == 0
        index = json.loads((out / "index.json").read_text())
        assert len(index) == 6
        assert index[0]["key"] == "aster/train/00000"
        assert index[0]["class"] == "aster/00"
        arrays = load_arrays(out / "clips.mttn")
        assert set(a["key"] for a in index) == set(arrays)
        assert arrays["aster/train/00000"].shape == (4, 8, 8, 1)
        assert arrays["aster/train/00000"].dtype == np.float32

    def test_dump_test_split_uses_offset_ids(self, tiny_ini, tmp_path):
        out = tmp_path / "dump"
        code = main(
            ["dump-dataset", "--config", tiny_ini, "--out", str(out), "--split", "test", "--limit", "2"]
        )
        assert code == 0
        index = json.loads((out / "index.json").read_text())
        assert index[0]["sample_id"] == 16
        assert index[0]["key"] == "aster/test/00016"


class TestCliGradcheck:
    def test_gradcheck_passes(self, capsys):
        code = main(["gradcheck"])
        assert code == 0
        out = capsys.readouterr().out
        assert "0 failures" in out

    def test_impossible_tolerance_fails_with_code_two(self, capsys):
        code = main(["gradcheck", "--threshold-scale", "1e-12"])
        assert code == 2
        assert "FAIL" in capsys.readouterr().out
