"""Config parsing, serialization round trips, and CLI subcommands."""

import json
import os

import numpy as np
import pytest

from vbfn import cli, pipeline
from vbfn.config import (ConfigError, config_dict, parse_config,
                         serialize_config)
from vbfn.graphs import read_dataset, write_samples


class TestParseConfig:
    def test_empty_gives_defaults(self):
        cfg = parse_config(None)
        assert cfg.schedule.sigma1_node == 0.2
        assert cfg.schedule.steps == 1000
        assert cfg.schedule.t_min == 1e-4
        assert cfg.solver.cg_max_iter == 50
        assert cfg.solver.cg_tol == 1e-6
        assert cfg.solver.preconditioner == "jacobi"
        assert cfg.precision.obs_mode == "diag_prior"
        assert cfg.precision.lambda_x == 0.2
        assert cfg.precision.eps == 1e-2
        assert cfg.train.lr == 1e-4
        assert cfg.train.weight_decay == 1e-12
        assert cfg.train.clip_norm == 10000.0
        assert cfg.decode.eps_prob == 1e-12
        assert cfg.mask_diag_edges is True

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("\n# just a comment\n")
        assert parse_config(path) == parse_config(None)

    def test_override_wins(self):
        cfg = parse_config(None, ["schedule.T = 64"])
        assert cfg.schedule.steps == 64
        assert cfg.schedule.sigma1_node == 0.2

    def test_file_plus_override(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("schedule.T = 10\nprecision.lambda_x = 1.0\n")
        cfg = parse_config(path, ["schedule.T = 20"])
        assert cfg.schedule.steps == 20
        assert cfg.precision.lambda_x == 1.0

    def test_unknown_key_suggests(self):
        with pytest.raises(ConfigError) as err:
            parse_config(None, ["solver.tolerence = 1e-8"])
        assert "solver.cg_tol" in str(err.value)
        assert "valid keys" in str(err.value)

    def test_type_mismatch_names_key(self):
        with pytest.raises(ConfigError, match="schedule.T"):
            parse_config(None, ["schedule.T = banana"])
        with pytest.raises(ConfigError, match="expects int"):
            parse_config(None, ["schedule.T = 1.5"])

    def test_bool_parsing(self):
        assert parse_config(None, ["mask_diag_edges = false"]).mask_diag_edges \
            is False
        assert parse_config(None, ["train.per_graph_t = TRUE"]).train.per_graph_t \
            is True

    def test_validation_errors_surface_as_config_errors(self):
        with pytest.raises(ConfigError):
            parse_config(None, ["schedule.sigma1_node = 2.0"])

    def test_round_trip_identity(self, tmp_path):
        cfg = parse_config(None, ["schedule.T = 7", "train.lr = 0.003",
                                  "precision.obs_mode = identity",
                                  "mask_diag_edges = false"])
        path = tmp_path / "rt.cfg"
        path.write_text(serialize_config(cfg))
        assert parse_config(path) == cfg

    def test_config_dict_covers_all_keys(self):
        d = config_dict(parse_config(None))
        assert "schedule.T" in d and "solver.cg_tol" in d and "seed" in d


def _write_tree_dataset(path, count=12):
    ds = pipeline.gen_tree_dataset(count, 4, 5, seed=0)
    write_samples(path, list(ds), ds.meta)
    return ds


class TestCli:
    def test_train_then_sample(self, tmp_path, capsys):
        data = tmp_path / "trees.jsonl"
        _write_tree_dataset(data)
        out = tmp_path / "run"
        rc = cli.main(["train", "--config", "/dev/null",
                       "--set", f"dataset = {data}",
                       "--set", "train.steps = 5",
                       "--set", "train.batch_size = 4",
                       "--set", "predictor.hidden_width = 4",
                       "--set", "predictor.time_embed_dim = 4",
                       "--out", str(out)])
        assert rc == 0
        assert (out / "checkpoint.json").exists()
        assert (out / "resolved.cfg").exists()
        log = (out / "train_log.csv").read_text().splitlines()
        assert log[0] == "step,loss,wall_seconds,cg_warning_count"
        assert len(log) >= 2

        rc = cli.main(["sample", "--checkpoint", str(out / "checkpoint.json"),
                       "--count", "3", "--steps", "5",
                       "--out", str(tmp_path / "gen")])
        assert rc == 0
        samples = read_dataset(tmp_path / "gen" / "samples.jsonl")
        assert len(samples) == 3

    def test_config_error_exit_code(self, capsys):
        rc = cli.main(["train", "--set", "solver.tolerence = 1"])
        assert rc == cli.EXIT_CONFIG
        assert "solver.cg_tol" in capsys.readouterr().err

    def test_io_error_exit_code(self, capsys):
        rc = cli.main(["train", "--set", "dataset = /no/such/file.jsonl",
                       "--out", "/tmp/vbfn-io-test"])
        assert rc == cli.EXIT_IO

    def test_verify_filter_pass(self, tmp_path, capsys):
        rc = cli.main(["verify", "--filter", "telescoping",
                       "--out", str(tmp_path)])
        assert rc == 0
        report = json.loads((tmp_path / "verify_report.json").read_text())
        assert report[0]["name"] == "telescoping" and report[0]["passed"]
        assert "[PASS] telescoping" in capsys.readouterr().out

    def test_verify_failure_exit_code(self, monkeypatch, capsys):
        from vbfn import verify as verify_mod
        monkeypatch.setitem(dict_lookup := dict(verify_mod.CHECKS),
                            "telescoping", lambda: (False, "broken", "x"))
        monkeypatch.setattr(verify_mod, "CHECKS",
                            list(dict_lookup.items()))
        rc = cli.main(["verify", "--filter", "telescoping"])
        assert rc == cli.EXIT_VERIFY

    def test_env_seed_override(self, tmp_path, monkeypatch):
        data = tmp_path / "trees.jsonl"
        _write_tree_dataset(data)
        monkeypatch.setenv("VBFN_SEED", "77")
        out = tmp_path / "run"
        rc = cli.main(["train", "--set", f"dataset = {data}",
                       "--set", "train.steps = 1",
                       "--set", "train.batch_size = 2",
                       "--set", "predictor.hidden_width = 2",
                       "--set", "predictor.time_embed_dim = 2",
                       "--seed", "5", "--out", str(out)])
        assert rc == 0
        ckpt = json.loads((out / "checkpoint.json").read_text())
        assert ckpt["seed"] == 77
        assert "seed = 77" in (out / "resolved.cfg").read_text()

    def test_bench_csv(self, tmp_path):
        out = tmp_path / "bench.csv"
        rc = cli.main(["bench", "--dims", "16,32", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "D,method,iters,seconds,residual"
        assert len(lines) == 5  # two dims x two methods

    def test_inspect_precision_json(self, capsys):
        rc = cli.main(["inspect-precision", "--n", "5"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert report["node"]["dim"] == 5
        assert report["edge"]["dim"] == 10
        assert report["node"]["condition_bound_beta0"] >= 1.0

    def test_periodic_checkpoints_written(self, tmp_path):
        data = tmp_path / "trees.jsonl"
        _write_tree_dataset(data)
        out = tmp_path / "run"
        rc = cli.main(["train", "--set", f"dataset = {data}",
                       "--set", "train.steps = 6",
                       "--set", "train.batch_size = 2",
                       "--set", "train.checkpoint_every = 2",
                       "--set", "predictor.hidden_width = 2",
                       "--set", "predictor.time_embed_dim = 2",
                       "--out", str(out)])
        assert rc == 0
        assert (out / "checkpoint_step2.json").exists()
        assert (out / "checkpoint_step4.json").exists()
        assert (out / "checkpoint.json").exists()

    def test_resume_matches_uninterrupted(self, tmp_path):
        data = tmp_path / "trees.jsonl"
        _write_tree_dataset(data)
        common = ["--set", f"dataset = {data}",
                  "--set", "train.batch_size = 4",
                  "--set", "predictor.hidden_width = 4",
                  "--set", "predictor.time_embed_dim = 4",
                  "--set", "train.checkpoint_every = 100"]
        out_full = tmp_path / "full"
        cli.main(["train", *common, "--set", "train.steps = 8",
                  "--out", str(out_full)])
        out_half = tmp_path / "half"
        cli.main(["train", *common, "--set", "train.steps = 4",
                  "--out", str(out_half)])
        out_resumed = tmp_path / "resumed"
        cli.main(["train", *common, "--set", "train.steps = 8",
                  "--resume", str(out_half / "checkpoint.json"),
                  "--out", str(out_resumed)])
        full = json.loads((out_full / "checkpoint.json").read_text())
        resumed = json.loads((out_resumed / "checkpoint.json").read_text())
        assert full["param_segments"] == resumed["param_segments"]
