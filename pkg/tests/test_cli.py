"""End-to-end CLI tests on micro configurations."""

import numpy as np
import pytest

from sim2real_cnp.cli import dispatch, parse_kernel_arg
from sim2real_cnp.formats import read_results, write_kv
from sim2real_cnp.util import ConfigurationError

MICRO_MODEL_1D = {
    "model.preset": "desk_1d",
    "model.ppu": 16,
    "model.unet_depth": 1,
    "model.unet_channels": 4,
}
MICRO_MODEL_2D = {
    "model.preset": "desk_2d",
    "model.ppu": 8,
    "model.unet_depth": 1,
    "model.unet_channels": 4,
}
MICRO_TRAIN = {
    "pretrain.batch_size": 2,
    "pretrain.batches_per_epoch": 2,
    "pretrain.max_epochs": 1,
}
MICRO_FT = {
    "finetune.batch_size": 2,
    "finetune.batches_per_epoch": 2,
    "finetune.max_epochs": 1,
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


class TestParsing:
    def test_kernel_arg(self):
        p = parse_kernel_arg("l=0.25,noise=0.05")
        assert p.lengthscale == 0.25 and p.noise_std == 0.05 and p.signal_std == 1.0
        with pytest.raises(ConfigurationError):
            parse_kernel_arg("noise=0.05")
        with pytest.raises(ConfigurationError):
            parse_kernel_arg("l=0.25,bogus=1")

    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert dispatch(["frobnicate"]) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_required_flag_is_usage_error(self, capsys):
        assert dispatch(["pretrain"]) == 1


class TestOracle:
    def test_prints_and_writes_records(self, workdir, capsys):
        out = workdir / "oracle.csv"
        code = dispatch(
            ["oracle", "--kernel", "l=0.25,noise=0.05", "--tasks", "20", "--seed", "7", "--out", str(out)]
        )
        assert code == 0
        captured = capsys.readouterr().out
        assert "mean oracle NLL over 20 tasks" in captured
        rows = read_results(out)
        assert len(rows) == 1 and rows[0]["strategy"] == "oracle"
        assert (workdir / "oracle.csv.manifest").exists()

    def test_rerun_is_byte_identical(self, workdir):
        a, b = workdir / "o1.csv", workdir / "o2.csv"
        for path in (a, b):
            assert (
                dispatch(
                    ["oracle", "--kernel", "l=0.3,noise=0.1", "--tasks", "15", "--seed", "3", "--out", str(path)]
                )
                == 0
            )
        assert a.read_bytes() == b.read_bytes()


@pytest.fixture(scope="module")
def pretrained(workdir):
    cfg = workdir / "pretrain_gp.cfg"
    write_kv(
        cfg,
        {
            "kind": "gp",
            "kernel.lengthscale": 0.25,
            "kernel.noise_std": 0.05,
            "n_val_tasks": 4,
            "seed": 1,
            **MICRO_MODEL_1D,
            **MICRO_TRAIN,
        },
    )
    ckpt = workdir / "gp.ckpt"
    assert dispatch(["pretrain", "--config", str(cfg), "--out", str(ckpt)]) == 0
    return ckpt


class TestGPPipeline:
    def test_pretrain_outputs(self, pretrained):
        assert pretrained.exists()
        assert pretrained.with_name(pretrained.name + ".meta").exists()
        assert pretrained.with_name(pretrained.name + ".log.csv").exists()
        assert pretrained.with_name(pretrained.name + ".manifest").exists()

    def test_missing_config_key_names_it(self, workdir, capsys):
        cfg = workdir / "broken.cfg"
        write_kv(cfg, {"kind": "gp", **MICRO_MODEL_1D})
        code = dispatch(["pretrain", "--config", str(cfg), "--out", str(workdir / "x.ckpt")])
        assert code == 1
        assert "kernel.lengthscale" in capsys.readouterr().err

    def test_finetune_and_evaluate(self, workdir, pretrained):
        cfg = workdir / "ft_gp.cfg"
        write_kv(
            cfg,
            {
                "kind": "gp",
                "kernel.lengthscale": 0.1,
                "kernel.noise_std": 0.05,
                "n_tasks": 6,
                "seed": 2,
                **MICRO_FT,
            },
        )
        adapted = workdir / "gp_film.ckpt"
        assert (
            dispatch(
                ["finetune", "--ckpt", str(pretrained), "--strategy", "film",
                 "--config", str(cfg), "--out", str(adapted)]
            )
            == 0
        )
        out = workdir / "eval.csv"
        assert (
            dispatch(
                ["evaluate", "--ckpt", str(adapted), "--kernel", "l=0.1,noise=0.05",
                 "--tasks", "5", "--seed", "4", "--out", str(out)]
            )
            == 0
        )
        rows = read_results(out)
        assert {r["strategy"] for r in rows} == {"model", "oracle"}


@pytest.fixture(scope="module")
def world_dir(workdir):
    cfg = workdir / "world.cfg"
    write_kv(cfg, {"world.n_stations": 30, "world.n_times": 118, "slots_per_day": 4})
    out = workdir / "world"
    assert dispatch(["gen-data", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
    return out


@pytest.fixture(scope="module")
def station_ckpt(workdir, world_dir):
    cfg = workdir / "pretrain_st.cfg"
    write_kv(
        cfg,
        {"kind": "station", "world": str(world_dir), "n_val_tasks": 2, "seed": 3,
         **MICRO_MODEL_2D, **MICRO_TRAIN},
    )
    ckpt = workdir / "st.ckpt"
    assert dispatch(["pretrain", "--config", str(cfg), "--out", str(ckpt)]) == 0
    return ckpt


class TestStationPipeline:
    def test_gen_data_outputs_and_determinism(self, workdir, world_dir):
        for name in ("stations.csv", "sim_fields.csv", "sim_fields.csv.grid", "aux_field.csv",
                     "world.kv", "manifest.kv"):
            assert (world_dir / name).exists(), name
        again = workdir / "world2"
        cfg = workdir / "world.cfg"
        assert dispatch(["gen-data", "--config", str(cfg), "--out", str(again), "--seed", "5"]) == 0
        assert (world_dir / "stations.csv").read_bytes() == (again / "stations.csv").read_bytes()
        assert (world_dir / "sim_fields.csv").read_bytes() == (again / "sim_fields.csv").read_bytes()

    def test_split_plan_roundtrip(self, workdir, world_dir):
        plan_path = workdir / "plan.kv"
        assert (
            dispatch(
                ["split-plan", "--world", str(world_dir), "--n-stations", "10",
                 "--n-times", "8", "--seed", "9", "--out", str(plan_path)]
            )
            == 0
        )
        assert plan_path.exists()

    def test_station_finetune_evaluate_diagnose(self, workdir, world_dir, station_ckpt):
        cfg = workdir / "ft_st.cfg"
        write_kv(
            cfg,
            {"kind": "station", "world": str(world_dir), "n_stations": 10, "n_times": 8,
             "seed": 4, **MICRO_FT},
        )
        adapted = workdir / "st_global.ckpt"
        assert (
            dispatch(
                ["finetune", "--ckpt", str(station_ckpt), "--strategy", "global",
                 "--config", str(cfg), "--out", str(adapted)]
            )
            == 0
        )
        out = workdir / "eval_st.csv"
        assert (
            dispatch(
                ["evaluate", "--ckpt", str(adapted), "--world", str(world_dir),
                 "--n-stations", "10", "--n-times", "8", "--seed", "4", "--out", str(out)]
            )
            == 0
        )
        rows = read_results(out)
        assert {r["strategy"] for r in rows} == {"model", "oracle"}
        diag = workdir / "artefacts.csv"
        assert (
            dispatch(
                ["diagnose-artefacts", "--ckpt", str(adapted), "--world", str(world_dir),
                 "--probe-spacing", "0.01", "--n-tasks", "3", "--n-stations", "10",
                 "--n-times", "8", "--seed", "4", "--out", str(diag)]
            )
            == 0
        )
        lines = diag.read_text().splitlines()
        assert lines[0] == "task_index,time_id,score"
        assert len(lines) == 4


class TestExperimentCLI:
    def test_presets_print(self, capsys):
        assert dispatch(["experiment", "presets"]) == 0
        out = capsys.readouterr().out
        for name in ("shrink_l", "grow_l", "noise_change", "station_world"):
            assert f"# preset: {name}" in out

    def test_run_micro_spec(self, workdir):
        spec_path = workdir / "micro.spec"
        write_kv(
            spec_path,
            {
                "kind": "noise_change",
                "master_seed": 5,
                "n_replicates": 1,
                "strategies": "film",
                "baselines": "sim_only,oracle",
                "sim.lengthscale": 0.25,
                "sim.noise_std": 0.05,
                "real.lengthscale": "0.25",
                "real.noise_std": "0.2",
                "n_tasks_grid": "4",
                "n_test_tasks": 4,
                "n_val_tasks": 2,
                "model.input_dim": 1,
                "model.ppu": 16,
                "model.unet_depth": 1,
                "model.unet_channels": 4,
                "pretrain.batch_size": 2,
                "pretrain.batches_per_epoch": 2,
                "pretrain.max_epochs": 1,
                "finetune.batch_size": 2,
                "finetune.batches_per_epoch": 2,
                "finetune.max_epochs": 1,
            },
        )
        out = workdir / "exp"
        assert dispatch(["experiment", "run", "--spec", str(spec_path), "--out", str(out)]) == 0
        rows = read_results(out / "results.csv")
        assert len(rows) == 3  # oracle + sim_only + 1 film replicate
        assert (out / "manifest.kv").exists()
