"""Command-line entry point.

Subcommands: gen-data, pretrain, finetune, evaluate, oracle, experiment,
diagnose-artefacts. Every run writes a manifest (resolved configuration,
seeds, library versions) beside its outputs so it can be replayed exactly.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import torch

import sim2real_cnp
from sim2real_cnp import checkpoint as ckpt_io
from sim2real_cnp.experiments import (
    PRESETS,
    _train_config_from_kv,
    artefact_score,
    experiment_spec_from_kv,
    experiment_spec_to_kv,
    gp_condition_label,
    gp_finetune_dataset,
    make_gp_tasks,
    preset,
    pretrain_station_model,
    ResultRecord,
    run_experiment,
    station_condition_label,
    station_task_stream,
    station_oracle,
    train_gp_model,
    _finetune_stream,
)
from sim2real_cnp.fields import SEKernelParams, generate_station_world
from sim2real_cnp.finetune import STRATEGIES, AdaptationStrategy, finetune
from sim2real_cnp.formats import (
    KVConfig,
    read_split_plan,
    read_world_dir,
    world_config_from_kv,
    write_kv,
    write_results,
    write_split_plan,
    write_train_log,
    write_world_dir,
)
from sim2real_cnp.model import MODEL_PRESETS, ModelConfig
from sim2real_cnp.tasks import (
    StationData,
    build_split_plan,
    context_size,
    make_test_task,
    make_val_task,
)
from sim2real_cnp.train import (
    ModelPredictor,
    OraclePredictor,
    TrainConfig,
    evaluate,
    finetune_defaults,
    fit_normalizer,
)
from sim2real_cnp.experiments import GP_DOMAIN, gp_normalizer  # noqa: F401  (GP_DOMAIN reused below)
from sim2real_cnp.util import (
    ConfigurationError,
    DegenerateCovarianceError,
    DomainError,
    child_rng,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the CLI contract is 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _versions() -> dict[str, str]:
    return {
        "version.package": sim2real_cnp.__version__,
        "version.python": ".".join(str(v) for v in sys.version_info[:3]),
        "version.numpy": np.__version__,
        "version.torch": torch.__version__,
    }


def write_manifest(path: Path, subcommand: str, entries: dict[str, object]) -> None:
    out: dict[str, object] = {"subcommand": subcommand}
    out.update(entries)
    out.update(_versions())
    write_kv(path, out)


def parse_kernel_arg(text: str) -> SEKernelParams:
    """Parse 'l=0.25,noise=0.05[,signal=1.0]' into kernel parameters."""
    fields = {"signal": 1.0, "noise": 0.0}
    seen_l = False
    for part in text.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if not value:
            raise ConfigurationError(f"kernel spec part {part!r} is not key=value")
        if key in ("l", "lengthscale"):
            fields["l"] = float(value)
            seen_l = True
        elif key in ("noise", "signal"):
            fields[key] = float(value)
        else:
            raise ConfigurationError(f"unknown kernel field {key!r} (use l, signal, noise)")
    if not seen_l:
        raise ConfigurationError(f"kernel spec {text!r} is missing l=<lengthscale>")
    return SEKernelParams(
        lengthscale=fields["l"], signal_std=fields["signal"], noise_std=fields["noise"]
    )


def model_config_from_file(cfg: KVConfig, default_preset: str) -> ModelConfig:
    """Preset plus per-field model.* overrides from a config file."""
    name = cfg.str_("model.preset", default_preset)
    if name not in MODEL_PRESETS:
        raise ConfigurationError(f"unknown model.preset {name!r}; available: {sorted(MODEL_PRESETS)}")
    base = MODEL_PRESETS[name]()
    overrides: dict[str, object] = {}
    for f in dataclasses.fields(ModelConfig):
        key = f"model.{f.name}"
        if not cfg.has(key):
            continue
        raw = cfg.str_(key)
        if f.name in ("coordinate_channels", "film_enabled"):
            overrides[f.name] = raw == "true"
        elif f.name in ("encoder_lengthscale", "decoder_lengthscale"):
            overrides[f.name] = None if raw == "none" else float(raw)
        elif f.name in ("min_sigma", "kernel_cutoff"):
            overrides[f.name] = float(raw)
        else:
            overrides[f.name] = int(raw)
    return dataclasses.replace(base, **overrides) if overrides else base


def _resolved_seed(args, cfg: KVConfig | None) -> int:
    if args.seed is not None:
        return args.seed
    if cfg is not None and cfg.has("seed"):
        return cfg.int_("seed")
    return 0


def _load_world_and_slots(world_dir: str):
    world = read_world_dir(world_dir)
    cfg = KVConfig.load(Path(world_dir) / "world.kv")
    return world, cfg.int_("slots_per_day", 4)


def _plan_for(args, world, slots_per_day: int, seed: int):
    if getattr(args, "split_plan", None):
        return read_split_plan(args.split_plan)
    if args.n_stations is None or args.n_times is None:
        raise ConfigurationError("need either --split-plan or both --n-stations and --n-times")
    return build_split_plan(
        world.station_ids,
        world.station_points,
        world.times,
        slots_per_day,
        args.n_stations,
        args.n_times,
        seed,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = KVConfig.load(args.config) if args.config else KVConfig({}, source="<defaults>")
    world_cfg = world_config_from_kv(cfg)
    seed = _resolved_seed(args, cfg)
    slots_per_day = cfg.int_("slots_per_day", 4)
    world = generate_station_world(world_cfg, child_rng(seed, "world"))
    out = Path(args.out)
    write_world_dir(out, world, seed)
    extra = KVConfig.load(out / "world.kv").entries
    extra["slots_per_day"] = slots_per_day
    write_kv(out / "world.kv", extra)
    write_manifest(out / "manifest.kv", "gen-data", {"seed": seed, **extra})
    min_dist = float(
        np.min(
            [
                np.min(np.linalg.norm(world.station_points - p, axis=1)[np.arange(len(world.station_points)) != i])
                for i, p in enumerate(world.station_points)
            ]
        )
    )
    print(
        f"wrote world with {world.station_ids.size} stations x {world.times.size} times to {out} "
        f"(min station separation {min_dist:.4f})"
    )
    return 0


def cmd_pretrain(args) -> int:
    cfg = KVConfig.load(args.config)
    kind = cfg.str_("kind")
    seed = _resolved_seed(args, cfg)
    train_cfg = _train_config_from_kv("pretrain", cfg, TrainConfig())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if kind == "gp":
        params = SEKernelParams(
            lengthscale=cfg.float_("kernel.lengthscale"),
            signal_std=cfg.float_("kernel.signal_std", 1.0),
            noise_std=cfg.float_("kernel.noise_std", 0.0),
        )
        model_cfg = model_config_from_file(cfg, "desk_1d")
        rng = child_rng(seed, "normalizer")
        sample = make_gp_tasks(params, 100, rng)
        values = np.concatenate([np.concatenate([t.y_context, t.y_target]) for t in sample])
        normalizer = fit_normalizer((GP_DOMAIN,), values)
        train_gp_model(
            model_cfg, train_cfg, params, normalizer, seed, "pretrain",
            cfg.int_("n_val_tasks", 128), out,
        )
    elif kind == "station":
        world, slots_per_day = _load_world_and_slots(cfg.str_("world"))
        model_cfg = model_config_from_file(cfg, "desk_2d")
        pretrain_station_model(
            model_cfg, train_cfg, world, slots_per_day, seed, cfg.int_("n_val_tasks", 128), out
        )
    else:
        raise ConfigurationError(f"config kind must be gp or station, got {kind!r}")
    write_manifest(
        Path(str(out) + ".manifest"), "pretrain", {"seed": seed, "config_path": args.config, **cfg.entries}
    )
    print(f"wrote checkpoint {out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = KVConfig.load(args.config)
    seed = _resolved_seed(args, cfg)
    model, normalizer, _ = ckpt_io.load_checkpoint(args.ckpt)
    ft_cfg = _train_config_from_kv("finetune", cfg, finetune_defaults())
    kind = cfg.str_("kind")
    if kind == "gp":
        params = SEKernelParams(
            lengthscale=cfg.float_("kernel.lengthscale"),
            signal_std=cfg.float_("kernel.signal_std", 1.0),
            noise_std=cfg.float_("kernel.noise_std", 0.0),
        )
        n_tasks = cfg.int_("n_tasks")
        rng = child_rng(seed, "ft", gp_condition_label(params), n_tasks, args.strategy, 0)
        train_tasks, val_tasks = gp_finetune_dataset(params, n_tasks, normalizer, rng)
        stream = _finetune_stream(train_tasks, child_rng(seed, "ft-stream", args.strategy))
    elif kind == "station":
        world, slots_per_day = _load_world_and_slots(cfg.str_("world"))
        data = StationData.from_world(world)
        plan = (
            read_split_plan(args.split_plan)
            if args.split_plan
            else build_split_plan(
                world.station_ids,
                world.station_points,
                world.times,
                slots_per_day,
                cfg.int_("n_stations"),
                cfg.int_("n_times"),
                seed,
            )
        )
        val_tasks = [normalizer.norm_task(make_val_task(data, t, plan)) for t in plan.val_times]
        stream = station_task_stream(data, plan, normalizer, child_rng(seed, "ft-stream", args.strategy))
    else:
        raise ConfigurationError(f"config kind must be gp or station, got {kind!r}")
    result = finetune(model, AdaptationStrategy(kind=args.strategy), stream, val_tasks, ft_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt_io.save_checkpoint(
        out,
        model,
        normalizer,
        meta={
            "seed_tag": f"finetune:{args.strategy}",
            "best_epoch": result.best_epoch,
            "best_val_nll": result.best_val_nll,
            "stop_reason": result.stop_reason,
            "source_checkpoint": args.ckpt,
        },
    )
    write_train_log(Path(str(out) + ".log.csv"), result.log)
    write_manifest(
        Path(str(out) + ".manifest"),
        "finetune",
        {"seed": seed, "strategy": args.strategy, "ckpt": args.ckpt, "config_path": args.config, **cfg.entries},
    )
    print(f"fine-tuned ({args.strategy}) -> {out}; best val NLL {result.best_val_nll:.4f} at epoch {result.best_epoch}")
    return 0


def _print_and_write_eval(records, out_path: str | None, manifest_entries, subcommand: str):
    for r in records:
        print(f"{r.strategy}: test NLL/point {r.test_nll:.6f}, test MAE {r.test_mae:.6f}")
    if out_path:
        write_results(out_path, records)
        write_manifest(Path(str(out_path) + ".manifest"), subcommand, manifest_entries)
        print(f"wrote {out_path}")


def cmd_evaluate(args) -> int:
    model, normalizer, _ = ckpt_io.load_checkpoint(args.ckpt)
    predictor = ModelPredictor(model, normalizer)
    records = []
    if args.kernel:
        params = parse_kernel_arg(args.kernel)
        seed = args.seed if args.seed is not None else 0
        tasks = make_gp_tasks(params, args.tasks, child_rng(seed, "eval-tasks"))
        cond = gp_condition_label(params)
        oracle_nll, oracle_mae = evaluate(OraclePredictor.for_kernel(params), tasks)
        nll, mae = evaluate(predictor, tasks)
        base = dict(kind="evaluate", condition=cond, oracle_nll=oracle_nll, n_tasks=args.tasks)
        records = [
            ResultRecord(strategy="model", replicate=0, test_nll=nll, test_mae=mae, **base),
            ResultRecord(strategy="oracle", replicate=0, test_nll=oracle_nll, test_mae=oracle_mae, **base),
        ]
    elif args.world:
        world, slots_per_day = _load_world_and_slots(args.world)
        seed = args.seed if args.seed is not None else 0
        plan = _plan_for(args, world, slots_per_day, seed)
        data = StationData.from_world(world)
        tasks = [make_test_task(data, t, plan) for t in plan.test_times]
        cond = station_condition_label(plan.n_stations, plan.n_times)
        oracle_nll, oracle_mae = evaluate(station_oracle(world), tasks)
        nll, mae = evaluate(predictor, tasks)
        base = dict(
            kind="evaluate", condition=cond, oracle_nll=oracle_nll,
            n_stations=plan.n_stations, n_times=plan.n_times,
        )
        records = [
            ResultRecord(strategy="model", replicate=0, test_nll=nll, test_mae=mae, **base),
            ResultRecord(strategy="oracle", replicate=0, test_nll=oracle_nll, test_mae=oracle_mae, **base),
        ]
    else:
        raise ConfigurationError("evaluate needs either --kernel or --world")
    _print_and_write_eval(
        records, args.out,
        {"ckpt": args.ckpt, "seed": args.seed or 0, "kernel": args.kernel or "", "world": args.world or ""},
        "evaluate",
    )
    return 0


def cmd_oracle(args) -> int:
    params = parse_kernel_arg(args.kernel)
    seed = args.seed if args.seed is not None else 0
    tasks = make_gp_tasks(params, args.tasks, child_rng(seed, "oracle-tasks"))
    nll, mae = evaluate(OraclePredictor.for_kernel(params), tasks)
    cond = gp_condition_label(params)
    records = [
        ResultRecord(
            kind="oracle", condition=cond, strategy="oracle", replicate=0,
            test_nll=nll, test_mae=mae, oracle_nll=nll, n_tasks=args.tasks,
        )
    ]
    print(f"mean oracle NLL over {args.tasks} tasks ({cond}): {nll:.6f} (MAE {mae:.6f})")
    if args.out:
        write_results(args.out, records)
        write_manifest(
            Path(str(args.out) + ".manifest"),
            "oracle",
            {"kernel": args.kernel, "tasks": args.tasks, "seed": seed},
        )
        print(f"wrote {args.out}")
    return 0


def cmd_experiment(args) -> int:
    if args.experiment_cmd == "presets":
        for name in ("shrink_l", "grow_l", "noise_change", "station_world"):
            spec = preset(name)
            print(f"# preset: {name}")
            for k, v in experiment_spec_to_kv(spec).items():
                if isinstance(v, (list, tuple)):
                    v = ",".join(str(x) for x in v)
                print(f"{k} = {v}")
            print()
        print(f"# also available: {', '.join(sorted(set(PRESETS) - {'shrink_l', 'grow_l', 'noise_change', 'station_world'}))}")
        return 0
    spec_arg = args.spec
    if spec_arg.endswith(".preset"):
        spec = preset(spec_arg[: -len(".preset")])
    else:
        spec = experiment_spec_from_kv(KVConfig.load(spec_arg))
    if args.seed is not None:
        spec = dataclasses.replace(spec, master_seed=args.seed)
    out = Path(args.out)
    records = run_experiment(spec, out, threads=args.threads)
    write_manifest(
        out / "manifest.kv",
        "experiment",
        {"spec_arg": spec_arg, "threads": args.threads, **experiment_spec_to_kv(spec)},
    )
    ok = sum(1 for r in records if r.status == "ok")
    print(f"wrote {len(records)} records ({ok} ok) to {out / 'results.csv'}")
    return 0


def cmd_diagnose_artefacts(args) -> int:
    model, normalizer, _ = ckpt_io.load_checkpoint(args.ckpt)
    world, slots_per_day = _load_world_and_slots(args.world)
    seed = args.seed if args.seed is not None else 0
    plan = _plan_for(args, world, slots_per_day, seed)
    data = StationData.from_world(world)
    rng = child_rng(seed, "artefact-tasks")
    pool = tuple(plan.train_stations) + tuple(plan.val_stations)
    tasks = []
    test_times = list(plan.test_times)
    for i in range(args.n_tasks):
        t = test_times[i % len(test_times)]
        present, _ = data.present(t, pool)
        n_ctx = context_size(rng.uniform(), present.size)
        ids = present[rng.permutation(present.size)[:n_ctx]]
        xc, yc = data.observations(t, ids)
        from sim2real_cnp.tasks import Task

        tasks.append(
            Task(time_id=int(t), x_context=xc, y_context=yc,
                 x_target=xc[:1], y_target=yc[:1], kind="test", aux=data.aux)
        )
    predictor = ModelPredictor(model, normalizer)
    scores = [
        artefact_score(predictor, task, args.probe_spacing, world.config.domain) for task in tasks
    ]
    out = Path(args.out)
    lines = ["task_index,time_id,score"]
    from sim2real_cnp.util import fmt_float

    for i, (task, s) in enumerate(zip(tasks, scores)):
        lines.append(f"{i},{task.time_id},{fmt_float(s)}")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(
        Path(str(out) + ".manifest"),
        "diagnose-artefacts",
        {
            "ckpt": args.ckpt, "world": args.world, "probe_spacing": args.probe_spacing,
            "n_tasks": args.n_tasks, "seed": seed,
            "n_stations": args.n_stations or 0, "n_times": args.n_times or 0,
        },
    )
    print(f"mean artefact score over {len(scores)} tasks: {float(np.mean(scores)):.6f}")
    print(f"wrote {out}")
    return 0


def cmd_split_plan(args) -> int:
    world, slots_per_day = _load_world_and_slots(args.world)
    seed = args.seed if args.seed is not None else 0
    plan = build_split_plan(
        world.station_ids, world.station_points, world.times, slots_per_day,
        args.n_stations, args.n_times, seed,
    )
    write_split_plan(args.out, plan)
    write_manifest(
        Path(str(args.out) + ".manifest"),
        "split-plan",
        {"world": args.world, "n_stations": args.n_stations, "n_times": args.n_times, "seed": seed},
    )
    print(f"wrote split plan {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="sim2real", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic station world", parents=[])
    p.add_argument("--config", help="key-value config with world.* fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train a model on sim data")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a pre-trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--strategy", required=True, choices=STRATEGIES)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split-plan", help="load a saved split plan instead of deriving one")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on held-out tasks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--kernel", help="GP eval: l=...,noise=...[,signal=...]")
    p.add_argument("--tasks", type=int, default=512)
    p.add_argument("--world", help="station eval: world directory")
    p.add_argument("--split-plan")
    p.add_argument("--n-stations", type=int)
    p.add_argument("--n-times", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="results CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle", help="exact GP posterior baseline on GP tasks")
    p.add_argument("--kernel", required=True, help="l=...,noise=...[,signal=...]")
    p.add_argument("--tasks", type=int, default=512)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="results CSV path")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("experiment", help="run or list experiment presets")
    esub = p.add_subparsers(dest="experiment_cmd", required=True)
    run_p = esub.add_parser("run", help="run an experiment spec")
    run_p.add_argument("--spec", required=True, help="spec file or <name>.preset")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--threads", type=int, default=1)
    run_p.add_argument("--seed", type=int, help="override the spec master seed")
    run_p.set_defaults(func=cmd_experiment)
    presets_p = esub.add_parser("presets", help="print the built-in presets")
    presets_p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("diagnose-artefacts", help="sub-resolution roughness of a model's mean")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--probe-spacing", type=float, required=True)
    p.add_argument("--n-tasks", type=int, default=50)
    p.add_argument("--split-plan")
    p.add_argument("--n-stations", type=int)
    p.add_argument("--n-times", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose_artefacts)

    p = sub.add_parser("split-plan", help="derive and save a split plan")
    p.add_argument("--world", required=True)
    p.add_argument("--n-stations", type=int, required=True)
    p.add_argument("--n-times", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split_plan)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigurationError, FileNotFoundError) as exc:
        # bad flags, config values or paths: usage-class failures
        print(f"sim2real: error: {exc}", file=sys.stderr)
        return 1
    except (DomainError, DegenerateCovarianceError, ValueError, RuntimeError, OSError) as exc:
        print(f"sim2real: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
