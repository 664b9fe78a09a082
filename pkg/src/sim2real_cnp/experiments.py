"""Declarative experiment harness: GP transfer grids (shrinking/growing
lengthscales, noise changes), the 2D station-world Sim2Real grid, baselines,
confidence intervals, and the sub-resolution artefact diagnostic.

Every run of an experiment is fully determined by its spec (including the
master seed): records can be regenerated byte-identically.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from sim2real_cnp import checkpoint as ckpt_io
from sim2real_cnp.fields import (
    SEKernelParams,
    StationWorld,
    StationWorldConfig,
    generate_station_world,
)
from sim2real_cnp.finetune import AdaptationStrategy, finetune, set_trainable
from sim2real_cnp.formats import KVConfig, write_kv, write_results, write_train_log
from sim2real_cnp.model import ConvCNP, ModelConfig, desk_1d, desk_2d
from sim2real_cnp.tasks import (
    SplitPlan,
    StationData,
    Task,
    build_split_plan,
    context_size,
    cycle_pool_sizes,
    cycle_slots,
    epoch_time_passes,
    make_gp_task,
    make_test_task,
    make_train_task,
    make_val_task,
    split_times,
)
from sim2real_cnp.train import (
    ModelPredictor,
    Normalizer,
    OraclePredictor,
    TrainConfig,
    TrainingDivergedError,
    evaluate,
    finetune_defaults,
    fit_normalizer,
    run_training,
)
from sim2real_cnp.model import NonFiniteLossError
from sim2real_cnp.util import ConfigurationError, child_rng

log = logging.getLogger(__name__)

GP_DOMAIN = (-2.0, 2.0)
GP_KINDS = ("shrink_l", "grow_l", "noise_change")
BASELINES = ("sim_only", "real_only", "oracle", "infinite_data")


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    master_seed: int = 0
    n_replicates: int = 5
    strategies: tuple[str, ...] = ("global", "film")
    baselines: tuple[str, ...] = ("sim_only", "oracle")
    model_config: ModelConfig = field(default_factory=desk_1d)
    pretrain_config: TrainConfig = field(default_factory=TrainConfig)
    finetune_config: TrainConfig = field(default_factory=finetune_defaults)
    model_seed: int = 0
    # GP transfer kinds
    sim_params: SEKernelParams | None = None
    real_params: tuple[SEKernelParams, ...] = ()
    n_tasks_grid: tuple[int, ...] = (16, 64, 256, 1024)
    n_test_tasks: int = 512
    n_val_tasks: int = 128
    # station world
    world: StationWorldConfig | None = None
    n_stations_grid: tuple[int, ...] = ()
    n_times_grid: tuple[int, ...] = ()
    slots_per_day: int = 4

    def __post_init__(self) -> None:
        if self.kind not in GP_KINDS + ("station_world",):
            raise ConfigurationError(f"unknown experiment kind {self.kind!r}")
        for b in self.baselines:
            if b not in BASELINES:
                raise ConfigurationError(f"unknown baseline {b!r}")
        if self.kind in GP_KINDS and (self.sim_params is None or not self.real_params):
            raise ConfigurationError(f"{self.kind} needs sim_params and real_params")
        if self.kind == "station_world" and (
            self.world is None or not self.n_stations_grid or not self.n_times_grid
        ):
            raise ConfigurationError("station_world needs world and condition grids")


@dataclass(frozen=True)
class ResultRecord:
    kind: str
    condition: str
    strategy: str
    replicate: int
    test_nll: float = math.nan
    test_mae: float = math.nan
    oracle_nll: float | None = None
    n_tasks: int | None = None
    n_stations: int | None = None
    n_times: int | None = None
    status: str = "ok"

    def as_row(self) -> list[str]:
        from sim2real_cnp.util import fmt_float

        opt_int = lambda v: "" if v is None else str(v)
        return [
            self.kind,
            self.condition,
            self.strategy,
            opt_int(self.n_tasks),
            opt_int(self.n_stations),
            opt_int(self.n_times),
            str(self.replicate),
            fmt_float(self.test_nll),
            fmt_float(self.test_mae),
            "" if self.oracle_nll is None else fmt_float(self.oracle_nll),
            self.status,
        ]


def record_sort_key(r: ResultRecord):
    return (r.kind, r.condition, r.strategy, r.n_tasks or 0, r.n_stations or 0, r.n_times or 0, r.replicate)


def read_result_records(path: Path | str) -> list[ResultRecord]:
    """Load a results CSV back into typed records."""
    from sim2real_cnp.formats import read_results

    out = []
    for row in read_results(path):
        opt_int = lambda v: None if v == "" else int(v)
        out.append(
            ResultRecord(
                kind=row["kind"],
                condition=row["condition"],
                strategy=row["strategy"],
                replicate=int(row["replicate"]),
                test_nll=float(row["test_nll"]),
                test_mae=float(row["test_mae"]),
                oracle_nll=None if row["oracle_nll"] == "" else float(row["oracle_nll"]),
                n_tasks=opt_int(row["n_tasks"]),
                n_stations=opt_int(row["n_stations"]),
                n_times=opt_int(row["n_times"]),
                status=row["status"],
            )
        )
    return out


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def preset(name: str) -> ExperimentSpec:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return PRESETS[name]()


def _shrink_l() -> ExperimentSpec:
    return ExperimentSpec(
        kind="shrink_l",
        sim_params=SEKernelParams(lengthscale=0.25, noise_std=0.05),
        real_params=tuple(
            SEKernelParams(lengthscale=l, noise_std=0.05) for l in (0.2, 0.1, 0.05)
        ),
    )


def _grow_l() -> ExperimentSpec:
    return ExperimentSpec(
        kind="grow_l",
        sim_params=SEKernelParams(lengthscale=0.2, noise_std=0.05),
        real_params=tuple(
            SEKernelParams(lengthscale=l, noise_std=0.05) for l in (0.25, 0.5, 1.0)
        ),
    )


def _noise_change() -> ExperimentSpec:
    return ExperimentSpec(
        kind="noise_change",
        sim_params=SEKernelParams(lengthscale=0.25, noise_std=0.05),
        real_params=tuple(
            SEKernelParams(lengthscale=0.25, noise_std=s) for s in (0.0125, 0.025, 0.1, 0.2)
        ),
    )


def required_calendar_cycles(n_times_max: int, slots_per_day: int) -> int:
    """Smallest cycle count whose train and val pools cover an 80/20 split
    of n_times_max."""
    train_per, val_per, _ = cycle_pool_sizes(slots_per_day)
    n_train = int(np.floor(0.8 * n_times_max + 0.5))
    n_val = n_times_max - n_train
    return max(1, math.ceil(n_train / train_per), math.ceil(n_val / val_per))


def _station_world(n_times_grid: tuple[int, ...] = (16, 80, 400)) -> ExperimentSpec:
    slots_per_day = 4
    cycles = required_calendar_cycles(max(n_times_grid), slots_per_day)
    world = StationWorldConfig(n_times=cycles * cycle_slots(slots_per_day))
    return ExperimentSpec(
        kind="station_world",
        model_config=desk_2d(),
        baselines=("sim_only", "real_only", "oracle"),
        n_replicates=3,
        world=world,
        n_stations_grid=(20, 100, 500),
        n_times_grid=n_times_grid,
        slots_per_day=slots_per_day,
    )


PRESETS = {
    "shrink_l": _shrink_l,
    "grow_l": _grow_l,
    "noise_change": _noise_change,
    "station_world": _station_world,
    "station_world_full": lambda: _station_world((16, 80, 400, 2000, 10000)),
}


# ---------------------------------------------------------------------------
# Aggregation and diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CIStats:
    mean: float
    ci_low: float | None
    ci_high: float | None
    n: int


def aggregate_ci(values) -> CIStats:
    """Mean with a 1.96 * sem 95% interval; CI bounds are None for a single
    value."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ConfigurationError("aggregate_ci needs at least one value")
    mean = float(v.mean())
    if v.size < 2:
        return CIStats(mean=mean, ci_low=None, ci_high=None, n=int(v.size))
    half = 1.96 * float(v.std(ddof=1)) / math.sqrt(v.size)
    return CIStats(mean=mean, ci_low=mean - half, ci_high=mean + half, n=int(v.size))


def group_records(records, keys=("kind", "condition", "strategy", "n_tasks", "n_stations", "n_times")):
    """Group result records by identity keys; never mixes strategies."""
    groups: dict[tuple, list[ResultRecord]] = {}
    for r in records:
        key = tuple(getattr(r, k) for k in keys)
        groups.setdefault(key, []).append(r)
    return groups


def artefact_score(
    predictor,
    task: Task,
    probe_spacing: float,
    domain: tuple[tuple[float, float], ...],
) -> float:
    """Mean absolute discrete second difference of the predictive mean,
    per probe_spacing^2, on axis-aligned probe triples around each context
    point. Higher means rougher behaviour below the probe scale. Probe
    triples that leave the domain are skipped.
    """
    pts = np.asarray(task.x_context, dtype=np.float64)
    d = pts.shape[1]
    lo = np.array([b[0] for b in domain])
    hi = np.array([b[1] for b in domain])
    triples = []
    for x in pts:
        for a in range(d):
            offs = np.zeros(d)
            offs[a] = probe_spacing
            trio = np.stack([x - offs, x, x + offs])
            if np.all(trio >= lo) and np.all(trio <= hi):
                triples.append(trio)
    if not triples:
        raise ConfigurationError("no probe triple fits inside the domain")
    probes = np.concatenate(triples, axis=0)
    probe_task = Task(
        time_id=task.time_id,
        x_context=task.x_context,
        y_context=task.y_context,
        x_target=probes,
        y_target=np.zeros(probes.shape[0]),
        kind=task.kind,
        aux=task.aux,
    )
    mu = np.asarray(predictor(probe_task).means, dtype=np.float64).reshape(-1, 3)
    second = np.abs(mu[:, 0] - 2 * mu[:, 1] + mu[:, 2]) / probe_spacing**2
    return float(second.mean())


# ---------------------------------------------------------------------------
# GP transfer experiments
# ---------------------------------------------------------------------------


def gp_condition_label(p: SEKernelParams) -> str:
    return f"l={p.lengthscale:g},noise={p.noise_std:g}"


def make_gp_tasks(params: SEKernelParams, n: int, rng: np.random.Generator) -> list[Task]:
    return [make_gp_task(params, rng, domain=GP_DOMAIN) for _ in range(n)]


def gp_normalizer(spec: ExperimentSpec) -> Normalizer:
    rng = child_rng(spec.master_seed, "normalizer")
    sample = make_gp_tasks(spec.sim_params, 100, rng)
    values = np.concatenate([np.concatenate([t.y_context, t.y_target]) for t in sample])
    return fit_normalizer((GP_DOMAIN,), values)


def _gp_stream(params: SEKernelParams, normalizer: Normalizer, rng: np.random.Generator):
    while True:
        yield normalizer.norm_task(make_gp_task(params, rng, domain=GP_DOMAIN))


def _finetune_stream(train_tasks: list[Task], rng: np.random.Generator):
    while True:
        for i in rng.permutation(len(train_tasks)):
            yield train_tasks[int(i)]


def _save_trained(ckpt_path: Path, model: ConvCNP, normalizer: Normalizer, result, seed_tag: str) -> None:
    ckpt_io.save_checkpoint(
        ckpt_path,
        model,
        normalizer,
        meta={
            "seed_tag": seed_tag,
            "best_epoch": result.best_epoch,
            "best_val_nll": result.best_val_nll,
            "stop_reason": result.stop_reason,
        },
    )
    write_train_log(Path(str(ckpt_path) + ".log.csv"), result.log)


def train_gp_model(
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: SEKernelParams,
    normalizer: Normalizer,
    master_seed: int,
    seed_tag: str,
    n_val_tasks: int = 128,
    ckpt_path: Path | None = None,
) -> ConvCNP:
    """Train a fresh model on endless tasks from one GP (pre-training and the
    infinite-data baseline); cached at ckpt_path when given."""
    if ckpt_path is not None and ckpt_path.exists():
        model, _, _ = ckpt_io.load_checkpoint(ckpt_path)
        return model
    init_rng = child_rng(master_seed, seed_tag, "init")
    model = ConvCNP(model_config, init_seed=int(init_rng.integers(2**31)))
    set_trainable(model, "pretrain" if model_config.film_enabled else "global")
    stream = _gp_stream(params, normalizer, child_rng(master_seed, seed_tag, "tasks"))
    val = [
        normalizer.norm_task(t)
        for t in make_gp_tasks(params, n_val_tasks, child_rng(master_seed, seed_tag, "val"))
    ]
    result = run_training(model, stream, val, train_config)
    model.load_state_dict(result.best_state)
    if ckpt_path is not None:
        _save_trained(ckpt_path, model, normalizer, result, seed_tag)
    return model


def gp_finetune_dataset(
    params: SEKernelParams, n_tasks: int, normalizer: Normalizer, rng: np.random.Generator
) -> tuple[list[Task], list[Task]]:
    """Draw one fine-tuning dataset and split it 80/20 into train and
    validation tasks (at least one validation task)."""
    dataset = [normalizer.norm_task(t) for t in make_gp_tasks(params, n_tasks, rng)]
    n_val = max(1, int(math.floor(0.2 * n_tasks + 0.5)))
    return dataset[: n_tasks - n_val], dataset[n_tasks - n_val :]


def _run_gp_experiment(spec: ExperimentSpec, out_dir: Path, threads: int) -> list[ResultRecord]:
    normalizer = gp_normalizer(spec)
    pretrain_path = out_dir / "pretrain.ckpt"
    train_gp_model(
        spec.model_config,
        spec.pretrain_config,
        spec.sim_params,
        normalizer,
        spec.master_seed,
        "pretrain",
        spec.n_val_tasks,
        pretrain_path,
    )

    def fresh_pretrained() -> ConvCNP:
        model, _, _ = ckpt_io.load_checkpoint(pretrain_path)
        return model

    records: list[ResultRecord] = []
    jobs = []
    for real in spec.real_params:
        cond = gp_condition_label(real)
        test_tasks = make_gp_tasks(
            real, spec.n_test_tasks, child_rng(spec.master_seed, "test", cond)
        )
        oracle_nll, oracle_mae = evaluate(OraclePredictor.for_kernel(real), test_tasks)
        base = dict(kind=spec.kind, condition=cond, oracle_nll=oracle_nll)

        if "oracle" in spec.baselines:
            records.append(
                ResultRecord(strategy="oracle", replicate=0, test_nll=oracle_nll, test_mae=oracle_mae, **base)
            )
        if "sim_only" in spec.baselines:
            nll, mae = evaluate(ModelPredictor(fresh_pretrained(), normalizer), test_tasks)
            records.append(
                ResultRecord(strategy="sim_only", replicate=0, test_nll=nll, test_mae=mae, **base)
            )
        if "infinite_data" in spec.baselines:
            jobs.append(("infinite", real, cond, None, None, 0, test_tasks, base))
        for n_tasks in spec.n_tasks_grid:
            for rep in range(spec.n_replicates):
                if "real_only" in spec.baselines:
                    jobs.append(("real_only", real, cond, n_tasks, None, rep, test_tasks, base))
                for strategy in spec.strategies:
                    jobs.append(("finetune", real, cond, n_tasks, strategy, rep, test_tasks, base))

    def run_job(job) -> ResultRecord:
        mode, real, cond, n_tasks, strategy, rep, test_tasks, base = job
        try:
            if mode == "infinite":
                model = train_gp_model(
                    spec.model_config,
                    spec.pretrain_config,
                    real,
                    normalizer,
                    spec.master_seed,
                    f"infinite:{cond}",
                    spec.n_val_tasks,
                )
                nll, mae = evaluate(ModelPredictor(model, normalizer), test_tasks)
                return ResultRecord(strategy="infinite_data", replicate=0, test_nll=nll, test_mae=mae, **base)
            rng = child_rng(spec.master_seed, "ft", cond, n_tasks, strategy or "real_only", rep)
            train_tasks, val_tasks = gp_finetune_dataset(real, n_tasks, normalizer, rng)
            stream = _finetune_stream(train_tasks, child_rng(spec.master_seed, "ft-stream", cond, n_tasks, strategy or "real_only", rep))
            if mode == "real_only":
                init_rng = child_rng(spec.master_seed, "real-only-init", cond, n_tasks, rep)
                model = ConvCNP(spec.model_config, init_seed=int(init_rng.integers(2**31)))
                set_trainable(model, "global")
                cfg = replace(spec.finetune_config, learning_rate=spec.pretrain_config.learning_rate)
                result = run_training(model, stream, val_tasks, cfg)
                model.load_state_dict(result.best_state)
                nll, mae = evaluate(ModelPredictor(model, normalizer), test_tasks)
                return ResultRecord(strategy="real_only", replicate=rep, n_tasks=n_tasks, test_nll=nll, test_mae=mae, **base)
            model = fresh_pretrained()
            finetune(model, AdaptationStrategy(kind=strategy), stream, val_tasks, spec.finetune_config)
            nll, mae = evaluate(ModelPredictor(model, normalizer), test_tasks)
            return ResultRecord(strategy=strategy, replicate=rep, n_tasks=n_tasks, test_nll=nll, test_mae=mae, **base)
        except (TrainingDivergedError, NonFiniteLossError) as exc:
            log.warning("job %s failed: %s", job[:6], exc)
            return ResultRecord(
                strategy=strategy or mode, replicate=rep, n_tasks=n_tasks, status="failed", **base
            )

    records.extend(_run_jobs(jobs, run_job, threads))
    return sorted(records, key=record_sort_key)


def _run_jobs(jobs, run_job, threads: int):
    if threads <= 1:
        return [run_job(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run_job, jobs))


# ---------------------------------------------------------------------------
# Station-world experiment
# ---------------------------------------------------------------------------


def station_condition_label(n_stations: int, n_times: int) -> str:
    return f"stations={n_stations},times={n_times}"


def sim_grid_task(world: StationWorld, time_index: int, rng: np.random.Generator) -> Task:
    """Pre-training task from one sim snapshot: grid cells split into
    context and target with the same clamped context-size law as stations."""
    points = world.sim_grid.node_points()
    values = world.sim_fields[time_index].ravel()
    n = points.shape[0]
    n_ctx = context_size(rng.uniform(), n)
    perm = rng.permutation(n)
    ci, ti = perm[:n_ctx], perm[n_ctx:]
    return Task(
        time_id=int(world.times[time_index]),
        x_context=points[ci],
        y_context=values[ci],
        x_target=points[ti],
        y_target=values[ti],
        kind="train",
        aux=(world.aux_field,),
    )


def _sim_stream(world: StationWorld, train_times: tuple[int, ...], normalizer: Normalizer, rng):
    index_of = {int(t): i for i, t in enumerate(world.times)}
    for t in epoch_time_passes(train_times, rng):
        yield normalizer.norm_task(sim_grid_task(world, index_of[t], rng))


def station_normalizer(world: StationWorld, train_times: tuple[int, ...]) -> Normalizer:
    index_of = {int(t): i for i, t in enumerate(world.times)}
    values = np.stack([world.sim_fields[index_of[t]] for t in train_times])
    return fit_normalizer(world.config.domain, values.ravel())


def pretrain_station_model(
    model_config: ModelConfig,
    train_config: TrainConfig,
    world: StationWorld,
    slots_per_day: int,
    master_seed: int,
    n_val_tasks: int = 128,
    ckpt_path: Path | None = None,
) -> tuple[ConvCNP, Normalizer]:
    """Shared sim pre-training on snapshot interpolation at cycle-train
    times, validated on cycle-validation times."""
    train_pool, val_pool, _ = split_times(world.times, slots_per_day)
    normalizer = station_normalizer(world, train_pool)
    if ckpt_path is not None and ckpt_path.exists():
        model, norm, _ = ckpt_io.load_checkpoint(ckpt_path)
        return model, norm
    init_rng = child_rng(master_seed, "pretrain", "init")
    model = ConvCNP(model_config, init_seed=int(init_rng.integers(2**31)))
    set_trainable(model, "pretrain" if model_config.film_enabled else "global")
    stream = _sim_stream(world, train_pool, normalizer, child_rng(master_seed, "pretrain", "tasks"))
    val_rng = child_rng(master_seed, "pretrain", "val")
    index_of = {int(t): i for i, t in enumerate(world.times)}
    val_times = list(val_pool)[:n_val_tasks]
    val = [normalizer.norm_task(sim_grid_task(world, index_of[t], val_rng)) for t in val_times]
    result = run_training(model, stream, val, train_config)
    model.load_state_dict(result.best_state)
    if ckpt_path is not None:
        _save_trained(ckpt_path, model, normalizer, result, "pretrain")
    return model, normalizer


def station_task_stream(data: StationData, plan: SplitPlan, normalizer: Normalizer, rng):
    """Endless training tasks: each pass visits every training time once."""
    for t in epoch_time_passes(plan.train_times, rng):
        task = make_train_task(data, t, plan.train_stations, rng)
        if task is not None:
            yield normalizer.norm_task(task)


def station_oracle(world: StationWorld) -> OraclePredictor:
    return OraclePredictor(
        [world.config.long_component, world.config.short_component],
        world.config.station_noise_std,
    )


def _run_station_experiment(spec: ExperimentSpec, out_dir: Path, threads: int) -> list[ResultRecord]:
    world = generate_station_world(spec.world, child_rng(spec.master_seed, "world"))
    data = StationData.from_world(world)
    model, normalizer = pretrain_station_model(
        spec.model_config,
        spec.pretrain_config,
        world,
        spec.slots_per_day,
        spec.master_seed,
        spec.n_val_tasks,
        out_dir / "pretrain.ckpt",
    )

    def fresh_pretrained() -> ConvCNP:
        m, _, _ = ckpt_io.load_checkpoint(out_dir / "pretrain.ckpt")
        return m

    records: list[ResultRecord] = []
    jobs = []
    for n_stations in spec.n_stations_grid:
        for n_times in spec.n_times_grid:
            cond = station_condition_label(n_stations, n_times)
            plan = build_split_plan(
                world.station_ids,
                world.station_points,
                world.times,
                spec.slots_per_day,
                n_stations,
                n_times,
                spec.master_seed,
            )
            test_tasks = [make_test_task(data, t, plan) for t in plan.test_times]
            val_tasks = [normalizer.norm_task(make_val_task(data, t, plan)) for t in plan.val_times]
            oracle_nll, oracle_mae = evaluate(station_oracle(world), test_tasks)
            base = dict(
                kind=spec.kind, condition=cond, oracle_nll=oracle_nll,
                n_stations=n_stations, n_times=n_times,
            )
            if "oracle" in spec.baselines:
                records.append(
                    ResultRecord(strategy="oracle", replicate=0, test_nll=oracle_nll, test_mae=oracle_mae, **base)
                )
            if "sim_only" in spec.baselines:
                nll, mae = evaluate(ModelPredictor(fresh_pretrained(), normalizer), test_tasks)
                records.append(
                    ResultRecord(strategy="sim_only", replicate=0, test_nll=nll, test_mae=mae, **base)
                )
            for rep in range(spec.n_replicates):
                if "real_only" in spec.baselines:
                    jobs.append(("real_only", cond, plan, None, rep, test_tasks, val_tasks, base))
                for strategy in spec.strategies:
                    jobs.append(("finetune", cond, plan, strategy, rep, test_tasks, val_tasks, base))

    def save_adapted(m: ConvCNP, cond: str, strategy: str, rep: int) -> None:
        name = cond.replace("=", "").replace(",", "_")
        ckpt_dir = out_dir / "ckpts"
        ckpt_dir.mkdir(exist_ok=True)
        ckpt_io.save_checkpoint(ckpt_dir / f"{name}_{strategy}_r{rep}.ckpt", m, normalizer)

    def run_job(job) -> ResultRecord:
        mode, cond, plan, strategy, rep, test_tasks, val_tasks, base = job
        try:
            rng = child_rng(spec.master_seed, "ft", cond, strategy or "real_only", rep)
            stream = station_task_stream(data, plan, normalizer, rng)
            if mode == "real_only":
                init_rng = child_rng(spec.master_seed, "real-only-init", cond, rep)
                m = ConvCNP(spec.model_config, init_seed=int(init_rng.integers(2**31)))
                set_trainable(m, "global")
                cfg = replace(spec.finetune_config, learning_rate=spec.pretrain_config.learning_rate)
                result = run_training(m, stream, val_tasks, cfg)
                m.load_state_dict(result.best_state)
                save_adapted(m, cond, "real_only", rep)
                nll, mae = evaluate(ModelPredictor(m, normalizer), test_tasks)
                return ResultRecord(strategy="real_only", replicate=rep, test_nll=nll, test_mae=mae, **base)
            m = fresh_pretrained()
            finetune(m, AdaptationStrategy(kind=strategy), stream, val_tasks, spec.finetune_config)
            save_adapted(m, cond, strategy, rep)
            nll, mae = evaluate(ModelPredictor(m, normalizer), test_tasks)
            return ResultRecord(strategy=strategy, replicate=rep, test_nll=nll, test_mae=mae, **base)
        except (TrainingDivergedError, NonFiniteLossError) as exc:
            log.warning("station job %s failed: %s", job[:5], exc)
            return ResultRecord(strategy=strategy or mode, replicate=rep, status="failed", **base)

    records.extend(_run_jobs(jobs, run_job, threads))
    return sorted(records, key=record_sort_key)


# ---------------------------------------------------------------------------
# Spec files
# ---------------------------------------------------------------------------


def _train_config_to_kv(prefix: str, cfg: TrainConfig) -> dict[str, object]:
    from dataclasses import asdict

    return {f"{prefix}.{k}": v for k, v in asdict(cfg).items()}


def _train_config_from_kv(prefix: str, cfg: KVConfig, default: TrainConfig) -> TrainConfig:
    from dataclasses import asdict

    kwargs = {}
    for k, v in asdict(default).items():
        key = f"{prefix}.{k}"
        if not cfg.has(key):
            kwargs[k] = v
        elif isinstance(v, int):
            kwargs[k] = cfg.int_(key)
        else:
            kwargs[k] = cfg.float_(key)
    return TrainConfig(**kwargs)


def experiment_spec_to_kv(spec: ExperimentSpec) -> dict[str, object]:
    from sim2real_cnp.checkpoint import model_config_to_kv

    out: dict[str, object] = {
        "kind": spec.kind,
        "master_seed": spec.master_seed,
        "n_replicates": spec.n_replicates,
        "strategies": spec.strategies,
        "baselines": spec.baselines,
        "model_seed": spec.model_seed,
    }
    out.update(model_config_to_kv(spec.model_config))
    out.update(_train_config_to_kv("pretrain", spec.pretrain_config))
    out.update(_train_config_to_kv("finetune", spec.finetune_config))
    if spec.kind in GP_KINDS:
        out["sim.lengthscale"] = spec.sim_params.lengthscale
        out["sim.signal_std"] = spec.sim_params.signal_std
        out["sim.noise_std"] = spec.sim_params.noise_std
        out["real.lengthscale"] = [p.lengthscale for p in spec.real_params]
        out["real.signal_std"] = [p.signal_std for p in spec.real_params]
        out["real.noise_std"] = [p.noise_std for p in spec.real_params]
        out["n_tasks_grid"] = spec.n_tasks_grid
        out["n_test_tasks"] = spec.n_test_tasks
        out["n_val_tasks"] = spec.n_val_tasks
    else:
        from sim2real_cnp.formats import world_config_to_kv

        out.update(world_config_to_kv(spec.world))
        out["n_stations_grid"] = spec.n_stations_grid
        out["n_times_grid"] = spec.n_times_grid
        out["slots_per_day"] = spec.slots_per_day
        out["n_val_tasks"] = spec.n_val_tasks
    return out


def experiment_spec_from_kv(cfg: KVConfig) -> ExperimentSpec:
    from sim2real_cnp.checkpoint import model_config_from_kv

    kind = cfg.str_("kind")
    kwargs: dict[str, object] = {
        "kind": kind,
        "master_seed": cfg.int_("master_seed", 0),
        "n_replicates": cfg.int_("n_replicates", 5),
        "strategies": tuple(cfg.str_list("strategies", ["global", "film"])),
        "baselines": tuple(cfg.str_list("baselines", ["sim_only", "oracle"])),
        "model_seed": cfg.int_("model_seed", 0),
        "model_config": model_config_from_kv(cfg),
        "pretrain_config": _train_config_from_kv("pretrain", cfg, TrainConfig()),
        "finetune_config": _train_config_from_kv("finetune", cfg, finetune_defaults()),
    }
    if kind in GP_KINDS:
        kwargs["sim_params"] = SEKernelParams(
            lengthscale=cfg.float_("sim.lengthscale"),
            signal_std=cfg.float_("sim.signal_std", 1.0),
            noise_std=cfg.float_("sim.noise_std", 0.0),
        )
        ls = cfg.float_list("real.lengthscale")
        ss = cfg.float_list("real.signal_std", [1.0] * len(ls))
        ns = cfg.float_list("real.noise_std", [0.0] * len(ls))
        kwargs["real_params"] = tuple(
            SEKernelParams(lengthscale=l, signal_std=s, noise_std=n) for l, s, n in zip(ls, ss, ns)
        )
        kwargs["n_tasks_grid"] = tuple(cfg.int_list("n_tasks_grid", [16, 64, 256, 1024]))
        kwargs["n_test_tasks"] = cfg.int_("n_test_tasks", 512)
        kwargs["n_val_tasks"] = cfg.int_("n_val_tasks", 128)
    else:
        from sim2real_cnp.formats import world_config_from_kv

        kwargs["world"] = world_config_from_kv(cfg)
        kwargs["n_stations_grid"] = tuple(cfg.int_list("n_stations_grid"))
        kwargs["n_times_grid"] = tuple(cfg.int_list("n_times_grid"))
        kwargs["slots_per_day"] = cfg.int_("slots_per_day", 4)
        kwargs["n_val_tasks"] = cfg.int_("n_val_tasks", 128)
    return ExperimentSpec(**kwargs)


def run_experiment(spec: ExperimentSpec, out_dir: Path | str, threads: int = 1) -> list[ResultRecord]:
    """Execute a spec end to end; writes records to <out_dir>/results.csv.

    Exactly one pre-training run is shared across all conditions and
    replicates (cached as <out_dir>/pretrain.ckpt).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_kv(out_dir / "spec.kv", experiment_spec_to_kv(spec))
    if spec.kind in GP_KINDS:
        records = _run_gp_experiment(spec, out_dir, threads)
    else:
        records = _run_station_experiment(spec, out_dir, threads)
    write_results(out_dir / "results.csv", records)
    return records
