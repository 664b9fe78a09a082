"""Station/time splitting and context-target task sampling.

Splits are leakage-safe: test stations are set aside by farthest-point
sampling before any training split, time blocks of different roles are
separated by two discarded days, and station/time subsets are nested across
sizes via fixed master shuffles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from sim2real_cnp.fields import (
    GriddedField,
    SampledField,
    SEKernelParams,
    StationWorld,
    as_points,
    sample_gp_field,
)
from sim2real_cnp.util import ConfigurationError, child_rng

log = logging.getLogger(__name__)

# Cycle pattern in days: train, discard, val, discard, test, discard.
TRAIN_DAYS = 19
VAL_DAYS = 2
TEST_DAYS = 2.5
GAP_DAYS = 2


@dataclass(frozen=True)
class Task:
    """One interpolation problem: predict target values from context values."""

    time_id: int
    x_context: np.ndarray  # [n, d]
    y_context: np.ndarray  # [n]
    x_target: np.ndarray  # [m, d]
    y_target: np.ndarray  # [m]
    kind: str = "train"  # train | val | test | gp
    aux: tuple[GriddedField, ...] = ()
    context_ids: np.ndarray | None = None
    target_ids: np.ndarray | None = None
    missing_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class SplitPlan:
    """A full station/time split for one (N_stations, N_times) setting."""

    train_stations: tuple[int, ...]
    val_stations: tuple[int, ...]
    test_stations: tuple[int, ...]
    train_times: tuple[int, ...]
    val_times: tuple[int, ...]
    test_times: tuple[int, ...]
    n_stations: int
    n_times: int
    master_seed: int
    slots_per_day: int


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_stations(
    all_station_ids: np.ndarray | list[int], n_stations: int, master_seed: int
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """First n_stations of the master shuffle, split 80/20 train/validation.

    The selection is a prefix of one fixed shuffle, so smaller settings are
    subsets of larger ones under the same seed.
    """
    ids = np.asarray(all_station_ids, dtype=int)
    if n_stations > ids.size:
        raise ConfigurationError(f"n_stations={n_stations} exceeds pool of {ids.size}")
    order = child_rng(master_seed, "stations").permutation(ids.size)
    chosen = ids[order][:n_stations]
    n_train = _round_half_up(0.8 * n_stations)
    return tuple(int(s) for s in chosen[:n_train]), tuple(int(s) for s in chosen[n_train:])


def _test_block_slots(slots_per_day: int) -> int:
    # 2 full days plus the first half of the next day's slots.
    return 2 * slots_per_day + int(np.ceil(slots_per_day / 2))


def cycle_pool_sizes(slots_per_day: int) -> tuple[int, int, int]:
    """Train/val/test slots contributed by one full cycle."""
    return TRAIN_DAYS * slots_per_day, VAL_DAYS * slots_per_day, _test_block_slots(slots_per_day)


def cycle_slots(slots_per_day: int) -> int:
    """Total slots in one cycle, including the three discard gaps."""
    train, val, test = cycle_pool_sizes(slots_per_day)
    return train + val + test + 3 * GAP_DAYS * slots_per_day


def split_times(
    calendar: np.ndarray | list[int], slots_per_day: int
) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
    """Assign calendar slots to train/val/test by the repeating day cycle
    19 train / 2 discard / 2 val / 2 discard / 2.5 test / 2 discard.

    Partial trailing cycles are truncated. Deterministic.
    """
    cal = np.asarray(calendar, dtype=int)
    blocks = [
        ("train", TRAIN_DAYS * slots_per_day),
        ("discard", GAP_DAYS * slots_per_day),
        ("val", VAL_DAYS * slots_per_day),
        ("discard", GAP_DAYS * slots_per_day),
        ("test", _test_block_slots(slots_per_day)),
        ("discard", GAP_DAYS * slots_per_day),
    ]
    cycle = sum(n for _, n in blocks)
    if cal.size < cycle:
        raise ConfigurationError(
            f"calendar of {cal.size} slots is shorter than one full cycle of {cycle}"
        )
    out: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    pos = 0
    while pos < cal.size:
        for role, n in blocks:
            chunk = cal[pos : pos + n]
            if role != "discard":
                out[role].extend(int(t) for t in chunk)
            pos += n
            if pos >= cal.size:
                break
    return tuple(out["train"]), tuple(out["val"]), tuple(out["test"])


def subsample_times(
    pool: tuple[int, ...] | list[int], n_times: int, seed: int
) -> tuple[int, ...]:
    """Fixed random subset of a time pool, nested across sizes (prefix of
    one master shuffle)."""
    ids = np.asarray(pool, dtype=int)
    if n_times > ids.size:
        raise ConfigurationError(f"n_times={n_times} exceeds pool of {ids.size}")
    order = child_rng(seed, "times").permutation(ids.size)
    return tuple(int(t) for t in ids[order][:n_times])


def farthest_point_sample(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of k geographically spread points (greedy farthest-point).

    Starts from the point farthest from the centroid; deterministic.
    """
    pts = as_points(points)
    centroid = pts.mean(axis=0)
    chosen = [int(np.argmax(np.linalg.norm(pts - centroid, axis=1)))]
    min_dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.asarray(chosen, dtype=int)


def build_split_plan(
    station_ids: np.ndarray,
    station_points: np.ndarray,
    calendar: np.ndarray,
    slots_per_day: int,
    n_stations: int,
    n_times: int,
    master_seed: int,
    test_fraction: float = 0.1,
) -> SplitPlan:
    """Construct the full plan for one (n_stations, n_times) setting.

    Test stations (test_fraction of the pool, farthest-point sampled) come
    off the top before the train/val master shuffle. Train and validation
    times are subsampled from their own cycle blocks so every cross-split
    pair of times keeps the two-day gap.
    """
    ids = np.asarray(station_ids, dtype=int)
    n_test_stations = _round_half_up(test_fraction * ids.size)
    test_idx = farthest_point_sample(station_points, n_test_stations)
    test_stations = tuple(int(s) for s in ids[test_idx])
    remaining = np.array([s for s in ids if s not in set(test_stations)], dtype=int)

    train_stations, val_stations = split_stations(remaining, n_stations, master_seed)

    train_pool, val_pool, test_times = split_times(calendar, slots_per_day)
    n_train_t = _round_half_up(0.8 * n_times)
    n_val_t = n_times - n_train_t
    train_times = subsample_times(train_pool, n_train_t, master_seed)
    val_times = subsample_times(val_pool, n_val_t, master_seed)

    return SplitPlan(
        train_stations=train_stations,
        val_stations=val_stations,
        test_stations=test_stations,
        train_times=train_times,
        val_times=val_times,
        test_times=test_times,
        n_stations=n_stations,
        n_times=n_times,
        master_seed=master_seed,
        slots_per_day=slots_per_day,
    )


# ---------------------------------------------------------------------------
# Station data access
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StationData:
    """Array-backed station observations: values[t, s] is NaN when missing."""

    station_ids: np.ndarray  # [S]
    station_points: np.ndarray  # [S, d]
    times: np.ndarray  # [T]
    values: np.ndarray  # [T, S]
    aux: tuple[GriddedField, ...] = ()

    def __post_init__(self) -> None:
        if self.values.shape != (self.times.size, self.station_ids.size):
            raise ConfigurationError("values must be shaped [n_times, n_stations]")

    @classmethod
    def from_world(cls, world: StationWorld) -> "StationData":
        return cls(
            station_ids=world.station_ids,
            station_points=world.station_points,
            times=world.times,
            values=world.station_values,
            aux=(world.aux_field,),
        )

    def _row(self, time_id: int) -> np.ndarray:
        t = np.flatnonzero(self.times == time_id)
        if t.size == 0:
            raise ConfigurationError(f"unknown time_id {time_id}")
        return self.values[int(t[0])]

    def present(self, time_id: int, station_ids) -> tuple[np.ndarray, np.ndarray]:
        """(present ids, missing ids) among station_ids at this time."""
        row = self._row(time_id)
        idx = self._indices(station_ids)
        ok = np.isfinite(row[idx])
        ids = np.asarray(station_ids, dtype=int)
        return ids[ok], ids[~ok]

    def _indices(self, station_ids) -> np.ndarray:
        lookup = {int(s): i for i, s in enumerate(self.station_ids)}
        try:
            return np.asarray([lookup[int(s)] for s in station_ids], dtype=int)
        except KeyError as exc:
            raise ConfigurationError(f"unknown station id {exc.args[0]}") from exc

    def observations(self, time_id: int, station_ids) -> tuple[np.ndarray, np.ndarray]:
        idx = self._indices(station_ids)
        return self.station_points[idx], self._row(time_id)[idx]


# ---------------------------------------------------------------------------
# Task construction
# ---------------------------------------------------------------------------


def context_size(r: float, n_reporting: int) -> int:
    """Clamped context-size law: round(r^2 * N) squeezed into [1, N-1]."""
    return int(np.clip(_round_half_up(r**2 * n_reporting), 1, n_reporting - 1))


def make_train_task(
    data: StationData, time_id: int, train_stations, rng: np.random.Generator
) -> Task | None:
    """Sample one training task at time_id.

    Draws r ~ U(0,1) and keeps a random context subset of size
    clamp(round(r^2 N), 1, N-1); the remaining reporting stations become
    targets. Returns None (with a logged warning) when fewer than two
    stations report.
    """
    present, missing = data.present(time_id, train_stations)
    n = present.size
    if n < 2:
        log.warning("skipping train task at time %s: only %d stations report", time_id, n)
        return None
    n_ctx = context_size(rng.uniform(), n)
    perm = rng.permutation(n)
    ctx_ids = present[perm[:n_ctx]]
    tgt_ids = present[perm[n_ctx:]]
    xc, yc = data.observations(time_id, ctx_ids)
    xt, yt = data.observations(time_id, tgt_ids)
    return Task(
        time_id=int(time_id),
        x_context=xc,
        y_context=yc,
        x_target=xt,
        y_target=yt,
        kind="train",
        aux=data.aux,
        context_ids=ctx_ids,
        target_ids=tgt_ids,
        missing_ids=tuple(int(s) for s in missing),
    )


def _fixed_task(data: StationData, time_id: int, ctx_stations, tgt_stations, kind: str) -> Task:
    ctx_ids, miss_c = data.present(time_id, ctx_stations)
    tgt_ids, miss_t = data.present(time_id, tgt_stations)
    xc, yc = data.observations(time_id, ctx_ids)
    xt, yt = data.observations(time_id, tgt_ids)
    return Task(
        time_id=int(time_id),
        x_context=xc,
        y_context=yc,
        x_target=xt,
        y_target=yt,
        kind=kind,
        aux=data.aux,
        context_ids=ctx_ids,
        target_ids=tgt_ids,
        missing_ids=tuple(int(s) for s in np.concatenate([miss_c, miss_t])),
    )


def make_val_task(data: StationData, time_id: int, plan: SplitPlan) -> Task:
    """Validation task: all training stations as context, validation
    stations as targets."""
    if time_id not in plan.val_times:
        raise ConfigurationError(f"time {time_id} is not a validation time")
    return _fixed_task(data, time_id, plan.train_stations, plan.val_stations, "val")


def make_test_task(data: StationData, time_id: int, plan: SplitPlan) -> Task:
    """Test task: train plus validation stations as context, held-out test
    stations as targets."""
    if time_id not in plan.test_times:
        raise ConfigurationError(f"time {time_id} is not a test time")
    ctx = tuple(plan.train_stations) + tuple(plan.val_stations)
    return _fixed_task(data, time_id, ctx, plan.test_stations, "test")


def make_gp_task(
    params: SEKernelParams,
    rng: np.random.Generator,
    domain: tuple[float, float] = (-2.0, 2.0),
    n_points: tuple[int, int] = (10, 60),
) -> Task:
    """One 1D GP interpolation task: n ~ U{10..60} points uniform on the
    domain, context size ~ U{1..n-1}, values drawn from the GP prior."""
    n_total = int(rng.integers(n_points[0], n_points[1] + 1))
    xs = rng.uniform(domain[0], domain[1], size=n_total)
    sampled: SampledField = sample_gp_field(params, xs, rng)
    n_ctx = int(rng.integers(1, n_total))
    perm = rng.permutation(n_total)
    ci, ti = perm[:n_ctx], perm[n_ctx:]
    return Task(
        time_id=-1,
        x_context=sampled.coordinates[ci],
        y_context=sampled.observed_values[ci],
        x_target=sampled.coordinates[ti],
        y_target=sampled.observed_values[ti],
        kind="gp",
    )


def epoch_time_passes(train_times, rng: np.random.Generator):
    """Yield training times forever, shuffled without replacement within
    each pass so every time is visited equally often."""
    times = np.asarray(train_times, dtype=int)
    while True:
        for t in rng.permutation(times):
            yield int(t)
