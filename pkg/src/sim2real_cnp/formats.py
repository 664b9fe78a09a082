"""External file formats: key-value text files, station-record CSV, gridded
field CSV with grid sidecar, split plans, training logs and result records.

All floats are written in shortest round-trip decimal form with a decimal
point and no thousands separators, so identical runs produce byte-identical
files.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sim2real_cnp.fields import (
    GriddedField,
    GridGeometry,
    SEKernelParams,
    StationWorld,
    StationWorldConfig,
)
from sim2real_cnp.tasks import SplitPlan
from sim2real_cnp.util import ConfigurationError, fmt_float

# ---------------------------------------------------------------------------
# Flat key-value text (configs, manifests, sidecars)
# ---------------------------------------------------------------------------


def format_kv(entries: dict[str, object]) -> str:
    lines = []
    for key, value in entries.items():
        if isinstance(value, float):
            value = fmt_float(value)
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif value is None:
            value = "none"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno} is not 'key = value': {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_kv(path: Path | str, entries: dict[str, object]) -> None:
    Path(path).write_text(format_kv(entries), encoding="utf-8")


def read_kv(path: Path | str) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


class KVConfig:
    """Typed accessors over a parsed key-value file; missing keys raise a
    ConfigurationError naming the key."""

    def __init__(self, entries: dict[str, str], source: str = "<config>"):
        self.entries = dict(entries)
        self.source = source

    @classmethod
    def load(cls, path: Path | str) -> "KVConfig":
        return cls(read_kv(path), source=str(path))

    def _require(self, key: str) -> str:
        if key not in self.entries:
            raise ConfigurationError(f"missing config key '{key}' in {self.source}")
        return self.entries[key]

    def has(self, key: str) -> bool:
        return key in self.entries

    def str_(self, key: str, default: str | None = None) -> str:
        if default is not None and key not in self.entries:
            return default
        return self._require(key)

    def int_(self, key: str, default: int | None = None) -> int:
        if default is not None and key not in self.entries:
            return default
        return int(self._require(key))

    def float_(self, key: str, default: float | None = None) -> float:
        if default is not None and key not in self.entries:
            return default
        return float(self._require(key))

    def bool_(self, key: str, default: bool | None = None) -> bool:
        if default is not None and key not in self.entries:
            return default
        v = self._require(key).lower()
        if v not in ("true", "false"):
            raise ConfigurationError(f"config key '{key}' must be true/false, got {v!r}")
        return v == "true"

    def int_list(self, key: str, default: list[int] | None = None) -> list[int]:
        if default is not None and key not in self.entries:
            return default
        raw = self._require(key)
        return [int(v) for v in raw.split(",") if v.strip() != ""]

    def float_list(self, key: str, default: list[float] | None = None) -> list[float]:
        if default is not None and key not in self.entries:
            return default
        raw = self._require(key)
        return [float(v) for v in raw.split(",") if v.strip() != ""]

    def str_list(self, key: str, default: list[str] | None = None) -> list[str]:
        if default is not None and key not in self.entries:
            return default
        return [v.strip() for v in self._require(key).split(",") if v.strip() != ""]


# ---------------------------------------------------------------------------
# Station records
# ---------------------------------------------------------------------------


def write_station_records(
    path: Path | str,
    times: np.ndarray,
    station_ids: np.ndarray,
    station_points: np.ndarray,
    values: np.ndarray,
) -> None:
    """CSV with header time_id,station_id,x1[,x2],value; NaN values (missing
    observations) are skipped."""
    pts = np.asarray(station_points, dtype=np.float64)
    ndim = pts.shape[1]
    header = ["time_id", "station_id"] + [f"x{a + 1}" for a in range(ndim)] + ["value"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for ti, t in enumerate(np.asarray(times, dtype=int)):
        for si, s in enumerate(np.asarray(station_ids, dtype=int)):
            v = values[ti, si]
            if not np.isfinite(v):
                continue
            row = [int(t), int(s)] + [fmt_float(c) for c in pts[si]] + [fmt_float(v)]
            writer.writerow(row)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


@dataclass(frozen=True)
class StationRecords:
    times: np.ndarray
    station_ids: np.ndarray
    station_points: np.ndarray
    values: np.ndarray  # [T, S], NaN when missing


def read_station_records(path: Path | str) -> StationRecords:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["time_id", "station_id"] or header[-1] != "value":
            raise ConfigurationError(f"unexpected station-record header {header} in {path}")
        ndim = len(header) - 3
        if ndim not in (1, 2):
            raise ConfigurationError(f"station records must have x1[,x2], got {header}")
        rows = [(int(r[0]), int(r[1]), tuple(float(c) for c in r[2 : 2 + ndim]), float(r[-1])) for r in reader]
    times = np.array(sorted({r[0] for r in rows}), dtype=int)
    ids = np.array(sorted({r[1] for r in rows}), dtype=int)
    t_index = {t: i for i, t in enumerate(times)}
    s_index = {s: i for i, s in enumerate(ids)}
    points = np.full((ids.size, ndim), np.nan)
    values = np.full((times.size, ids.size), np.nan)
    for t, s, pt, v in rows:
        si = s_index[s]
        existing = points[si]
        if np.isfinite(existing).all() and not np.allclose(existing, pt):
            raise ConfigurationError(f"station {s} appears at two locations in {path}")
        points[si] = pt
        values[t_index[t], si] = v
    return StationRecords(times=times, station_ids=ids, station_points=points, values=values)


# ---------------------------------------------------------------------------
# Gridded fields
# ---------------------------------------------------------------------------


def _grid_sidecar_path(path: Path | str) -> Path:
    return Path(str(path) + ".grid")


def write_gridded_fields(
    path: Path | str, times: np.ndarray, fields: np.ndarray, grid: GridGeometry
) -> None:
    """CSV with header time_id,i1[,i2],value plus a sidecar <path>.grid file
    carrying origin, spacing and shape."""
    ndim = grid.ndim
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["time_id"] + [f"i{a + 1}" for a in range(ndim)] + ["value"])
    for ti, t in enumerate(np.asarray(times, dtype=int)):
        flat = fields[ti].ravel()
        for flat_idx, v in enumerate(flat):
            idx = np.unravel_index(flat_idx, grid.shape)
            writer.writerow([int(t)] + [int(i) for i in idx] + [fmt_float(v)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    sidecar: dict[str, object] = {}
    for a in range(ndim):
        sidecar[f"origin_x{a + 1}"] = grid.origin[a]
    sidecar["spacing"] = grid.spacing
    for a in range(ndim):
        sidecar[f"shape_i{a + 1}"] = grid.shape[a]
    write_kv(_grid_sidecar_path(path), sidecar)


def read_gridded_fields(path: Path | str) -> tuple[np.ndarray, np.ndarray, GridGeometry]:
    side = KVConfig.load(_grid_sidecar_path(path))
    origin, shape = [], []
    for a in range(1, 3):
        if side.has(f"origin_x{a}"):
            origin.append(side.float_(f"origin_x{a}"))
            shape.append(side.int_(f"shape_i{a}"))
    grid = GridGeometry(origin=tuple(origin), spacing=side.float_("spacing"), shape=tuple(shape))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ndim = len(header) - 2
        if header[0] != "time_id" or header[-1] != "value" or ndim != grid.ndim:
            raise ConfigurationError(f"gridded-field header {header} does not match sidecar")
        rows = [(int(r[0]), tuple(int(i) for i in r[1:-1]), float(r[-1])) for r in reader]
    times = np.array(sorted({r[0] for r in rows}), dtype=int)
    t_index = {t: i for i, t in enumerate(times)}
    fields = np.full((times.size,) + grid.shape, np.nan)
    for t, idx, v in rows:
        fields[(t_index[t],) + idx] = v
    return times, fields, grid


def write_static_field(path: Path | str, field: GriddedField) -> None:
    write_gridded_fields(path, np.array([0]), field.values[None], field.grid)


def read_static_field(path: Path | str) -> GriddedField:
    _, fields, grid = read_gridded_fields(path)
    return GriddedField(grid=grid, values=fields[0])


# ---------------------------------------------------------------------------
# Split plans
# ---------------------------------------------------------------------------


def write_split_plan(path: Path | str, plan: SplitPlan) -> None:
    write_kv(
        path,
        {
            "n_stations": plan.n_stations,
            "n_times": plan.n_times,
            "master_seed": plan.master_seed,
            "slots_per_day": plan.slots_per_day,
            "train_stations": plan.train_stations,
            "val_stations": plan.val_stations,
            "test_stations": plan.test_stations,
            "train_times": plan.train_times,
            "val_times": plan.val_times,
            "test_times": plan.test_times,
        },
    )


def read_split_plan(path: Path | str) -> SplitPlan:
    cfg = KVConfig.load(path)
    return SplitPlan(
        train_stations=tuple(cfg.int_list("train_stations")),
        val_stations=tuple(cfg.int_list("val_stations")),
        test_stations=tuple(cfg.int_list("test_stations")),
        train_times=tuple(cfg.int_list("train_times")),
        val_times=tuple(cfg.int_list("val_times")),
        test_times=tuple(cfg.int_list("test_times")),
        n_stations=cfg.int_("n_stations"),
        n_times=cfg.int_("n_times"),
        master_seed=cfg.int_("master_seed"),
        slots_per_day=cfg.int_("slots_per_day"),
    )


# ---------------------------------------------------------------------------
# Station-world directories
# ---------------------------------------------------------------------------


def world_config_to_kv(w: StationWorldConfig, prefix: str = "world.") -> dict[str, object]:
    out: dict[str, object] = {
        f"{prefix}domain": [w.domain[0][0], w.domain[0][1], w.domain[1][0], w.domain[1][1]],
        f"{prefix}sim_grid_spacing": w.sim_grid_spacing,
        f"{prefix}n_stations": w.n_stations,
        f"{prefix}n_times": w.n_times,
        f"{prefix}long_lengthscale": w.long_component.lengthscale,
        f"{prefix}long_signal_std": w.long_component.signal_std,
        f"{prefix}short_lengthscale": w.short_component.lengthscale,
        f"{prefix}short_signal_std": w.short_component.signal_std,
        f"{prefix}aux_field_seed": w.aux_field_seed,
        f"{prefix}station_noise_std": w.station_noise_std,
    }
    if w.min_station_separation is not None:
        out[f"{prefix}min_station_separation"] = w.min_station_separation
    return out


def world_config_from_kv(cfg: KVConfig, prefix: str = "world.") -> StationWorldConfig:
    dom = cfg.float_list(f"{prefix}domain", [0.0, 1.0, 0.0, 1.0])
    sep = cfg.float_(f"{prefix}min_station_separation", -1.0)
    return StationWorldConfig(
        domain=((dom[0], dom[1]), (dom[2], dom[3])),
        sim_grid_spacing=cfg.float_(f"{prefix}sim_grid_spacing", 0.05),
        n_stations=cfg.int_(f"{prefix}n_stations", 556),
        n_times=cfg.int_(f"{prefix}n_times", 236),
        long_component=SEKernelParams(
            lengthscale=cfg.float_(f"{prefix}long_lengthscale", 0.2),
            signal_std=cfg.float_(f"{prefix}long_signal_std", 1.0),
        ),
        short_component=SEKernelParams(
            lengthscale=cfg.float_(f"{prefix}short_lengthscale", 0.01),
            signal_std=cfg.float_(f"{prefix}short_signal_std", 0.1),
        ),
        aux_field_seed=cfg.int_(f"{prefix}aux_field_seed", 0),
        station_noise_std=cfg.float_(f"{prefix}station_noise_std", 0.05),
        min_station_separation=None if sep < 0 else sep,
    )


def write_world_dir(path: Path | str, world: StationWorld, seed: int) -> None:
    """Persist a station world: station records, gridded sim snapshots, the
    static aux field, and a config echo."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    write_station_records(
        d / "stations.csv", world.times, world.station_ids, world.station_points, world.station_values
    )
    write_gridded_fields(d / "sim_fields.csv", world.times, world.sim_fields, world.sim_grid)
    write_static_field(d / "aux_field.csv", world.aux_field)
    entries = world_config_to_kv(world.config)
    entries["seed"] = seed
    write_kv(d / "world.kv", entries)


def read_world_dir(path: Path | str) -> StationWorld:
    """Reconstruct a station world from the documented file formats.

    User-supplied real data can take the same shape: stations.csv,
    sim_fields.csv (+ .grid sidecar), aux_field.csv (+ .grid), world.kv.
    """
    d = Path(path)
    cfg = KVConfig.load(d / "world.kv")
    config = world_config_from_kv(cfg)
    records = read_station_records(d / "stations.csv")
    times, sim_fields, sim_grid = read_gridded_fields(d / "sim_fields.csv")
    aux = read_static_field(d / "aux_field.csv")
    if not np.array_equal(times, records.times):
        raise ConfigurationError(f"{d}: sim field times do not match station record times")
    return StationWorld(
        config=config,
        times=records.times,
        sim_grid=sim_grid,
        sim_fields=sim_fields,
        station_ids=records.station_ids,
        station_points=records.station_points,
        station_values=records.values,
        # The latent long component is not part of the file formats.
        station_long=np.full_like(records.values, np.nan),
        aux_field=aux,
    )


# ---------------------------------------------------------------------------
# Training logs and result records
# ---------------------------------------------------------------------------

TRAIN_LOG_HEADER = ["epoch", "train_nll", "val_nll", "lr", "seconds"]
RESULTS_HEADER = [
    "kind",
    "condition",
    "strategy",
    "n_tasks",
    "n_stations",
    "n_times",
    "replicate",
    "test_nll",
    "test_mae",
    "oracle_nll",
    "status",
]


def write_train_log(path: Path | str, records) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRAIN_LOG_HEADER)
    for r in records:
        writer.writerow(
            [r.epoch, fmt_float(r.train_nll), fmt_float(r.val_nll), fmt_float(r.lr), fmt_float(r.seconds)]
        )
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def results_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULTS_HEADER)
    for r in records:
        writer.writerow(r.as_row())
    return buf.getvalue()


def write_results(path: Path | str, records) -> None:
    Path(path).write_text(results_to_csv(records), encoding="utf-8")


def read_results(path: Path | str) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in RESULTS_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigurationError(f"results file {path} is missing columns {missing}")
        return list(reader)
