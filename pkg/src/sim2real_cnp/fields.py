"""Synthetic squared-exponential GP data: field sampling, the exact posterior
oracle, and the 2D station world with a resolution gap between gridded
"sim" snapshots and off-grid station records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist

from sim2real_cnp.util import ConfigurationError, DegenerateCovarianceError

# Relative jitter ladder for Gram-matrix roots: 1e-10 * signal_var up to
# 1e-4 * signal_var, escalating by 10x.
_JITTER_START = 1e-10
_JITTER_MAX = 1e-4


@dataclass(frozen=True)
class SEKernelParams:
    """Squared-exponential GP hyperparameters defining one data "world".

    lengthscale and signal_std are in input/output units; noise_std is the
    standard deviation of iid observation noise added on top of the latent
    function.
    """

    lengthscale: float
    signal_std: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        if not self.lengthscale > 0:
            raise ConfigurationError(f"lengthscale must be > 0, got {self.lengthscale}")
        if self.signal_std < 0:
            raise ConfigurationError(f"signal_std must be >= 0, got {self.signal_std}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass(frozen=True)
class SampledField:
    """A draw from a GP prior at fixed coordinates, with and without noise."""

    coordinates: np.ndarray  # [n, d]
    latent_values: np.ndarray  # [n]
    observed_values: np.ndarray  # [n]


@dataclass(frozen=True)
class GPOracleResult:
    """Exact noisy-GP posterior predictive at target points.

    Predicts *observed* values: noise variance is included in stds, matching
    the likelihood that interpolation models are scored on.
    mean_log_density is filled only when target values were supplied.
    """

    means: np.ndarray  # [m]
    stds: np.ndarray  # [m]
    mean_log_density: float | None = None


def as_points(x: np.ndarray | list) -> np.ndarray:
    """Coerce to an [n, d] float array; 1D inputs become a column."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a[:, None]
    return a


def se_kernel(x: np.ndarray | float, x2: np.ndarray | float, params: SEKernelParams) -> float:
    """Squared-exponential covariance between two points:
    signal_std^2 * exp(-|x - x2|^2 / (2 lengthscale^2)).

    Far-apart points underflow to exactly 0.0.
    """
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(x2, dtype=np.float64).ravel()
    sq = float(np.sum((a - b) ** 2))
    return params.signal_std**2 * float(np.exp(-0.5 * sq / params.lengthscale**2))


def gram_matrix(a: np.ndarray, b: np.ndarray | None, params: SEKernelParams) -> np.ndarray:
    """Kernel Gram matrix between point sets [n, d] and [m, d]."""
    a = as_points(a)
    b = a if b is None else as_points(b)
    sq = cdist(a, b, metric="sqeuclidean")
    return params.signal_std**2 * np.exp(-0.5 * sq / params.lengthscale**2)


def _closest_pair(points: np.ndarray) -> tuple[int, int]:
    d = cdist(points, points)
    np.fill_diagonal(d, np.inf)
    i, j = np.unravel_index(int(np.argmin(d)), d.shape)
    return int(i), int(j)


def _cholesky_with_jitter(k: np.ndarray, signal_var: float, points: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of k + jitter*I, escalating jitter on failure."""
    if not np.isfinite(k).all():
        i, j = np.unravel_index(int(np.argmin(np.isfinite(k))), k.shape)
        raise DegenerateCovarianceError(
            f"covariance is non-finite between coordinate #{i} {points[i]} "
            f"and #{j} {points[j]}"
        )
    jitter = _JITTER_START * signal_var
    limit = _JITTER_MAX * signal_var
    while True:
        try:
            return cholesky(k + jitter * np.eye(k.shape[0]), lower=True)
        except (np.linalg.LinAlgError, ValueError):
            pass
        if jitter >= limit:
            i, j = _closest_pair(points)
            raise DegenerateCovarianceError(
                "covariance not decomposable after jitter escalation to "
                f"{jitter:g}; closest coordinate pair is #{i} {points[i]} and #{j} {points[j]}"
            )
        jitter *= 10.0


def sample_gp_field(
    params: SEKernelParams, coordinates: np.ndarray, rng: np.random.Generator
) -> SampledField:
    """Draw one GP realisation at the given coordinates.

    latent_values is an exact prior draw (Cholesky root of the jittered
    Gram matrix); observed_values adds iid N(0, noise_std^2) noise. Fully
    reproducible from the generator state.
    """
    pts = as_points(coordinates)
    n = pts.shape[0]
    if params.signal_std == 0.0:
        latent = np.zeros(n)
    else:
        k = gram_matrix(pts, None, params)
        root = _cholesky_with_jitter(k, params.signal_std**2, pts)
        latent = root @ rng.standard_normal(n)
    observed = latent
    if params.noise_std > 0:
        observed = latent + params.noise_std * rng.standard_normal(n)
    return SampledField(coordinates=pts, latent_values=latent, observed_values=observed.copy())


def _posterior(
    gram_cc: np.ndarray,
    gram_ct: np.ndarray,
    prior_var: float,
    noise_var: float,
    context_values: np.ndarray,
    context_points: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    lower = _cholesky_with_jitter(gram_cc + noise_var * np.eye(gram_cc.shape[0]), max(prior_var, 1e-30), context_points)
    alpha = cho_solve((lower, True), context_values)
    means = gram_ct.T @ alpha
    v = solve_triangular(lower, gram_ct, lower=True)
    variances = prior_var - np.sum(v**2, axis=0) + noise_var
    return means, np.sqrt(np.maximum(variances, 1e-18))


def gp_posterior_oracle(
    context_points: np.ndarray,
    context_values: np.ndarray,
    target_points: np.ndarray,
    params: SEKernelParams,
    target_values: np.ndarray | None = None,
) -> GPOracleResult:
    """Exact posterior predictive of the noisy SE-kernel GP.

    With an empty context this is the prior predictive: mean 0 and
    std sqrt(signal_std^2 + noise_std^2) at every target.
    """
    return gp_posterior_oracle_sum(
        context_points, context_values, target_points, [params], params.noise_std, target_values
    )


def gp_posterior_oracle_sum(
    context_points: np.ndarray,
    context_values: np.ndarray,
    target_points: np.ndarray,
    components: list[SEKernelParams],
    noise_std: float,
    target_values: np.ndarray | None = None,
) -> GPOracleResult:
    """Posterior oracle for a sum of SE kernels plus iid noise of noise_std.

    Component noise_std fields are ignored; only the explicit noise_std
    enters the likelihood. Used for the station world, whose latent field is
    a long- plus short-lengthscale sum.
    """
    tgt = as_points(target_points)
    ctx = as_points(context_points)
    y = np.asarray(context_values, dtype=np.float64).ravel()
    prior_var = float(sum(p.signal_std**2 for p in components))
    noise_var = float(noise_std) ** 2
    if ctx.shape[0] == 0:
        means = np.zeros(tgt.shape[0])
        stds = np.full(tgt.shape[0], np.sqrt(prior_var + noise_var))
    else:
        gram_cc = sum(gram_matrix(ctx, None, p) for p in components)
        gram_ct = sum(gram_matrix(ctx, tgt, p) for p in components)
        means, stds = _posterior(gram_cc, gram_ct, prior_var, noise_var, y, ctx)
    mean_log_density = None
    if target_values is not None:
        yt = np.asarray(target_values, dtype=np.float64).ravel()
        log_dens = -0.5 * np.log(2 * np.pi) - np.log(stds) - (yt - means) ** 2 / (2 * stds**2)
        mean_log_density = float(np.mean(log_dens))
    return GPOracleResult(means=means, stds=stds, mean_log_density=mean_log_density)


# ---------------------------------------------------------------------------
# Gridded fields and the synthetic station world
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridGeometry:
    """A regular grid: node i sits at origin + i * spacing along each axis."""

    origin: tuple[float, ...]
    spacing: float
    shape: tuple[int, ...]

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing * np.arange(self.shape[axis])

    def node_points(self) -> np.ndarray:
        """All node coordinates as an [n_nodes, ndim] array in C order."""
        axes = [self.axis_coords(a) for a in range(self.ndim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def lo(self) -> np.ndarray:
        return np.asarray(self.origin)

    def hi(self) -> np.ndarray:
        return self.lo() + self.spacing * (np.asarray(self.shape) - 1)


@dataclass(frozen=True)
class GriddedField:
    """Values on a regular grid (one static field or one time snapshot)."""

    grid: GridGeometry
    values: np.ndarray  # [*grid.shape]

    def nearest_values(self, points: np.ndarray) -> np.ndarray:
        """Nearest-node lookup at arbitrary points, clipped to the grid."""
        pts = as_points(points)
        out_idx = []
        for a in range(self.grid.ndim):
            idx = np.rint((pts[:, a] - self.grid.origin[a]) / self.grid.spacing).astype(int)
            out_idx.append(np.clip(idx, 0, self.grid.shape[a] - 1))
        return self.values[tuple(out_idx)]


@dataclass(frozen=True)
class StationWorldConfig:
    """Configuration of the 2D synthetic station world.

    The latent field at each time is long_component (+ short_component at
    stations). Sim snapshots expose only the long component on a grid of
    sim_grid_spacing; station records add the short component and iid noise,
    so all sub-grid structure lives exclusively in the station data.
    """

    domain: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 1.0), (0.0, 1.0))
    sim_grid_spacing: float = 0.05
    n_stations: int = 556
    n_times: int = 236
    long_component: SEKernelParams = field(default_factory=lambda: SEKernelParams(lengthscale=0.2))
    short_component: SEKernelParams = field(
        default_factory=lambda: SEKernelParams(lengthscale=0.01, signal_std=0.1)
    )
    aux_field_seed: int = 0
    station_noise_std: float = 0.05
    min_station_separation: float | None = None  # default: sim_grid_spacing / 5

    def __post_init__(self) -> None:
        if not (self.short_component.lengthscale < self.sim_grid_spacing < self.long_component.lengthscale):
            raise ConfigurationError(
                "need short lengthscale < sim_grid_spacing < long lengthscale, got "
                f"{self.short_component.lengthscale} / {self.sim_grid_spacing} / "
                f"{self.long_component.lengthscale}"
            )
        if self.n_stations <= 0 or self.n_times <= 0:
            raise ConfigurationError("n_stations and n_times must be positive")
        if self.station_noise_std < 0:
            raise ConfigurationError("station_noise_std must be >= 0")

    @property
    def station_separation(self) -> float:
        if self.min_station_separation is not None:
            return self.min_station_separation
        return self.sim_grid_spacing / 5.0


@dataclass(frozen=True)
class StationWorld:
    """One generated world: gridded sim snapshots plus station records."""

    config: StationWorldConfig
    times: np.ndarray  # [T] int time ids
    sim_grid: GridGeometry
    sim_fields: np.ndarray  # [T, *sim_grid.shape], long component only, no noise
    station_ids: np.ndarray  # [S] int
    station_points: np.ndarray  # [S, 2]
    station_values: np.ndarray  # [T, S] long + short + noise
    station_long: np.ndarray  # [T, S] the shared long component alone
    aux_field: GriddedField  # static, on a grid finer than sim_grid_spacing

    def station_records(self):
        """Yield (time_id, station_id, point, value) rows in canonical order."""
        for ti, t in enumerate(self.times):
            for si, s in enumerate(self.station_ids):
                yield int(t), int(s), self.station_points[si], float(self.station_values[ti, si])


def _place_stations(config: StationWorldConfig, rng: np.random.Generator) -> np.ndarray:
    (x1_lo, x1_hi), (x2_lo, x2_hi) = config.domain
    sep = config.station_separation
    area = (x1_hi - x1_lo) * (x2_hi - x2_lo)
    # Disc packing bound: fail early when the requested density is impossible.
    if config.n_stations * np.pi * (sep / 2) ** 2 > area:
        raise ConfigurationError(
            f"{config.n_stations} stations at separation {sep} cannot fit the domain"
        )
    placed: list[np.ndarray] = []
    attempts = 0
    budget = 500 * config.n_stations
    while len(placed) < config.n_stations:
        if attempts >= budget:
            raise ConfigurationError(
                f"station placement failed after {budget} attempts; "
                f"{config.n_stations} stations at separation {sep} are too dense"
            )
        attempts += 1
        cand = np.array([rng.uniform(x1_lo, x1_hi), rng.uniform(x2_lo, x2_hi)])
        if placed:
            d = np.min(np.linalg.norm(np.asarray(placed) - cand, axis=1))
            if d < sep:
                continue
        placed.append(cand)
    return np.asarray(placed)


def _centered_grid(domain: tuple[tuple[float, float], ...], spacing: float) -> GridGeometry:
    counts = []
    origin = []
    for lo, hi in domain:
        n = int(np.floor((hi - lo) / spacing + 1e-9))
        counts.append(n)
        origin.append(lo + spacing / 2)
    return GridGeometry(origin=tuple(origin), spacing=spacing, shape=tuple(counts))


def generate_station_world(config: StationWorldConfig, rng: np.random.Generator) -> StationWorld:
    """Sample a full station world.

    A shared long-lengthscale field per time underlies both outputs: sim
    snapshots evaluate it at sim-grid cell centres (no short component, no
    noise); station values add the short component and iid noise at fixed
    station locations. The static auxiliary field is drawn once from
    aux_field_seed on a grid at half the sim spacing.
    """
    stations = _place_stations(config, rng)
    sim_grid = _centered_grid(config.domain, config.sim_grid_spacing)
    grid_points = sim_grid.node_points()
    n_grid = grid_points.shape[0]
    n_st = stations.shape[0]
    joint = np.vstack([grid_points, stations])

    long_gram = gram_matrix(joint, None, config.long_component)
    long_root = _cholesky_with_jitter(long_gram, config.long_component.signal_std**2, joint)

    short = config.short_component
    if short.signal_std > 0:
        short_gram = gram_matrix(stations, None, short)
        short_root = _cholesky_with_jitter(short_gram, short.signal_std**2, stations)
    else:
        short_root = None

    n_times = config.n_times
    sim_fields = np.empty((n_times,) + sim_grid.shape)
    station_values = np.empty((n_times, n_st))
    station_long = np.empty((n_times, n_st))
    for t in range(n_times):
        joint_draw = long_root @ rng.standard_normal(n_grid + n_st)
        sim_fields[t] = joint_draw[:n_grid].reshape(sim_grid.shape)
        station_long[t] = joint_draw[n_grid:]
        vals = station_long[t]
        if short_root is not None:
            vals = vals + short_root @ rng.standard_normal(n_st)
        if config.station_noise_std > 0:
            vals = vals + config.station_noise_std * rng.standard_normal(n_st)
        station_values[t] = vals

    aux_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.aux_field_seed, spawn_key=(0xA0C,))
    )
    aux_grid = _centered_grid(config.domain, config.sim_grid_spacing / 2)
    aux_params = SEKernelParams(lengthscale=0.1, signal_std=1.0)
    aux_draw = sample_gp_field(aux_params, aux_grid.node_points(), aux_rng)
    aux = GriddedField(grid=aux_grid, values=aux_draw.latent_values.reshape(aux_grid.shape))

    return StationWorld(
        config=config,
        times=np.arange(n_times, dtype=int),
        sim_grid=sim_grid,
        sim_fields=sim_fields,
        station_ids=np.arange(n_st, dtype=int),
        station_points=stations,
        station_values=station_values,
        station_long=station_long,
        aux_field=aux,
    )
