"""
Cluster-based multipath channel synthesis for a co-located sub-6G / mmWave pair.

Both links share one geometric realization (angles of departure, delays,
Doppler). Each path contributes

    beta * exp(j[2*pi*(nu*t - f*tau) + Phi]) * a(theta, f)

to the channel at time ``t`` and frequency ``f``, where ``a`` is the ULA
steering vector. Path statistics loosely follow a 3GPP UMa LoS scenario;
see :func:`sample_paths` for the exact distributions.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT

from .exceptions import ConfigurationError, DomainError, ShapeError

BANDS = ("sub6", "mm")

RngLike = Union[np.random.Generator, int, Sequence[int], None]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class ScenarioConfig:
    """Dual-band scenario parameters.

    Antenna spacing is in wavelengths at each band's carrier. Distances are
    in meters, angles in degrees, delays in seconds.
    """

    sub6_carrier_hz: float = 1.9e9
    mm_carrier_hz: float = 28e9
    sub6_bandwidth_hz: float = 60e6
    mm_bandwidth_hz: float = 0.5e9
    sub6_antennas: int = 8
    mm_antennas: int = 64
    subcarriers: int = 64
    antenna_spacing: float = 0.5
    clusters: int = 21
    paths_per_cluster: int = 20
    ue_speed_kmh: float = 30.0
    time_step_s: float = 0.5e-3
    timestamps_total: int = 20
    min_distance_m: float = 30.0
    max_cell_radius_m: float = 500.0
    aod_range_deg: float = 60.0
    aod_spread_deg: float = 5.0
    mean_excess_delay_s: float = 100e-9
    intra_cluster_delay_s: float = 5e-9
    cluster_shadowing_db: float = 3.0
    shadow_fading_db: float = 4.0
    k_factor_sub6_db: float = 10.0
    k_factor_mm_db: float = 13.0
    # Receiver timing locked to the first arrival (delays taken relative to LoS).
    relative_delays: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        counts = ("sub6_antennas", "mm_antennas", "subcarriers", "clusters",
                  "paths_per_cluster", "timestamps_total")
        for name in counts:
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        positive = ("sub6_carrier_hz", "mm_carrier_hz", "sub6_bandwidth_hz",
                    "mm_bandwidth_hz", "antenna_spacing", "time_step_s",
                    "min_distance_m", "max_cell_radius_m", "mean_excess_delay_s",
                    "intra_cluster_delay_s")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be strictly positive")
        if self.ue_speed_kmh < 0:
            raise ConfigurationError("ue_speed_kmh must be non-negative")
        if self.max_cell_radius_m <= self.min_distance_m:
            raise ConfigurationError("max_cell_radius_m must exceed min_distance_m")
        if not 0 < self.aod_range_deg < 90:
            raise ConfigurationError("aod_range_deg must lie in (0, 90)")

    # -- per-band accessors -------------------------------------------------
    def _check_band(self, band: str) -> str:
        if band not in BANDS:
            raise ShapeError(f"unknown band {band!r}; expected one of {BANDS}")
        return band

    def carrier(self, band: str) -> float:
        return self.sub6_carrier_hz if self._check_band(band) == "sub6" else self.mm_carrier_hz

    def bandwidth(self, band: str) -> float:
        return self.sub6_bandwidth_hz if self._check_band(band) == "sub6" else self.mm_bandwidth_hz

    def antennas(self, band: str) -> int:
        return self.sub6_antennas if self._check_band(band) == "sub6" else self.mm_antennas

    def subcarrier_spacing(self, band: str) -> float:
        return self.bandwidth(band) / self.subcarriers

    def lowest_frequency(self, band: str) -> float:
        return self.carrier(band) - self.bandwidth(band) / 2

    def frequencies(self, band: str, k_indices=None) -> np.ndarray:
        k = np.arange(self.subcarriers) if k_indices is None else np.asarray(k_indices)
        return self.lowest_frequency(band) + k * self.subcarrier_spacing(band)

    @property
    def ue_speed_ms(self) -> float:
        return self.ue_speed_kmh / 3.6


@dataclass(frozen=True, eq=False)
class PathSet:
    """One geometric channel realization.

    ``beta`` includes large-scale path loss; ``doppler_hz`` is expressed at
    the carrier of ``band``. The optional ``mm_*`` arrays hold the mmWave
    redraw of the gains for the same geometry.
    """

    beta: np.ndarray
    doppler_hz: np.ndarray
    delay_s: np.ndarray
    phase_rad: np.ndarray
    aod_rad: np.ndarray
    ue_distance_m: float
    los_flag: bool = True
    band: str = "sub6"
    mm_beta: Optional[np.ndarray] = None
    mm_phase_rad: Optional[np.ndarray] = None

    def __post_init__(self):
        n = np.shape(self.beta)[0] if np.ndim(self.beta) else 0
        for name in ("doppler_hz", "delay_s", "phase_rad", "aod_rad"):
            if np.shape(getattr(self, name)) != (n,):
                raise ShapeError(f"{name} must have shape ({n},)")
        if np.any(np.asarray(self.delay_s) < 0):
            raise DomainError("path delays must be non-negative")
        if np.any(np.abs(self.aod_rad) >= np.pi / 2):
            raise DomainError("angles of departure must lie in (-pi/2, pi/2)")

    @property
    def n_paths(self) -> int:
        return int(np.shape(self.beta)[0])

    @property
    def main_index(self) -> int:
        if self.n_paths == 0:
            raise DomainError("empty path set has no main path")
        return int(np.argmax(np.abs(self.beta)))

    def aligned(self) -> "PathSet":
        """Delays re-referenced to the earliest arrival."""
        return dataclasses.replace(self, delay_s=self.delay_s - self.delay_s.min())

    def for_band(self, band: str, cfg: ScenarioConfig) -> "PathSet":
        """View of this geometry as seen on ``band`` (gains, phases, Doppler)."""
        if band == self.band:
            return self
        if band != "mm" or self.mm_beta is None:
            raise ShapeError(f"cannot derive band {band!r} from a {self.band!r} path set")
        scale = cfg.carrier("mm") / cfg.carrier(self.band)
        return dataclasses.replace(
            self, band="mm", beta=self.mm_beta, phase_rad=self.mm_phase_rad,
            doppler_hz=self.doppler_hz * scale, mm_beta=None, mm_phase_rad=None)

    def equals(self, other: "PathSet") -> bool:
        """Bit-exact comparison of all fields."""
        for f in dataclasses.fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


@dataclass(frozen=True, eq=False)
class CsiTensor:
    """Complex channel samples indexed ``[time, subcarrier, antenna]``."""

    data: np.ndarray
    band: str
    dt_s: float
    df_hz: float
    f1_hz: float

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"CSI must be rank 3 [T, K, Nt], got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DomainError("CSI contains non-finite entries")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape


def path_loss_db(distance_m, carrier_hz: float):
    """3GPP TR 38.901 UMa LoS path loss (first breakpoint segment)."""
    return 28.0 + 22.0 * np.log10(distance_m) + 20.0 * np.log10(carrier_hz / 1e9)


def _small_scale_powers(excess: np.ndarray, k_factor_db: float, cfg: ScenarioConfig,
                        rng: np.random.Generator) -> np.ndarray:
    # Exponential power-delay profile with per-cluster log-normal shadowing;
    # the scattered part carries 1/(K+1) of the power, LoS path (0, 0) the rest.
    n_clusters = excess.shape[0]
    shadow = 10.0 ** (rng.normal(0.0, cfg.cluster_shadowing_db, n_clusters) / 10.0)
    power = np.exp(-excess / cfg.mean_excess_delay_s) * shadow[:, None]
    power[0, 0] = 0.0
    k = 10.0 ** (k_factor_db / 10.0)
    total = power.sum()
    if total > 0:
        power *= (1.0 / (k + 1.0)) / total
        power[0, 0] = k / (k + 1.0)
    else:
        power[0, 0] = 1.0
    return power


def sample_paths(cfg: ScenarioConfig, rng: RngLike = None) -> PathSet:
    """Draw one dual-band geometric realization.

    Distributions: UE distance uniform in [min_distance, max_cell_radius];
    cluster AoD centres uniform in +-aod_range; intra-cluster AoD Gaussian
    with ``aod_spread_deg``; cluster excess delays exponential (mean
    ``mean_excess_delay_s``) plus a small exponential intra-cluster offset;
    Ricean LoS path (0, 0) at the minimum delay; uniform random phases and
    per-path motion angles for the Doppler ``v*f/c*cos(phi)``.
    """
    rng = as_generator(cfg.rng_seed if rng is None else rng)
    n_c, n_p = cfg.clusters, cfg.paths_per_cluster

    distance = rng.uniform(cfg.min_distance_m, cfg.max_cell_radius_m)
    tau_los = distance / SPEED_OF_LIGHT

    span = np.deg2rad(cfg.aod_range_deg)
    centers = rng.uniform(-span, span, n_c)
    aod = centers[:, None] + rng.normal(0.0, np.deg2rad(cfg.aod_spread_deg), (n_c, n_p))
    aod[0, 0] = centers[0]
    limit = np.pi / 2 - 1e-3
    aod = np.clip(aod, -limit, limit)

    cluster_excess = rng.exponential(cfg.mean_excess_delay_s, n_c)
    cluster_excess[0] = 0.0
    excess = cluster_excess[:, None] + rng.exponential(cfg.intra_cluster_delay_s, (n_c, n_p))
    excess[0, 0] = 0.0
    delay = tau_los + excess

    sub6_power = _small_scale_powers(excess, cfg.k_factor_sub6_db, cfg, rng)
    phase = rng.uniform(0.0, 2 * np.pi, (n_c, n_p))
    heading = rng.uniform(0.0, 2 * np.pi, (n_c, n_p))
    doppler = cfg.ue_speed_ms * cfg.sub6_carrier_hz / SPEED_OF_LIGHT * np.cos(heading)

    shadow_db = rng.normal(0.0, cfg.shadow_fading_db)
    mm_power = _small_scale_powers(excess, cfg.k_factor_mm_db, cfg, rng)
    mm_phase = rng.uniform(0.0, 2 * np.pi, (n_c, n_p))

    def gains(power, carrier):
        loss_db = path_loss_db(distance, carrier) + shadow_db
        return (np.sqrt(power) * 10.0 ** (-loss_db / 20.0)).astype(np.complex128).ravel()

    return PathSet(
        beta=gains(sub6_power, cfg.sub6_carrier_hz),
        doppler_hz=doppler.ravel(),
        delay_s=delay.ravel(),
        phase_rad=phase.ravel(),
        aod_rad=aod.ravel(),
        ue_distance_m=float(distance),
        los_flag=True,
        band="sub6",
        mm_beta=gains(mm_power, cfg.mm_carrier_hz),
        mm_phase_rad=mm_phase.ravel(),
    )


def steering_vector(theta: float, f: float, n_ant: int, d_v: float = 0.5,
                    carrier_hz: Optional[float] = None) -> np.ndarray:
    """ULA response ``exp(j*2*pi*m*f*d*sin(theta)/c)`` for m = 0..n_ant-1.

    ``d_v`` is the element spacing in wavelengths at ``carrier_hz``
    (defaults to ``f`` itself, i.e. no beam squint).
    """
    if n_ant < 1:
        raise ConfigurationError("n_ant must be at least 1")
    spacing_m = d_v * SPEED_OF_LIGHT / (f if carrier_hz is None else carrier_hz)
    m = np.arange(n_ant)
    return np.exp(1j * 2 * np.pi * m * f * spacing_m * np.sin(theta) / SPEED_OF_LIGHT)


def synthesize_csi(paths: PathSet, cfg: ScenarioConfig, band: Optional[str] = None,
                   t_indices=None, k_indices=None) -> CsiTensor:
    """Evaluate the multipath sum on a (time, subcarrier, antenna) grid.

    Time index ``i`` maps to ``i * time_step_s``; subcarrier index ``j`` maps
    to ``f1 + j * df`` with ``df = bandwidth / K`` and ``f1 = carrier -
    bandwidth / 2``. Steering vectors are evaluated at each subcarrier
    frequency.
    """
    band = paths.band if band is None else band
    if band != paths.band:
        raise ShapeError(f"path set is for band {paths.band!r}, requested {band!r}")
    n_ant = cfg.antennas(band)
    t_idx = np.arange(cfg.timestamps_total) if t_indices is None else np.asarray(t_indices)
    times = t_idx * cfg.time_step_s
    freqs = cfg.frequencies(band, k_indices)
    carrier = cfg.carrier(band)

    temporal = paths.beta[None, :] * np.exp(
        1j * (2 * np.pi * paths.doppler_hz[None, :] * times[:, None] + paths.phase_rad[None, :]))
    delay_term = np.exp(-1j * 2 * np.pi * freqs[:, None] * paths.delay_s[None, :])
    # Per-element phase step; antenna responses built by repeated multiplication.
    step = np.exp(1j * 2 * np.pi * cfg.antenna_spacing
                  * (freqs / carrier)[:, None] * np.sin(paths.aod_rad)[None, :])
    spatial = np.empty((n_ant,) + step.shape, dtype=np.complex128)
    spatial[0] = 1.0
    for m in range(1, n_ant):
        np.multiply(spatial[m - 1], step, out=spatial[m])
    # [K, T, P] @ [K, P, M] -> [K, T, M]
    data = np.matmul(temporal[None, :, :] * delay_term[:, None, :],
                     spatial.transpose(1, 2, 0)).transpose(1, 0, 2)
    return CsiTensor(data=data, band=band, dt_s=cfg.time_step_s,
                     df_hz=cfg.subcarrier_spacing(band), f1_hz=cfg.lowest_frequency(band))


def make_dual_band(paths: PathSet, cfg: ScenarioConfig) -> Tuple[CsiTensor, CsiTensor]:
    """Sub-6G history ``[T, K, Nt_sub6]`` and one mmWave snapshot ``[1, K, Nt_mm]``."""
    sub6 = paths.for_band("sub6", cfg)
    mm = paths.for_band("mm", cfg)
    if cfg.relative_delays:
        sub6, mm = sub6.aligned(), mm.aligned()
    return synthesize_csi(sub6, cfg, "sub6"), synthesize_csi(mm, cfg, "mm", t_indices=[0])


def derive_labels(paths: PathSet) -> Tuple[float, float]:
    """Distance (m) from the earliest delay and main-path loss (dB)."""
    if paths.n_paths == 0:
        raise DomainError("cannot derive labels from an empty path set")
    x_d = SPEED_OF_LIGHT * float(np.min(paths.delay_s))
    x_pl = -20.0 * np.log10(np.abs(paths.beta[paths.main_index]))
    return x_d, float(x_pl)


def add_awgn(x: np.ndarray, snr_db: Optional[float], rng: RngLike = None) -> np.ndarray:
    """Add circular complex Gaussian noise at ``snr_db`` relative to the mean power of ``x``.

    ``snr_db=None`` or ``inf`` returns an unmodified copy.
    """
    x = np.asarray(x)
    if x.size == 0:
        raise ShapeError("cannot add noise to an empty array")
    if snr_db is None or np.isinf(snr_db):
        return x.copy()
    rng = as_generator(rng)
    noise_power = np.mean(np.abs(x) ** 2) / 10.0 ** (snr_db / 10.0)
    noise = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
    return x + np.sqrt(noise_power / 2.0) * noise
