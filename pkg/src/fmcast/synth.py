"""Seeded generator of vortex-collapse-like synthetic seasons.

The diagnostic-level zonal-mean wind follows a mean-reverting index forced
by a tropospheric wave-activity process. Stochastic wave-amplification
bursts drive the index through zero, producing labeled collapse events;
the burst amplitude is visible in the tropospheric channels, so the
collapses are tropospherically forced and a perfect-troposphere
intervention carries real predictive information.

Every season is a pure function of (params, year): the master seed is mixed
with the year (splitmix64) into a per-year seed, then split into an index
stream and a field stream so event labels can be recomputed without
generating full fields.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeds
from .grid import (
    SEASON_LENGTH,
    ChannelLayout,
    GridSpec,
    DESK_GRID,
    SeasonTensor,
    desk_layout,
    season_calendar,
)

RECOVERY_WINDOW_DAYS = 15  # westerly return within this window => "collapse-and-recover"

# Burst shape constants (fixed, not exposed): linear ramp length, hold
# durations for the two event types, and the peak-amplitude range.
_RAMP_DAYS = 4
_DURATION_RECOVER = 14
_DURATION_PERSIST = 28
_PEAK_LO, _PEAK_HI = 2.6, 3.8
_WAVE_AR = 0.8
_WAVE_NOISE = 0.25
_FORCING_THRESHOLD = 1.3


@dataclass(frozen=True)
class SynthParams:
    jet_peak_speed: float = 30.0       # m/s
    jet_peak_lat: float = 60.0         # deg N
    wave1_amp: float = 6.0             # m/s
    wave2_amp: float = 3.0             # m/s
    reversion_rate: float = 0.08       # 1/day
    noise_scale: float = 1.0           # m/s per day
    coupling_gain: float = 3.5         # m/s per day per unit wave amplitude
    event_prob: float = 0.0033         # burst trigger probability per quiet day
    season_length: int = SEASON_LENGTH
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.reversion_rate < 1.0:
            raise ValueError("reversion_rate must lie in (0, 1)")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")
        if self.season_length < 40:
            raise ValueError("season_length must be >= 40")

    @property
    def ou_std(self) -> float:
        """Stationary standard deviation of the unforced index process."""
        k = self.reversion_rate
        return self.noise_scale / np.sqrt(2 * k - k * k)


@dataclass(frozen=True)
class EventLabel:
    year: int
    onset_day: int
    event_type: str  # "collapse-and-recover" | "collapse-persistent"


def synth_calendar(season_length: int) -> tuple[tuple[int, int], ...]:
    """Calendar for a (possibly shortened) season, centered on midwinter."""
    full = [(d.month, d.day) for d in season_calendar(2001)]  # any non-leap label
    if season_length == SEASON_LENGTH:
        return tuple(full)
    start = (SEASON_LENGTH - season_length) // 2
    return tuple(full[start : start + season_length])


def simulate_index(params: SynthParams, year: int) -> tuple[np.ndarray, np.ndarray]:
    """Index and wave-activity series for one season.

    Returns (index, wave_activity), both of length season_length. Uses only
    the per-year index stream, so labels can be derived without fields.
    """
    rng = np.random.default_rng(seeds.mix(seeds.derive_year_seed(params.seed, year), 1))
    n = params.season_length
    xi_wave = rng.standard_normal(n)
    xi_index = rng.standard_normal(n)
    u_trig = rng.random(n)
    u_peak = rng.random(n)
    u_type = rng.random(n)

    burst = np.zeros(n)
    d = 0
    while d < n:
        if u_trig[d] < params.event_prob:
            peak = _PEAK_LO + (_PEAK_HI - _PEAK_LO) * u_peak[d]
            hold = _DURATION_RECOVER if u_type[d] < 0.7 else _DURATION_PERSIST
            profile = np.concatenate([
                np.linspace(0.0, peak, _RAMP_DAYS, endpoint=False),
                np.full(hold, peak),
                np.linspace(peak, 0.0, _RAMP_DAYS, endpoint=False),
            ])
            end = min(n, d + len(profile))
            burst[d:end] = np.maximum(burst[d:end], profile[: end - d])
            d = end
        else:
            d += 1

    wave = np.zeros(n)
    index = np.zeros(n)
    a_prev = 0.0
    i_prev = params.jet_peak_speed
    k = params.reversion_rate
    for d in range(n):
        a = _WAVE_AR * a_prev + _WAVE_NOISE * xi_wave[d] + burst[d]
        forcing = params.coupling_gain * max(a_prev - _FORCING_THRESHOLD, 0.0)
        i = i_prev + k * (params.jet_peak_speed - i_prev) - forcing + params.noise_scale * xi_index[d]
        wave[d] = a
        index[d] = i
        a_prev, i_prev = a, i
    return index, wave


def labels_from_index(index: np.ndarray, year: int) -> list[EventLabel]:
    """First-crossing labels: day d is an onset iff index(d-1) >= 0 > index(d)."""
    out = []
    for d in range(1, len(index)):
        if index[d - 1] >= 0.0 and index[d] < 0.0:
            future = index[d : d + RECOVERY_WINDOW_DAYS + 1]
            kind = "collapse-and-recover" if np.any(future >= 0.0) else "collapse-persistent"
            out.append(EventLabel(year=year, onset_day=d, event_type=kind))
    return out


def _meridional_envelope(grid: GridSpec) -> np.ndarray:
    lat = grid.latitudes
    return np.sin(np.pi * (lat - lat[0]) / (lat[-1] - lat[0]))


def _jet_profile(grid: GridSpec, jet_lat: float, diag_idx: int) -> np.ndarray:
    """Zero-lat-mean jet bump normalized to 1 at the diagnostic row."""
    lat = grid.latitudes
    g = np.exp(-(((lat - jet_lat) / 12.0) ** 2))
    q = g - g.mean()
    return q / q[diag_idx]


def _polar_profile(grid: GridSpec) -> np.ndarray:
    lat = grid.latitudes
    return np.exp(-(((lat - lat[-1]) / 10.0) ** 2))


def generate_season(
    params: SynthParams,
    year: int,
    grid: GridSpec = DESK_GRID,
    layout: ChannelLayout | None = None,
) -> tuple[SeasonTensor, list[EventLabel]]:
    """One synthetic season plus its collapse-event labels."""
    layout = layout or desk_layout()
    index, wave = simulate_index(params, year)
    rng = np.random.default_rng(seeds.mix(seeds.derive_year_seed(params.seed, year), 2))

    n = params.season_length
    lon = 2.0 * np.pi * np.arange(grid.n_lon) / grid.n_lon
    mer = _meridional_envelope(grid)
    diag_idx = grid.diagnostic_lat_index()
    jet = _jet_profile(grid, params.jet_peak_lat, diag_idx)
    polar = _polar_profile(grid)
    u0 = params.jet_peak_speed
    # Mild amplification only: the event-day u anomaly must stay dominated
    # by the zonal-mean jet response, not the random-phase wave component,
    # or no forecast (however good) could correlate with it spatially.
    wave_boost = 1.0 + 0.15 * np.maximum(wave, 0.0)

    def wave_field(amp_scale: float, phases1: np.ndarray, phases2: np.ndarray) -> np.ndarray:
        w1 = np.cos(lon[None, :] + phases1[:, None])  # (day, lon)
        w2 = np.cos(2.0 * lon[None, :] + phases2[:, None])
        daily = (params.wave1_amp * w1 + params.wave2_amp * w2) * amp_scale
        return wave_boost[:, None, None] * mer[None, :, None] * daily[:, None, :]

    values = np.empty((n, len(layout), grid.n_lat, grid.n_lon))
    for ci, ch in enumerate(layout.channels):
        ph1 = rng.uniform(0.0, 2.0 * np.pi, n)
        ph2 = rng.uniform(0.0, 2.0 * np.pi, n)
        noise = rng.standard_normal((n, grid.n_lat, grid.n_lon))
        lev_scale = (layout.diagnostic_level_hpa / ch.level_hpa) ** 0.25
        if ch.variable == "u":
            # Zonally zero-mean noise keeps the field-derived vortex index
            # equal to the simulated index series (labels stay consistent).
            noise = noise - noise.mean(axis=-1, keepdims=True)
            fld = (lev_scale * index)[:, None, None] * jet[None, :, None]
            fld = fld + wave_field(1.0, ph1, ph2) + 0.2 * noise
        elif ch.variable == "v":
            fld = wave_field(0.8, ph1, ph2) + 0.2 * noise
        elif ch.variable == "PV":
            fld = (0.5 * lev_scale * index)[:, None, None] * jet[None, :, None]
            fld = fld + wave_field(0.3, ph1, ph2) + 0.1 * noise
        elif ch.variable == "T":
            base = 280.0 - 0.02 * ch.level_hpa
            fld = base + 2.5 * wave[:, None, None] * mer[None, :, None]
            fld = fld + wave_field(0.3, ph1, ph2) * wave[:, None, None] / 3.0
            fld = fld - 0.15 * (index - u0)[:, None, None] * polar[None, :, None]
            fld = fld + 0.2 * noise
        elif ch.variable == "Z":
            base = 1500.0 + 2.0 * (1000.0 - ch.level_hpa)
            fld = base + 30.0 * wave[:, None, None] * mer[None, :, None]
            fld = fld + wave_field(3.0, ph1, ph2) * wave[:, None, None] / 3.0
            fld = fld - 2.0 * (index - u0)[:, None, None] * polar[None, :, None]
            fld = fld + 2.0 * noise
        else:
            raise ValueError(f"no generation rule for variable {ch.variable!r}")
        values[:, ci] = fld

    season = SeasonTensor(
        year=year,
        values=values,
        day_calendar=synth_calendar(n),
        grid=grid,
        layout=layout,
    )
    return season, labels_from_index(index, year)


def generate_archive(
    params: SynthParams,
    years: range | list[int],
    grid: GridSpec = DESK_GRID,
    layout: ChannelLayout | None = None,
) -> tuple[list[SeasonTensor], list[EventLabel]]:
    """Per-year seasons (independent per-year sub-seeds) plus the event manifest."""
    years = list(years)
    if not years:
        raise ValueError("year range must be nonempty")
    seasons, manifest = [], []
    for year in years:
        season, labels = generate_season(params, year, grid=grid, layout=layout)
        seasons.append(season)
        manifest.extend(labels)
    return seasons, manifest


def archive_event_labels(params: SynthParams, years: range | list[int]) -> list[EventLabel]:
    """Event manifest without generating fields (index streams only)."""
    out: list[EventLabel] = []
    for year in years:
        index, _ = simulate_index(params, year)
        out.extend(labels_from_index(index, year))
    return out


def save_manifest(labels: list[EventLabel], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("year,onset_day,type\n")
        for lab in labels:
            f.write(f"{lab.year},{lab.onset_day},{lab.event_type}\n")


def load_manifest(path) -> list[EventLabel]:
    out = []
    with open(path, encoding="utf-8") as f:
        header = f.readline()
        if header.strip() != "year,onset_day,type":
            raise ValueError(f"unrecognized manifest header in {path}")
        for line in f:
            if not line.strip():
                continue
            year, onset, kind = line.strip().split(",")
            out.append(EventLabel(year=int(year), onset_day=int(onset), event_type=kind))
    return out
