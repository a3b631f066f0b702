"""Data model for seasonal gridded tensors.

A winter season runs Oct 1 of the prior year through Apr 30 of the labeled
year (Apr 30 dropped in leap years so every season has the same length).
Fields live on a regular lat/lon grid that is exactly periodic in longitude,
with a designated row used as the vortex-diagnostic latitude (nearest row to
60N by default).
"""
from __future__ import annotations

import datetime
from dataclasses import dataclass

import numpy as np

SEASON_LENGTH = 212
DIAGNOSTIC_LAT_DEG = 60.0

SIGN_MEANINGFUL_VARS = frozenset({"u", "v", "PV"})
TROP_REPLACEABLE = frozenset({("T", 850), ("Z", 850), ("T", 500), ("Z", 500)})

# Canonical channel ordering: variables u, v, T, Z, PV over the stratospheric
# levels (descending pressure), then tropospheric T/Z appended.
PAPER_STRAT_LEVELS = (100, 70, 50, 10, 1)
PAPER_TROP_LEVELS = (850, 500, 300, 200)
VARIABLE_ORDER = ("u", "v", "T", "Z", "PV")


class GridDataError(Exception):
    """Base class for data-model errors."""


class GapError(GridDataError):
    """A date required by the season calendar is missing."""


class DuplicateDateError(GridDataError):
    """The same date appears more than once in the input."""


class LayoutMismatchError(GridDataError):
    """Season and statistics disagree on the channel layout."""


class DegenerateChannelError(GridDataError):
    """A channel's standard deviation fell below the configured floor."""


class SplitRangeError(GridDataError):
    """A requested test block lies outside the archive years."""


@dataclass(frozen=True)
class GridSpec:
    """Regular lat/lon grid, exactly periodic in longitude."""

    n_lat: int
    n_lon: int
    lat_start_deg: float
    lat_step_deg: float
    lon_step_deg: float

    def __post_init__(self):
        if self.n_lat < 2:
            raise ValueError(f"n_lat must be >= 2, got {self.n_lat}")
        if self.n_lon < 4:
            raise ValueError(f"n_lon must be >= 4, got {self.n_lon}")
        if abs(self.n_lon * self.lon_step_deg - 360.0) > 1e-9:
            raise ValueError(
                f"longitude coverage must be exactly periodic: "
                f"{self.n_lon} x {self.lon_step_deg} != 360"
            )

    @property
    def latitudes(self) -> np.ndarray:
        return self.lat_start_deg + self.lat_step_deg * np.arange(self.n_lat)

    def diagnostic_lat_index(self, target_deg: float = DIAGNOSTIC_LAT_DEG) -> int:
        """Index of the grid row nearest the diagnostic latitude."""
        return int(np.argmin(np.abs(self.latitudes - target_deg)))


PAPER_GRID = GridSpec(n_lat=60, n_lon=90, lat_start_deg=30.0, lat_step_deg=1.0, lon_step_deg=4.0)
DESK_GRID = GridSpec(n_lat=16, n_lon=24, lat_start_deg=44.0, lat_step_deg=3.0, lon_step_deg=15.0)


@dataclass(frozen=True)
class Channel:
    variable: str
    level_hpa: int

    @property
    def name(self) -> str:
        return f"{self.variable}{self.level_hpa}"

    @property
    def sign_meaningful(self) -> bool:
        """Sign-preserving normalization (divide by std only) applies."""
        return self.variable in SIGN_MEANINGFUL_VARS

    @property
    def trop_replaceable(self) -> bool:
        """Overwritten with truth in the perfect-troposphere intervention."""
        return (self.variable, self.level_hpa) in TROP_REPLACEABLE


@dataclass(frozen=True)
class ChannelLayout:
    """Ordered channel list with per-channel normalization/intervention flags."""

    channels: tuple[Channel, ...]
    diagnostic_level_hpa: int = 10

    def __post_init__(self):
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ValueError("channel names must be unique")
        if self.u_diagnostic_index() is None:
            raise ValueError(
                f"layout must contain a u-channel at {self.diagnostic_level_hpa} hPa"
            )

    def __len__(self) -> int:
        return len(self.channels)

    def index_of(self, name: str) -> int:
        for i, c in enumerate(self.channels):
            if c.name == name:
                return i
        raise KeyError(name)

    def u_diagnostic_index(self) -> int | None:
        for i, c in enumerate(self.channels):
            if c.variable == "u" and c.level_hpa == self.diagnostic_level_hpa:
                return i
        return None

    def trop_replaceable_indices(self) -> tuple[int, ...]:
        return tuple(i for i, c in enumerate(self.channels) if c.trop_replaceable)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels)


def paper_layout() -> ChannelLayout:
    """The 33-channel layout: 5 variables x 5 stratospheric levels + T/Z x 4 tropospheric levels."""
    channels = [
        Channel(var, lev) for var in VARIABLE_ORDER for lev in PAPER_STRAT_LEVELS
    ]
    channels += [Channel(var, lev) for var in ("T", "Z") for lev in PAPER_TROP_LEVELS]
    return ChannelLayout(tuple(channels))


def desk_layout() -> ChannelLayout:
    """Six-channel desk layout: diagnostic-level winds plus the four replaceable tropospheric channels."""
    channels = (
        Channel("u", 10),
        Channel("v", 10),
        Channel("T", 850),
        Channel("Z", 850),
        Channel("T", 500),
        Channel("Z", 500),
    )
    return ChannelLayout(channels)


@dataclass(frozen=True)
class SeasonTensor:
    """One winter season of gridded multi-channel daily fields.

    values has shape (day, channel, lat, lon) in physical units unless the
    tensor was produced by normalize().
    """

    year: int
    values: np.ndarray
    day_calendar: tuple[tuple[int, int], ...]  # day index -> (month, day-of-month)
    grid: GridSpec
    layout: ChannelLayout
    normalized: bool = False

    def __post_init__(self):
        d, c, h, w = self.values.shape
        if len(self.day_calendar) != d:
            raise ValueError("day_calendar length must match day dimension")
        if c != len(self.layout):
            raise ValueError(f"channel dim {c} != layout size {len(self.layout)}")
        if (h, w) != (self.grid.n_lat, self.grid.n_lon):
            raise ValueError("spatial dims do not match grid spec")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("season values must all be finite")

    @property
    def n_days(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class NormStats:
    """Per-channel spatiotemporal mean/std, computed from training years only."""

    mean: np.ndarray  # (channel,)
    std: np.ndarray   # (channel,)
    layout: ChannelLayout
    train_years: tuple[int, ...]

    def __post_init__(self):
        if self.mean.shape != (len(self.layout),) or self.std.shape != (len(self.layout),):
            raise ValueError("stats shape must match layout size")
        if np.any(self.std <= 0):
            raise ValueError("std must be strictly positive")

    def fingerprint(self) -> str:
        """Short provenance hash of stats values and training years."""
        import hashlib

        h = hashlib.sha256()
        h.update(self.mean.astype("<f8").tobytes())
        h.update(self.std.astype("<f8").tobytes())
        h.update(",".join(map(str, self.train_years)).encode())
        h.update(",".join(self.layout.names).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class PeriodSplit:
    name: str
    train_years: frozenset[int]
    test_years: frozenset[int]

    def __post_init__(self):
        if self.train_years & self.test_years:
            raise ValueError("train and test years must be disjoint")


def season_calendar(year: int) -> list[datetime.date]:
    """All dates of the season labeled `year`: Oct 1 (year-1) .. Apr 30 (year),
    dropping Apr 30 when the labeled year is a leap year."""
    start = datetime.date(year - 1, 10, 1)
    end = datetime.date(year, 4, 30)
    dates = [start + datetime.timedelta(days=i) for i in range((end - start).days + 1)]
    if len(dates) == SEASON_LENGTH + 1:
        dates = [d for d in dates if not (d.month == 4 and d.day == 30)]
    assert len(dates) == SEASON_LENGTH
    return dates


def build_season_tensor(
    daily_fields: list[tuple[datetime.date, np.ndarray]],
    year: int,
    grid: GridSpec,
    layout: ChannelLayout,
) -> SeasonTensor:
    """Assemble one season from dated (channel, lat, lon) fields.

    The input must cover Oct 1 of year-1 through Apr 30 of `year` without
    gaps; the Apr 30 field is dropped for leap years.
    """
    by_date: dict[datetime.date, np.ndarray] = {}
    for date, fld in daily_fields:
        if date in by_date:
            raise DuplicateDateError(f"duplicate field for {date.isoformat()}")
        by_date[date] = fld
    wanted = season_calendar(year)
    missing = [d for d in wanted if d not in by_date]
    if missing:
        raise GapError(f"missing field for {missing[0].isoformat()}")
    values = np.stack([by_date[d] for d in wanted]).astype(np.float64)
    calendar = tuple((d.month, d.day) for d in wanted)
    return SeasonTensor(year=year, values=values, day_calendar=calendar, grid=grid, layout=layout)


def compute_norm_stats(
    train_seasons: list[SeasonTensor],
    std_floor: float = 1e-12,
) -> NormStats:
    """Per-channel spatiotemporal mean/std over all training seasons.

    Accumulates in double precision regardless of storage precision.
    """
    if not train_seasons:
        raise ValueError("at least one training season is required")
    # Canonical year order makes the result (and its fingerprint) independent
    # of the caller's season ordering down to the last bit.
    train_seasons = sorted(train_seasons, key=lambda s: s.year)
    layout = train_seasons[0].layout
    grid = train_seasons[0].grid
    for s in train_seasons[1:]:
        if s.layout != layout or s.grid != grid:
            raise LayoutMismatchError("all seasons must share grid and layout")
    stacked = np.stack([s.values for s in train_seasons]).astype(np.float64)
    mean = stacked.mean(axis=(0, 1, 3, 4))
    std = np.sqrt(((stacked - mean[None, None, :, None, None]) ** 2).mean(axis=(0, 1, 3, 4)))
    bad = np.nonzero(std < std_floor)[0]
    if bad.size:
        names = [layout.channels[i].name for i in bad]
        raise DegenerateChannelError(f"degenerate variance in channels {names}")
    return NormStats(
        mean=mean,
        std=std,
        layout=layout,
        train_years=tuple(sorted(s.year for s in train_seasons)),
    )


def _check_layout(season: SeasonTensor, stats: NormStats) -> None:
    if season.layout != stats.layout:
        raise LayoutMismatchError("season layout does not match stats layout")


def normalize(season: SeasonTensor, stats: NormStats) -> SeasonTensor:
    """Sign-meaningful channels: x/std; others: (x - mean)/std."""
    _check_layout(season, stats)
    out = np.empty_like(season.values, dtype=np.float64)
    for i, ch in enumerate(season.layout.channels):
        if ch.sign_meaningful:
            out[:, i] = season.values[:, i] / stats.std[i]
        else:
            out[:, i] = (season.values[:, i] - stats.mean[i]) / stats.std[i]
    return SeasonTensor(
        year=season.year, values=out, day_calendar=season.day_calendar,
        grid=season.grid, layout=season.layout, normalized=True,
    )


def denormalize(season: SeasonTensor, stats: NormStats) -> SeasonTensor:
    """Exact algebraic inverse of normalize per channel policy."""
    _check_layout(season, stats)
    out = np.empty_like(season.values, dtype=np.float64)
    for i, ch in enumerate(season.layout.channels):
        if ch.sign_meaningful:
            out[:, i] = season.values[:, i] * stats.std[i]
        else:
            out[:, i] = season.values[:, i] * stats.std[i] + stats.mean[i]
    return SeasonTensor(
        year=season.year, values=out, day_calendar=season.day_calendar,
        grid=season.grid, layout=season.layout, normalized=False,
    )


PAPER_TEST_BLOCKS = ((2018, 2024), (2006, 2013), (1998, 2004))


def make_period_splits(
    archive_years: list[int] | range,
    test_blocks: list[tuple[int, int]] | None = None,
) -> list[PeriodSplit]:
    """Leave-a-block-out train/test splits.

    For the 1980-2024 archive with no explicit blocks, emits the three
    canonical periods; otherwise `test_blocks` gives (first, last) test
    years per split.
    """
    years = sorted(archive_years)
    if years != list(range(years[0], years[-1] + 1)):
        raise ValueError("archive years must be contiguous")
    if test_blocks is None:
        if (years[0], years[-1]) != (1980, 2024):
            raise ValueError("explicit test_blocks required for non-canonical archives")
        test_blocks = list(PAPER_TEST_BLOCKS)
    splits = []
    yearset = set(years)
    for k, (lo, hi) in enumerate(test_blocks, start=1):
        block = set(range(lo, hi + 1))
        if not block <= yearset:
            raise SplitRangeError(f"test block {lo}-{hi} outside archive {years[0]}-{years[-1]}")
        splits.append(
            PeriodSplit(
                name=f"period{k}",
                train_years=frozenset(yearset - block),
                test_years=frozenset(block),
            )
        )
    return splits
