"""Forecast verification: vortex index, climatology, RMSE/ACC, ACC-based
lead time, collapse detection under strict/relaxed criteria, lead-dependent
onset timing windows, and ensemble forecast accuracy.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forecast import ForecastEnsemble
from .grid import GridSpec, NormStats, SeasonTensor
from .synth import EventLabel

STRICT = "strict"
RELAXED = "relaxed"
RELAXED_THRESHOLD_MS = 5.0
ACC_SKILL_THRESHOLD = 0.5
DEFAULT_LEADS = (20, 15, 12, 10, 7, 5)

CLIMATOLOGY_MONTHS = (11, 12, 1, 2, 3)  # November through March


class UndefinedAccError(Exception):
    """Either anomaly field is identically zero (zero denominator)."""


class VerificationError(Exception):
    pass


def vortex_index(u_field: np.ndarray, grid: GridSpec) -> float:
    """Zonal mean of the diagnostic-level zonal wind at the diagnostic latitude."""
    row = grid.diagnostic_lat_index()
    return float(np.mean(u_field[row, :]))


def season_index_series(season: SeasonTensor) -> np.ndarray:
    """Per-day vortex index of a physical-unit season."""
    ci = season.layout.u_diagnostic_index()
    row = season.grid.diagnostic_lat_index()
    return season.values[:, ci, row, :].mean(axis=1)


def climatology(seasons: list[SeasonTensor], channel: int) -> np.ndarray:
    """Per-gridpoint mean over all November-March days of all seasons."""
    if not seasons:
        raise VerificationError("climatology requires at least one season")
    total = np.zeros((seasons[0].grid.n_lat, seasons[0].grid.n_lon))
    count = 0
    for s in seasons:
        mask = np.array([m in CLIMATOLOGY_MONTHS for m, _ in s.day_calendar])
        total += s.values[mask, channel].sum(axis=0)
        count += int(mask.sum())
    if count == 0:
        raise VerificationError("no November-March days in the archive")
    return total / count


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Square root of the grid-mean squared difference."""
    if pred.shape != truth.shape:
        raise VerificationError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def acc(pred: np.ndarray, truth: np.ndarray, clim: np.ndarray) -> float:
    """Centered spatial correlation of (pred - clim) with (truth - clim)."""
    if pred.shape != truth.shape or pred.shape != clim.shape:
        raise VerificationError("pred, truth and climatology must share shape")
    pa = pred - clim
    ta = truth - clim
    denom = np.sqrt(np.sum(pa**2) * np.sum(ta**2))
    if denom == 0.0:
        raise UndefinedAccError("anomaly field identically zero")
    return float(np.sum(pa * ta) / denom)


def acc_lead_time(acc_series: np.ndarray) -> int:
    """Largest n such that ACC stays above 0.5 on every day up to n.

    The series starts at forecast day 1; returns 0 if day 1 already fails.
    """
    if len(acc_series) == 0:
        raise VerificationError("empty ACC series")
    n = 0
    for v in acc_series:
        if np.isnan(v) or v <= ACC_SKILL_THRESHOLD:
            break
        n += 1
    return n


@dataclass(frozen=True)
class SSWVerdict:
    detected: bool
    onset_day: int | None   # index within the evaluated series
    criterion: str
    timely: bool | None = None

    def __post_init__(self):
        if self.detected != (self.onset_day is not None):
            raise ValueError("onset_day must be present iff detected")

    @property
    def success(self) -> bool:
        return self.detected and bool(self.timely)


def detect_ssw(index_series: np.ndarray, criterion: str = STRICT) -> SSWVerdict:
    """First day the index drops below the criterion threshold (0 or 5 m/s)."""
    if len(index_series) == 0:
        raise VerificationError("empty index series")
    threshold = 0.0 if criterion == STRICT else RELAXED_THRESHOLD_MS
    if criterion not in (STRICT, RELAXED):
        raise ValueError(f"unknown criterion {criterion!r}")
    below = np.nonzero(np.asarray(index_series) < threshold)[0]
    if below.size == 0:
        return SSWVerdict(detected=False, onset_day=None, criterion=criterion)
    return SSWVerdict(detected=True, onset_day=int(below[0]), criterion=criterion)


def timing_window(lead: int) -> int:
    """Allowed onset-date error (+- days) as a function of lead time."""
    if lead < 1:
        raise ValueError("lead must be >= 1")
    if lead >= 10:
        return 5
    if lead >= 6:
        return 3
    return 2


def member_verdict(
    index_series: np.ndarray,
    series_start_day: int,
    actual_onset_day: int,
    lead: int,
    criterion: str = STRICT,
    window: int | None = None,
) -> SSWVerdict:
    """Occurrence plus timing verdict for one member.

    `series_start_day` is the absolute season day of index_series[0];
    success requires detection and |forecast onset - actual onset| within
    the lead-dependent window (overridable via `window`).
    """
    v = detect_ssw(index_series, criterion)
    if not v.detected:
        return SSWVerdict(False, None, criterion, timely=False)
    onset_abs = series_start_day + v.onset_day
    w = timing_window(lead) if window is None else window
    return SSWVerdict(True, v.onset_day, criterion, timely=abs(onset_abs - actual_onset_day) <= w)


def ensemble_accuracy(verdicts: list[SSWVerdict]) -> float:
    """Percentage of members whose verdict is a success."""
    if not verdicts:
        raise VerificationError("empty verdict list")
    return 100.0 * sum(v.success for v in verdicts) / len(verdicts)


@dataclass
class EnsembleReport:
    """Verification of one ensemble against one labeled event."""

    year: int
    lead: int
    init_day: int
    horizon: int
    rmse_members: np.ndarray        # (member, day)
    acc_members: np.ndarray         # (member, day), nan where undefined
    acc_undefined: np.ndarray       # (member, day) bool
    rmse_mean: np.ndarray           # (day,)  ensemble-mean field vs truth
    acc_mean: np.ndarray            # (day,)  nan where undefined
    index_members: np.ndarray       # (member, day)
    index_mean: np.ndarray
    index_spread: np.ndarray        # per-day member standard deviation
    index_truth: np.ndarray
    accuracy: dict[str, float]      # criterion -> percentage
    verdicts: dict[str, list[SSWVerdict]]
    acc_lead_time_by_channel: dict[str, int]
    onset_beyond_horizon: bool = False


@dataclass
class VerificationReport:
    """All evaluated (event, lead) pairs plus the diagnostic row used."""

    entries: list[EnsembleReport] = field(default_factory=list)
    diagnostic_lat_deg: float = float("nan")

    def accuracy_matrix(self, criterion: str) -> dict[tuple[int, int], float]:
        """(event year, lead) -> ensemble accuracy percentage."""
        return {(e.year, e.lead): e.accuracy[criterion] for e in self.entries}


def verify_ensemble(
    ens: ForecastEnsemble,
    truth: SeasonTensor,
    clim_by_channel: dict[int, np.ndarray],
    event: EventLabel,
    stats: NormStats,
    window: int | None = None,
) -> EnsembleReport:
    """Score one ensemble: per-day RMSE/ACC of the diagnostic u-channel,
    vortex-index trajectories, and both occurrence criteria."""
    if truth.normalized:
        raise VerificationError("truth must be in physical units")
    if truth.year != ens.year:
        raise VerificationError(f"truth year {truth.year} != ensemble year {ens.year}")
    layout = ens.layout
    grid = ens.grid
    ci = layout.u_diagnostic_index()
    row = grid.diagnostic_lat_index()
    phys = ens.physical_values(stats)     # (member, day, channel, lat, lon)
    m, horizon = phys.shape[0], phys.shape[1]
    lead = event.onset_day - ens.init_day
    clim = clim_by_channel[ci]

    rmse_members = np.empty((m, horizon))
    acc_members = np.full((m, horizon), np.nan)
    undef = np.zeros((m, horizon), dtype=bool)
    rmse_mean = np.empty(horizon)
    acc_mean = np.full(horizon, np.nan)
    ens_mean = phys.mean(axis=0)

    for k in range(horizon):
        day = ens.season_day(k)
        truth_fld = truth.values[day, ci]
        for i in range(m):
            rmse_members[i, k] = rmse(phys[i, k, ci], truth_fld)
            try:
                acc_members[i, k] = acc(phys[i, k, ci], truth_fld, clim)
            except UndefinedAccError:
                undef[i, k] = True
        rmse_mean[k] = rmse(ens_mean[k, ci], truth_fld)
        try:
            acc_mean[k] = acc(ens_mean[k, ci], truth_fld, clim)
        except UndefinedAccError:
            pass

    index_members = phys[:, :, ci, row, :].mean(axis=-1)
    index_truth = np.array(
        [truth.values[ens.season_day(k), ci, row, :].mean() for k in range(horizon)]
    )

    first_day = ens.season_day(0)
    beyond = event.onset_day > ens.season_day(horizon - 1)
    verdicts = {}
    accuracy = {}
    for crit in (STRICT, RELAXED):
        vs = [
            member_verdict(index_members[i], first_day, event.onset_day, lead, crit, window)
            for i in range(m)
        ]
        verdicts[crit] = vs
        accuracy[crit] = ensemble_accuracy(vs)

    lead_times = {}
    for cj, ch in enumerate(layout.channels):
        series = np.empty(horizon)
        for k in range(horizon):
            truth_fld = truth.values[ens.season_day(k), cj]
            try:
                series[k] = acc(ens_mean[k, cj], truth_fld, clim_by_channel[cj])
            except UndefinedAccError:
                series[k] = np.nan
        lead_times[ch.name] = acc_lead_time(series)

    return EnsembleReport(
        year=ens.year,
        lead=lead,
        init_day=ens.init_day,
        horizon=horizon,
        rmse_members=rmse_members,
        acc_members=acc_members,
        acc_undefined=undef,
        rmse_mean=rmse_mean,
        acc_mean=acc_mean,
        index_members=index_members,
        index_mean=index_members.mean(axis=0),
        index_spread=index_members.std(axis=0),
        index_truth=index_truth,
        accuracy=accuracy,
        verdicts=verdicts,
        acc_lead_time_by_channel=lead_times,
        onset_beyond_horizon=beyond,
    )


def build_report(
    ensembles: list[ForecastEnsemble],
    truth_by_year: dict[int, SeasonTensor],
    archive: list[SeasonTensor],
    events: list[EventLabel],
    stats: NormStats,
    window: int | None = None,
) -> VerificationReport:
    """Verify every ensemble against its event; climatology from the archive."""
    if not ensembles:
        raise VerificationError("no ensembles to verify")
    layout = ensembles[0].layout
    clim_by_channel = {i: climatology(archive, i) for i in range(len(layout))}
    events_by_year: dict[int, EventLabel] = {}
    for ev in events:
        events_by_year.setdefault(ev.year, ev)  # first event of the season
    report = VerificationReport(
        diagnostic_lat_deg=float(
            ensembles[0].grid.latitudes[ensembles[0].grid.diagnostic_lat_index()]
        )
    )
    for ens in ensembles:
        if ens.year not in events_by_year:
            raise VerificationError(f"no labeled event for season {ens.year}")
        if ens.year not in truth_by_year:
            raise VerificationError(f"no truth season for year {ens.year}")
        report.entries.append(
            verify_ensemble(
                ens, truth_by_year[ens.year], clim_by_channel,
                events_by_year[ens.year], stats, window,
            )
        )
    return report


def write_report_tables(report: VerificationReport, out_dir: str | Path) -> list[Path]:
    """CSV tables: per-metric member values, index series, and the accuracy
    matrix (rows = events, columns = leads, strict/relaxed pairs)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    for metric in ("rmse", "acc"):
        path = out / f"{metric}_members.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["year", "lead", "day", "member", "value"])
            for e in report.entries:
                table = e.rmse_members if metric == "rmse" else e.acc_members
                undef = None if metric == "rmse" else e.acc_undefined
                for i in range(table.shape[0]):
                    for k in range(table.shape[1]):
                        if undef is not None and undef[i, k]:
                            val = "undefined"
                        else:
                            val = f"{table[i, k]:.6g}"
                        w.writerow([e.year, e.lead, k + 1, i, val])
        written.append(path)

    path = out / "index_series.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["year", "lead", "day", "truth", "ensemble_mean", "spread"])
        for e in report.entries:
            for k in range(e.horizon):
                w.writerow([
                    e.year, e.lead, k + 1,
                    f"{e.index_truth[k]:.6g}", f"{e.index_mean[k]:.6g}",
                    f"{e.index_spread[k]:.6g}",
                ])
    written.append(path)

    path = out / "accuracy_matrix.csv"
    years = sorted({e.year for e in report.entries})
    leads = sorted({e.lead for e in report.entries}, reverse=True)
    strict_m = report.accuracy_matrix(STRICT)
    relaxed_m = report.accuracy_matrix(RELAXED)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["year"] + [f"lead{l}_{c}" for l in leads for c in (STRICT, RELAXED)])
        for y in years:
            row = [y]
            for l in leads:
                for mat in (strict_m, relaxed_m):
                    row.append(f"{mat[(y, l)]:.1f}" if (y, l) in mat else "")
            w.writerow(row)
    written.append(path)
    return written
