"""Experiment configuration: one sectioned key: value file drives every
command; command-line flags override file values. A content fingerprint of
the effective configuration is embedded in every output header for
provenance checks.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .forecast import ForecastConfig
from .grid import ChannelLayout, GridSpec, DESK_GRID, desk_layout, paper_layout
from .synth import SynthParams
from .training import TrainConfig
from .network import NetConfig
from .verify import DEFAULT_LEADS


class ConfigError(Exception):
    pass


def parse_year_range(text: str) -> list[int]:
    """'2001-2012' -> [2001, ..., 2012]; '2001' -> [2001]."""
    text = text.strip()
    if "-" in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(text)]


@dataclass
class ExperimentConfig:
    archive_dir: Path
    checkpoint_dir: Path
    report_dir: Path
    grid: GridSpec
    layout: ChannelLayout
    synth: SynthParams
    archive_years: list[int]
    test_years: list[int]
    net: NetConfig
    train: TrainConfig
    forecast: ForecastConfig
    leads: tuple[int, ...] = DEFAULT_LEADS
    events: str = "from-manifest"          # or comma list "year:day"
    validation_lead: int = 5
    validation_members: int = 8
    fingerprint: str = ""

    def event_list(self) -> list[tuple[int, int]] | None:
        """Explicit (year, onset day) pairs, or None for from-manifest."""
        if self.events.strip() == "from-manifest":
            return None
        out = []
        for tok in self.events.split(","):
            year, day = tok.strip().split(":")
            out.append((int(year), int(day)))
        return out


def _fingerprint(parser: configparser.ConfigParser) -> str:
    h = hashlib.sha256()
    for section in sorted(parser.sections()):
        for key in sorted(parser[section]):
            h.update(f"{section}.{key}={parser[section][key]}\n".encode())
    return h.hexdigest()[:16]


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read the sectioned config file; `overrides` maps 'section.key' to values."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][key] = str(value)

    try:
        paths = parser["paths"]
        base = Path(path).parent

        def _path(key: str, default: str) -> Path:
            p = Path(paths.get(key, default))
            return p if p.is_absolute() else base / p

        g = parser["grid"] if parser.has_section("grid") else {}
        grid = GridSpec(
            n_lat=int(g.get("n_lat", DESK_GRID.n_lat)),
            n_lon=int(g.get("n_lon", DESK_GRID.n_lon)),
            lat_start_deg=float(g.get("lat_start_deg", DESK_GRID.lat_start_deg)),
            lat_step_deg=float(g.get("lat_step_deg", DESK_GRID.lat_step_deg)),
            lon_step_deg=float(g.get("lon_step_deg", DESK_GRID.lon_step_deg)),
        )
        preset = parser.get("channels", "preset", fallback="desk")
        if preset == "desk":
            layout = desk_layout()
        elif preset == "paper":
            layout = paper_layout()
        else:
            raise ConfigError(f"unknown channel preset {preset!r}")

        s = parser["synth"] if parser.has_section("synth") else {}
        synth = SynthParams(
            jet_peak_speed=float(s.get("jet_peak_speed", 30.0)),
            jet_peak_lat=float(s.get("jet_peak_lat", 60.0)),
            wave1_amp=float(s.get("wave1_amp", 6.0)),
            wave2_amp=float(s.get("wave2_amp", 3.0)),
            reversion_rate=float(s.get("reversion_rate", 0.08)),
            noise_scale=float(s.get("noise_scale", 1.0)),
            coupling_gain=float(s.get("coupling_gain", 3.5)),
            event_prob=float(s.get("event_prob", 0.0033)),
            season_length=int(s.get("season_length", 212)),
            seed=int(s.get("seed", 0)),
        )
        archive_years = parse_year_range(s.get("years", "2001-2012"))
        test_years = parse_year_range(parser.get("split", "test_years", fallback="2012"))

        tr = parser["train"] if parser.has_section("train") else {}
        net = NetConfig(
            in_channels=len(layout),
            base_width=int(tr.get("base_width", 32)),
            mults=tuple(int(m) for m in tr.get("mults", "1,2,2,4").split(",")),
            groups=int(tr.get("groups", 8)),
            embed_dim=int(tr.get("embed_dim", 64)),
        )
        train = TrainConfig(
            initial_lr=float(tr.get("initial_lr", 1e-4)),
            lr_decay_factor=float(tr.get("lr_decay_factor", 0.5)),
            lr_decay_period=int(tr.get("lr_decay_period", 30)),
            batch_size_early=int(tr.get("batch_size_early", 16)),
            batch_size_late=int(tr.get("batch_size_late", 8)),
            batch_switch_epoch=int(tr.get("batch_switch_epoch", 30)),
            epochs=int(tr.get("epochs", 100)),
            weight_decay=float(tr.get("weight_decay", 1e-4)),
            seed=int(tr.get("seed", 0)),
            checkpoint_every=int(tr.get("checkpoint_every", 10)),
        )
        fc = parser["forecast"] if parser.has_section("forecast") else {}
        forecast = ForecastConfig(
            n_steps=int(fc.get("n_steps", 20)),
            horizon=int(fc.get("horizon", 30)),
            members=int(fc.get("members", 50)),
            master_seed=int(fc.get("master_seed", 0)),
            init_day=int(fc.get("init_day", 2)),
        )
        ev = parser["evaluate"] if parser.has_section("evaluate") else {}
        leads = tuple(int(x) for x in ev.get("leads", ",".join(map(str, DEFAULT_LEADS))).split(","))
        if any(l <= 0 for l in leads):
            raise ConfigError("leads must be positive")
        events = ev.get("events", "from-manifest")
        validation_lead = int(ev.get("validation_lead", 5))
        validation_members = int(ev.get("validation_members", 8))
    except (KeyError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e

    return ExperimentConfig(
        archive_dir=_path("archive_dir", "archive"),
        checkpoint_dir=_path("checkpoint_dir", "checkpoints"),
        report_dir=_path("report_dir", "reports"),
        grid=grid,
        layout=layout,
        synth=synth,
        archive_years=archive_years,
        test_years=test_years,
        net=net,
        train=train,
        forecast=forecast,
        leads=leads,
        events=events,
        validation_lead=validation_lead,
        validation_members=validation_members,
        fingerprint=_fingerprint(parser),
    )
