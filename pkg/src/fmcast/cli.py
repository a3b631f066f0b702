"""Command-line harness wiring data generation, training, forecasting and
verification into reproducible experiments.

Commands: synth, train, forecast, evaluate. All take --config pointing at a
sectioned key: value file; flags override file values. Outputs are
byte-stable given identical config and seeds; timestamps go only to the
fmcast_run.log sidecar.
"""
from __future__ import annotations

import argparse
import datetime
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import forecast as fcast
from . import grid as griddata
from . import synth as synthmod
from . import tensor_io, training, verify
from .config import ConfigError, ExperimentConfig, load_config
from .network import load_checkpoint


def _log(directory: Path, message: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    stamp = datetime.datetime.now().isoformat(timespec="seconds")
    with open(directory / "fmcast_run.log", "a", encoding="utf-8") as f:
        f.write(f"{stamp} {message}\n")


def _season_path(cfg: ExperimentConfig, year: int) -> Path:
    return cfg.archive_dir / f"season_{year}.fmct"


def _stats_path(cfg: ExperimentConfig) -> Path:
    return cfg.checkpoint_dir / "norm_stats.txt"


def save_stats(stats: griddata.NormStats, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("train_years: " + ",".join(map(str, stats.train_years)) + "\n")
        f.write(f"fingerprint: {stats.fingerprint()}\n")
        for ch, m, s in zip(stats.layout.channels, stats.mean, stats.std):
            f.write(f"{ch.name}: {float(m)!r} {float(s)!r}\n")


def load_stats(path: Path, layout: griddata.ChannelLayout) -> griddata.NormStats:
    mean = np.empty(len(layout))
    std = np.empty(len(layout))
    train_years: tuple[int, ...] = ()
    with open(path, encoding="utf-8") as f:
        for line in f:
            key, _, value = line.partition(":")
            key, value = key.strip(), value.strip()
            if key == "train_years":
                train_years = tuple(int(y) for y in value.split(","))
            elif key == "fingerprint":
                continue
            else:
                i = layout.index_of(key)
                m, s = value.split()
                mean[i], std[i] = float(m), float(s)
    return griddata.NormStats(mean=mean, std=std, layout=layout, train_years=train_years)


def _load_archive(cfg: ExperimentConfig) -> dict[int, griddata.SeasonTensor]:
    seasons = {}
    for year in cfg.archive_years:
        path = _season_path(cfg, year)
        if not path.exists():
            raise FileNotFoundError(f"archive season missing: {path}")
        seasons[year] = tensor_io.load_tensor(path)
    return seasons


def _events(cfg: ExperimentConfig) -> list[synthmod.EventLabel]:
    explicit = cfg.event_list()
    if explicit is not None:
        return [synthmod.EventLabel(year=y, onset_day=d, event_type="external") for y, d in explicit]
    manifest = cfg.archive_dir / "events.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"event manifest missing: {manifest}")
    return synthmod.load_manifest(manifest)


def cmd_synth(cfg: ExperimentConfig) -> int:
    cfg.archive_dir.mkdir(parents=True, exist_ok=True)
    seasons, manifest = synthmod.generate_archive(
        cfg.synth, cfg.archive_years, grid=cfg.grid, layout=cfg.layout
    )
    for season in seasons:
        tensor_io.save_tensor(season, _season_path(cfg, season.year), provenance=cfg.fingerprint)
    synthmod.save_manifest(manifest, cfg.archive_dir / "events.csv")
    _log(cfg.archive_dir, f"synth years={cfg.archive_years[0]}-{cfg.archive_years[-1]}")
    print(f"wrote {len(seasons)} seasons to {cfg.archive_dir}")
    print(f"{len(manifest)} labeled events:")
    for ev in manifest:
        print(f"  {ev.year} day {ev.onset_day} ({ev.event_type})")
    return 0


def _validation_score(cfg: ExperimentConfig, stats, archive, train_years):
    """Checkpoint scorer: mean ensemble ACC of the diagnostic u-channel on
    the onset day at the configured validation lead."""
    ci = cfg.layout.u_diagnostic_index()
    train_seasons = [archive[y] for y in train_years]
    clim = verify.climatology(train_seasons, ci)

    def score(ckpt_path, events) -> float:
        net, _ = load_checkpoint(ckpt_path)
        accs = []
        for ev in events:
            lead = cfg.validation_lead
            init_day = ev.onset_day - lead
            if init_day < 2:
                continue
            truth = archive[ev.year]
            norm = griddata.normalize(truth, stats)
            initial = norm.values[init_day - 1 : init_day + 1]
            fc = fcast.forecast(
                net, initial,
                fcast.ForecastConfig(
                    n_steps=cfg.forecast.n_steps, horizon=lead,
                    members=cfg.validation_members,
                    master_seed=cfg.forecast.master_seed, init_day=init_day,
                ),
                cfg.grid, cfg.layout, year=ev.year,
            )
            mean_field = fc.physical_values(stats).mean(axis=0)[lead - 1, ci]
            try:
                accs.append(verify.acc(mean_field, truth.values[ev.onset_day, ci], clim))
            except verify.UndefinedAccError:
                accs.append(0.0)
        return float(np.mean(accs)) if accs else 0.0

    return score


def cmd_train(cfg: ExperimentConfig, resume: bool = False) -> int:
    archive = _load_archive(cfg)
    train_years = sorted(set(cfg.archive_years) - set(cfg.test_years))
    train_seasons = [archive[y] for y in train_years]
    stats = griddata.compute_norm_stats(train_seasons)
    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    save_stats(stats, _stats_path(cfg))
    normalized = [griddata.normalize(s, stats) for s in train_seasons]

    net, start_epoch = None, 0
    if resume:
        existing = sorted(cfg.checkpoint_dir.glob("checkpoint_ep*.fmcparm"))
        if existing:
            net, meta = load_checkpoint(existing[-1])
            start_epoch = int(meta["step"])
            print(f"resuming from {existing[-1].name} (epoch {start_epoch})")

    result = training.train(
        normalized, cfg.net, cfg.train,
        checkpoint_dir=cfg.checkpoint_dir, net=net, start_epoch=start_epoch,
        provenance=f"{cfg.fingerprint} stats:{stats.fingerprint()}",
    )
    training.save_loss_trace(result.trace, cfg.checkpoint_dir / "loss_trace.csv")

    events = [ev for ev in _events(cfg) if ev.year in cfg.test_years]
    ckpts = sorted(cfg.checkpoint_dir.glob("checkpoint_ep*.fmcparm"))
    try:
        epoch, chosen = training.select_checkpoint(
            [(int(p.stem.split("ep")[-1]), p) for p in ckpts],
            events,
            _validation_score(cfg, stats, archive, train_years),
        )
        with open(cfg.checkpoint_dir / "selection.txt", "w", encoding="utf-8") as f:
            f.write(f"selected: {Path(chosen).name}\nepoch: {epoch}\n")
        print(f"selected checkpoint: {Path(chosen).name}")
    except training.SelectionError as e:
        print(f"checkpoint selection skipped: {e}", file=sys.stderr)
    _log(cfg.checkpoint_dir, f"train epochs={cfg.train.epochs} seed={cfg.train.seed}")
    return 0


def cmd_forecast(
    cfg: ExperimentConfig,
    checkpoint: Path,
    event: tuple[int, int],
    lead: int,
    out: Path | None = None,
    perfect_troposphere: bool = False,
) -> int:
    year, onset = event
    init_day = onset - lead
    if init_day < 2:
        raise ValueError(f"lead {lead} too large: init day {init_day} < 2")
    net, _ = load_checkpoint(checkpoint)
    stats = load_stats(_stats_path(cfg), cfg.layout)
    truth = tensor_io.load_tensor(_season_path(cfg, year))
    norm = griddata.normalize(truth, stats)
    initial = norm.values[init_day - 1 : init_day + 1]
    config = fcast.ForecastConfig(
        n_steps=cfg.forecast.n_steps,
        horizon=cfg.forecast.horizon,
        members=cfg.forecast.members,
        master_seed=cfg.forecast.master_seed,
        perfect_troposphere=perfect_troposphere,
        init_day=init_day,
    )
    ens = fcast.forecast(
        net, initial, config, cfg.grid, cfg.layout, year=year,
        truth=norm if perfect_troposphere else None,
        stats_fingerprint=stats.fingerprint(),
    )
    out_dir = out or cfg.report_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = "_pt" if perfect_troposphere else ""
    path = out_dir / f"ensemble_{year}_lead{lead}{suffix}.fmce"
    fcast.save_ensemble(ens, path, provenance=cfg.fingerprint)
    _log(out_dir, f"forecast year={year} lead={lead} members={config.members}")
    print(f"wrote {path}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, ensemble_paths: list[Path]) -> int:
    stats = load_stats(_stats_path(cfg), cfg.layout)
    fp = stats.fingerprint()
    ensembles = []
    for p in ensemble_paths:
        ens = fcast.load_ensemble(p)
        if ens.stats_fingerprint and ens.stats_fingerprint != fp:
            raise verify.VerificationError(
                f"{p}: stats fingerprint {ens.stats_fingerprint} does not match {fp}; "
                "refusing to mix normalization provenances"
            )
        ensembles.append(ens)
    archive = _load_archive(cfg)
    events = _events(cfg)
    report = verify.build_report(
        ensembles,
        truth_by_year={y: s for y, s in archive.items()},
        archive=list(archive.values()),
        events=events,
        stats=stats,
    )
    written = verify.write_report_tables(report, cfg.report_dir)
    _log(cfg.report_dir, f"evaluate n_ensembles={len(ensembles)}")
    for p in written:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmcast")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("synth", help="generate a synthetic archive plus event manifest")
    common(p)

    p = sub.add_parser("train", help="train the velocity network on the archive")
    common(p)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("forecast", help="run an autoregressive ensemble forecast")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--event", required=True, help="year:onset-day")
    p.add_argument("--lead", required=True, type=int)
    p.add_argument("--members", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--perfect-troposphere", action="store_true")

    p = sub.add_parser("evaluate", help="verify ensemble files against archive truth")
    common(p)
    p.add_argument("ensembles", nargs="+", type=Path)
    return parser


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("FMCAST_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides["synth.seed"] = str(args.seed)
        overrides["train.seed"] = str(args.seed)
        overrides["forecast.master_seed"] = str(args.seed)
    if args.command == "forecast":
        if args.members is not None:
            overrides["forecast.members"] = str(args.members)
        if args.horizon is not None:
            overrides["forecast.horizon"] = str(args.horizon)
        if args.steps is not None:
            overrides["forecast.n_steps"] = str(args.steps)
    try:
        cfg = load_config(args.config, overrides)
        if args.out is not None:
            if args.command == "synth":
                cfg.archive_dir = args.out
            elif args.command == "train":
                cfg.checkpoint_dir = args.out
            else:
                cfg.report_dir = args.out
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "forecast":
            year, day = args.event.split(":")
            checkpoint = args.checkpoint
            if checkpoint is None:
                sel = cfg.checkpoint_dir / "selection.txt"
                if not sel.exists():
                    raise FileNotFoundError("no --checkpoint given and no selection.txt found")
                name = sel.read_text().splitlines()[0].split(":")[1].strip()
                checkpoint = cfg.checkpoint_dir / name
            return cmd_forecast(
                cfg, checkpoint, (int(year), int(day)), args.lead,
                out=args.out, perfect_troposphere=args.perfect_troposphere,
            )
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.ensembles)
        raise AssertionError(args.command)
    except (ConfigError, FileNotFoundError, ValueError, OSError,
            verify.VerificationError, fcast.InterventionError,
            training.TrainingAborted, tensor_io.TensorFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
