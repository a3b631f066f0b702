"""ODE sampling of next-day states and the autoregressive ensemble loop.

One forecast day integrates dX/dt = v(X, t, cond) from a fresh Gaussian
draw at t=0 to t=1 (explicit Euler by default, midpoint available), then
feeds the result back as the newer condition day. In perfect-troposphere
mode the tropospheric-replaceable channels are overwritten with truth
(normalized units) after sampling and before reconditioning. Members are
independent: each has a derived seed, and a fresh noise map is drawn per
member per day.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import seeds
from .grid import ChannelLayout, GridSpec, NormStats, SeasonTensor
from .network import VelocityNet

ENSEMBLE_MAGIC = b"FMCENSB1"


class IntegrationFailure(Exception):
    """Non-finite state encountered mid-integration."""


class InterventionError(Exception):
    """Perfect-troposphere mode lacks truth for a required day."""


@dataclass(frozen=True)
class ForecastConfig:
    n_steps: int = 20
    horizon: int = 30
    members: int = 50
    master_seed: int = 0
    perfect_troposphere: bool = False
    init_day: int = 2            # season day index of the first forecast target minus one
    method: str = "euler"        # "euler" | "midpoint"

    def __post_init__(self):
        if self.n_steps < 1 or self.horizon < 1 or self.members < 1:
            raise ValueError("n_steps, horizon and members must all be >= 1")
        if self.init_day < 2:
            raise ValueError("init_day must be >= 2 (two condition days required)")
        if self.method not in ("euler", "midpoint"):
            raise ValueError(f"unknown integration method {self.method!r}")


derive_member_seed = seeds.derive_member_seed


def _integrate(
    net: VelocityNet,
    x0: torch.Tensor,
    cond: torch.Tensor,
    n_steps: int,
    method: str = "euler",
) -> torch.Tensor:
    # The condition is fixed across integration steps, so its encoder
    # features are computed once per day (bare-callable stubs skip this).
    cache = net.encode_condition(cond) if hasattr(net, "encode_condition") else None

    def velocity(x, t):
        if cache is None:
            return net(x, t, cond)
        return net(x, t, None, cond_features=cache)

    dt = 1.0 / n_steps
    x = x0
    for i in range(n_steps):
        t = i * dt
        if method == "euler":
            x = x + dt * velocity(x, t)
        else:
            x_mid = x + 0.5 * dt * velocity(x, t)
            x = x + dt * velocity(x_mid, min(t + 0.5 * dt, 1.0))
        if not torch.all(torch.isfinite(x)):
            raise IntegrationFailure(f"non-finite state at integration step {i}")
    return x


def sample_next_day(
    net: VelocityNet,
    cond: torch.Tensor,
    seed: int,
    n_steps: int,
    method: str = "euler",
) -> torch.Tensor:
    """Draw seeded Gaussian noise and integrate the velocity ODE from t=0 to 1.

    cond is one condition tensor (2C, lat, lon) or a batch thereof.
    """
    squeeze = cond.dim() == 3
    if squeeze:
        cond = cond[None]
    b = cond.shape[0]
    c = net.config.in_channels
    gen = torch.Generator().manual_seed(seed & (2**63 - 1))
    x0 = torch.randn((b, c, *cond.shape[2:]), generator=gen, dtype=cond.dtype)
    with torch.no_grad():
        x1 = _integrate(net, x0, cond, n_steps, method)
    return x1[0] if squeeze else x1


@dataclass(frozen=True)
class ForecastEnsemble:
    """Member-indexed autoregressive trajectories, normalized units."""

    year: int
    init_day: int
    values: np.ndarray                # (member, horizon, channel, lat, lon), normalized
    member_seeds: tuple[int, ...]
    config: ForecastConfig
    grid: GridSpec
    layout: ChannelLayout
    stats_fingerprint: str = ""
    intervention_channels: tuple[int, ...] = ()

    def lead_days(self, day_index: int) -> int:
        """Days since initialization for forecast slot day_index (0-based)."""
        return day_index + 1

    def season_day(self, day_index: int) -> int:
        """Absolute season day covered by forecast slot day_index."""
        return self.init_day + day_index + 1

    def physical_values(self, stats: NormStats) -> np.ndarray:
        """Denormalized view of the trajectories."""
        out = np.empty_like(self.values, dtype=np.float64)
        for i, ch in enumerate(self.layout.channels):
            if ch.sign_meaningful:
                out[:, :, i] = self.values[:, :, i] * stats.std[i]
            else:
                out[:, :, i] = self.values[:, :, i] * stats.std[i] + stats.mean[i]
        return out


def apply_intervention(
    state: torch.Tensor, truth_day: torch.Tensor, channel_indices: tuple[int, ...]
) -> torch.Tensor:
    """Overwrite the replaceable channels with truth; idempotent."""
    out = state.clone()
    for ci in channel_indices:
        out[..., ci, :, :] = truth_day[ci]
    return out


def forecast(
    net: VelocityNet,
    initial_days: np.ndarray,
    config: ForecastConfig,
    grid: GridSpec,
    layout: ChannelLayout,
    year: int = 0,
    truth: SeasonTensor | None = None,
    stats_fingerprint: str = "",
) -> ForecastEnsemble:
    """Autoregressive ensemble forecast from two normalized initial days.

    initial_days has shape (2, C, lat, lon) (older day first) and must be
    normalized with the training-period statistics. In perfect-troposphere
    mode `truth` supplies the normalized season to draw replacement values
    from. Members run batched with per-member noise streams; repeated runs
    are bit-identical, and a serial member loop agrees up to float32
    summation-order rounding.
    """
    if initial_days.shape[0] != 2:
        raise ValueError("initial_days must hold exactly two days (older first)")
    intervened: tuple[int, ...] = ()
    if config.perfect_troposphere:
        if truth is None:
            raise InterventionError("perfect-troposphere mode requires a truth source")
        if not truth.normalized:
            raise InterventionError("truth source must be normalized with the training stats")
        intervened = layout.trop_replaceable_indices()
        if len(intervened) != 4:
            raise InterventionError(
                "layout lacks the four tropospheric-replaceable channels (T/Z at 850 and 500 hPa)"
            )

    m = config.members
    member_seeds = tuple(derive_member_seed(config.master_seed, i) for i in range(m))
    init = torch.from_numpy(np.asarray(initial_days, dtype=np.float32))
    older = init[0][None].repeat(m, 1, 1, 1)
    newer = init[1][None].repeat(m, 1, 1, 1)
    c = net.config.in_channels
    out = np.empty((m, config.horizon, c, grid.n_lat, grid.n_lon), dtype=np.float32)

    truth_t = None
    if truth is not None:
        truth_t = torch.from_numpy(truth.values.astype(np.float32))

    for k in range(config.horizon):
        season_day = config.init_day + k + 1
        x0 = torch.empty_like(older[:, :c])
        for i, mseed in enumerate(member_seeds):
            gen = torch.Generator().manual_seed(seeds.derive_step_seed(mseed, k) & (2**63 - 1))
            x0[i] = torch.randn(x0.shape[1:], generator=gen, dtype=x0.dtype)
        cond = torch.cat([older, newer], dim=1)
        try:
            with torch.no_grad():
                state = _integrate(net, x0, cond, config.n_steps, config.method)
        except IntegrationFailure as e:
            raise IntegrationFailure(f"forecast day {k + 1}: {e}") from e
        if config.perfect_troposphere:
            if season_day >= truth_t.shape[0]:
                raise InterventionError(
                    f"truth source has no day {season_day} (season length {truth_t.shape[0]})"
                )
            state = apply_intervention(state, truth_t[season_day], intervened)
        out[:, k] = state.numpy()
        older, newer = newer, state

    return ForecastEnsemble(
        year=year,
        init_day=config.init_day,
        values=out,
        member_seeds=member_seeds,
        config=config,
        grid=grid,
        layout=layout,
        stats_fingerprint=stats_fingerprint,
        intervention_channels=intervened,
    )


def save_ensemble(ens: ForecastEnsemble, path: str | Path, provenance: str = "") -> None:
    g = ens.grid
    header_lines = [
        f"year: {ens.year}",
        f"init_day: {ens.init_day}",
        f"horizon: {ens.config.horizon}",
        f"members: {ens.config.members}",
        f"n_steps: {ens.config.n_steps}",
        f"method: {ens.config.method}",
        f"master_seed: {ens.config.master_seed}",
        "member_seeds: " + ",".join(map(str, ens.member_seeds)),
        f"perfect_troposphere: {int(ens.config.perfect_troposphere)}",
        "intervention_channels: " + ",".join(map(str, ens.intervention_channels)),
        f"grid: {g.n_lat} {g.n_lon} {g.lat_start_deg} {g.lat_step_deg} {g.lon_step_deg}",
        "channels: " + ",".join(f"{c.variable}:{c.level_hpa}" for c in ens.layout.channels),
        f"diagnostic_level: {ens.layout.diagnostic_level_hpa}",
        f"stats_fingerprint: {ens.stats_fingerprint}",
        f"provenance: {provenance}",
    ]
    header = "\n".join(header_lines).encode("utf-8")
    with open(path, "wb") as f:
        f.write(ENSEMBLE_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(ens.values, dtype="<f4").tobytes())


class EnsembleFormatError(Exception):
    pass


def load_ensemble(path: str | Path) -> ForecastEnsemble:
    from .grid import Channel

    raw = Path(path).read_bytes()
    if raw[:8] != ENSEMBLE_MAGIC:
        raise EnsembleFormatError(f"bad magic in {path}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    fields: dict[str, str] = {}
    for line in raw[12 : 12 + hlen].decode("utf-8").splitlines():
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    n_lat, n_lon, lat0, dlat, dlon = fields["grid"].split()
    grid = GridSpec(int(n_lat), int(n_lon), float(lat0), float(dlat), float(dlon))
    channels = tuple(
        Channel(v, int(lev)) for v, lev in (tok.split(":") for tok in fields["channels"].split(","))
    )
    layout = ChannelLayout(channels, diagnostic_level_hpa=int(fields["diagnostic_level"]))
    config = ForecastConfig(
        n_steps=int(fields["n_steps"]),
        horizon=int(fields["horizon"]),
        members=int(fields["members"]),
        master_seed=int(fields["master_seed"]),
        perfect_troposphere=bool(int(fields["perfect_troposphere"])),
        init_day=int(fields["init_day"]),
        method=fields["method"],
    )
    shape = (config.members, config.horizon, len(layout), grid.n_lat, grid.n_lon)
    payload = raw[12 + hlen :]
    if len(payload) != int(np.prod(shape)) * 4:
        raise EnsembleFormatError("payload length does not match declared shape")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    intervened = tuple(
        int(x) for x in fields["intervention_channels"].split(",") if x.strip()
    )
    return ForecastEnsemble(
        year=int(fields["year"]),
        init_day=config.init_day,
        values=values,
        member_seeds=tuple(int(s) for s in fields["member_seeds"].split(",")),
        config=config,
        grid=grid,
        layout=layout,
        stats_fingerprint=fields.get("stats_fingerprint", ""),
        intervention_channels=intervened,
    )
