"""On-disk season tensor format.

Layout: 8-byte magic "FMCTNSR1", a 4-byte little-endian unsigned header
length, a UTF-8 "key: value" text header, then the payload as little-endian
IEEE-754 32-bit floats in (day, channel, lat, lon) C order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grid import Channel, ChannelLayout, GridSpec, SeasonTensor

MAGIC = b"FMCTNSR1"


class TensorFormatError(Exception):
    """Corrupt header, shape/length mismatch, or non-finite payload."""


def _header_lines(season: SeasonTensor, provenance: str = "") -> list[str]:
    g = season.grid
    lines = [
        f"year: {season.year}",
        f"season_length: {season.n_days}",
        f"grid: {g.n_lat} {g.n_lon} {g.lat_start_deg} {g.lat_step_deg} {g.lon_step_deg}",
        "channels: " + ",".join(
            f"{c.variable}:{c.level_hpa}" for c in season.layout.channels
        ),
        f"diagnostic_level: {season.layout.diagnostic_level_hpa}",
        "calendar: " + ",".join(f"{m}-{d}" for m, d in season.day_calendar),
        f"normalized: {int(season.normalized)}",
        f"provenance: {provenance}",
    ]
    return lines


def save_tensor(season: SeasonTensor, path: str | Path, provenance: str = "") -> None:
    header = "\n".join(_header_lines(season, provenance)).encode("utf-8")
    payload = np.ascontiguousarray(season.values, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)


def _parse_header(text: str) -> dict[str, str]:
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(":")
        if not _:
            raise TensorFormatError(f"malformed header line: {line!r}")
        fields[key.strip()] = value.strip()
    return fields


def load_tensor(path: str | Path) -> SeasonTensor:
    """Load and validate a season tensor; raises TensorFormatError on corruption."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise TensorFormatError(f"bad magic in {path}")
    (header_len,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + header_len:
        raise TensorFormatError("truncated header")
    try:
        fields = _parse_header(raw[12 : 12 + header_len].decode("utf-8"))
        year = int(fields["year"])
        n_days = int(fields["season_length"])
        n_lat, n_lon, lat0, dlat, dlon = fields["grid"].split()
        grid = GridSpec(int(n_lat), int(n_lon), float(lat0), float(dlat), float(dlon))
        channels = tuple(
            Channel(v, int(lev))
            for v, lev in (tok.split(":") for tok in fields["channels"].split(","))
        )
        layout = ChannelLayout(channels, diagnostic_level_hpa=int(fields["diagnostic_level"]))
        calendar = tuple(
            (int(m), int(d)) for m, d in (tok.split("-") for tok in fields["calendar"].split(","))
        )
        normalized = bool(int(fields.get("normalized", "0")))
    except (KeyError, ValueError) as e:
        raise TensorFormatError(f"corrupt header: {e}") from e

    shape = (n_days, len(layout), grid.n_lat, grid.n_lon)
    expected_bytes = int(np.prod(shape)) * 4
    payload = raw[12 + header_len :]
    if len(payload) != expected_bytes:
        raise TensorFormatError(
            f"payload length {len(payload)} does not match declared shape {shape}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    if len(calendar) != n_days:
        raise TensorFormatError("calendar length does not match season_length")
    if not np.all(np.isfinite(values)):
        raise TensorFormatError("non-finite values in payload")
    return SeasonTensor(
        year=year, values=values, day_calendar=calendar,
        grid=grid, layout=layout, normalized=normalized,
    )


def read_provenance(path: str | Path) -> str:
    """Provenance string from a tensor file header without loading the payload."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise TensorFormatError(f"bad magic in {path}")
        (header_len,) = struct.unpack("<I", f.read(4))
        fields = _parse_header(f.read(header_len).decode("utf-8"))
    return fields.get("provenance", "")
