"""Deterministic 64-bit seed derivation.

All stochastic components (synthetic seasons, ensemble members, per-day
noise draws) derive their seeds from a master seed through the splitmix64
finisher, so archives and ensembles are extensible without shifting the
streams of earlier years/members.
"""
from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One round of the splitmix64 output mix (Steele et al. 2014)."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix(master: int, salt: int) -> int:
    """Mix a master seed with a salt (year, member index, ...) into a new seed."""
    return splitmix64(splitmix64(master & _MASK64) ^ ((salt & _MASK64) * _GOLDEN & _MASK64))


def derive_year_seed(master: int, year: int) -> int:
    """Per-year sub-seed for archive generation."""
    return mix(master, year)


def derive_member_seed(master: int, member: int) -> int:
    """Per-ensemble-member sub-seed; injective over member indices < 2**32."""
    if member < 0:
        raise ValueError(f"member index must be >= 0, got {member}")
    return mix(master, member)


def derive_step_seed(member_seed: int, day: int) -> int:
    """Per-autoregressive-day noise seed within one member's trajectory."""
    return mix(member_seed, day)
