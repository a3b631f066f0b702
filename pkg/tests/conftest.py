import numpy as np
import pytest
import torch

from fmcast.grid import (
    ChannelLayout,
    GridSpec,
    SeasonTensor,
    desk_layout,
    season_calendar,
)

# Single-threaded torch keeps kernel outputs bit-stable across machines and
# matches the acceptance criteria's one-core budgets.
torch.set_num_threads(1)


@pytest.fixture
def tiny_grid() -> GridSpec:
    return GridSpec(n_lat=4, n_lon=8, lat_start_deg=50.0, lat_step_deg=4.0, lon_step_deg=45.0)


@pytest.fixture
def layout() -> ChannelLayout:
    return desk_layout()


def make_season(
    year: int,
    grid: GridSpec,
    layout: ChannelLayout,
    rng: np.random.Generator,
    n_days: int | None = None,
    normalized: bool = False,
) -> SeasonTensor:
    """Random season fixture with the real calendar (truncated if asked)."""
    cal = tuple((d.month, d.day) for d in season_calendar(year))
    if n_days is not None:
        cal = cal[:n_days]
    values = rng.standard_normal((len(cal), len(layout), grid.n_lat, grid.n_lon))
    values = values + 3.0 * rng.standard_normal((1, len(layout), 1, 1))
    return SeasonTensor(
        year=year, values=values, day_calendar=cal, grid=grid,
        layout=layout, normalized=normalized,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
