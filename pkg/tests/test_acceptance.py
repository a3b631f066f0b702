"""End-to-end acceptance suite.

Each test asserts one release gate at its stated tolerance and budget:

 1. kernel oracle equivalence (>= 20 random shapes each, rel < 1e-6, < 60 s)
 2. gradient checks vs central finite differences (rel < 1e-3, < 5 min)
 3. ODE sampler exactness on closed-form stubs
 4. verification metric oracles (1e-12) and the strict=>relaxed property
 5. unconditional flow matching recovers Gaussian-mixture moments
 6. end-to-end synthetic forecast skill at a 5-day lead
 7. perfect-troposphere runs beat free-running index RMSE at a 10-day lead
 8. byte-determinism of artifacts and the single-core forecast time budget
 9. default-constant conformance (schedules, windows, leads, sampler)
"""
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from fmcast import cli, verify
from fmcast.forecast import ForecastConfig, _integrate, forecast, sample_next_day
from fmcast.grid import (
    DESK_GRID,
    compute_norm_stats,
    desk_layout,
    normalize,
)
from fmcast.kernels import conv2d_zonal_periodic, group_norm_affine, self_attention
from fmcast.network import NetConfig, init_parameters
from fmcast.synth import SynthParams, generate_archive
from fmcast.training import (
    MomentOptimizer,
    TrainConfig,
    batch_schedule,
    fm_loss,
    lr_schedule,
    train,
)
from .oracles import (
    conv2d_zonal_periodic_naive,
    finite_difference_grad,
    group_norm_naive,
    relative_error,
    rmse_naive,
    acc_naive,
    self_attention_naive,
)

pytestmark = pytest.mark.acceptance

torch.set_num_threads(1)


class _StubNet:
    """Bare velocity callable for sampler and loss oracles."""

    def __init__(self, fn, in_channels):
        self.fn = fn
        self.config = SimpleNamespace(in_channels=in_channels)

    def __call__(self, x, t, cond, cond_features=None):
        return self.fn(x, t, cond)


def test_criterion_1_kernel_oracles():
    started = time.monotonic()
    rng = np.random.default_rng(11)
    worst = 0.0

    for _ in range(20):
        b, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(3, 7), rng.integers(3, 9)
        stride = int(rng.choice([1, 2]))
        x = torch.tensor(rng.standard_normal((b, cin, h, w)))
        k = torch.tensor(rng.standard_normal((cout, cin, 3, 3)))
        bias = torch.tensor(rng.standard_normal(cout))
        got = conv2d_zonal_periodic(x, k, bias, stride=stride).numpy()
        want = conv2d_zonal_periodic_naive(x.numpy(), k.numpy(), bias.numpy(), stride=stride)
        worst = max(worst, relative_error(got, want))

    for _ in range(20):
        b, g = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        c = g * int(rng.integers(1, 4))
        h, w = rng.integers(2, 6), rng.integers(2, 6)
        x = torch.tensor(rng.standard_normal((b, c, h, w)))
        gamma = torch.tensor(rng.standard_normal(c))
        beta = torch.tensor(rng.standard_normal(c))
        got = group_norm_affine(x, g, gamma, beta).numpy()
        want = group_norm_naive(x.numpy(), g, gamma.numpy(), beta.numpy())
        worst = max(worst, relative_error(got, want))

    for _ in range(20):
        b, c = int(rng.integers(1, 3)), int(rng.integers(2, 5))
        h, w = rng.integers(2, 5), rng.integers(2, 5)
        x = torch.tensor(rng.standard_normal((b, c, h, w)))
        wq = torch.tensor(rng.standard_normal((c, c)))
        wk = torch.tensor(rng.standard_normal((c, c)))
        wv = torch.tensor(rng.standard_normal((c, c)))
        wo = torch.tensor(rng.standard_normal((c, c)))
        got = self_attention(x, wq, wk, wv, wo).numpy()
        want = self_attention_naive(x.numpy(), wq.numpy(), wk.numpy(), wv.numpy(), wo.numpy())
        worst = max(worst, relative_error(got, want))

    stub = _StubNet(lambda x, t, cond: 2.0 * x + cond[:, : x.shape[1]].mean(), 3)
    for _ in range(20):
        b = int(rng.integers(1, 4))
        x1 = torch.tensor(rng.standard_normal((b, 3, 4, 5)))
        x0 = torch.tensor(rng.standard_normal((b, 3, 4, 5)))
        cond = torch.tensor(rng.standard_normal((b, 6, 4, 5)))
        t = torch.tensor(rng.uniform(0, 1, b))
        got = float(fm_loss(stub, x1, cond, x0, t))
        x1n, x0n, cn, tn = x1.numpy(), x0.numpy(), cond.numpy(), t.numpy()
        total, count = 0.0, 0
        for i in range(b):
            xt = tn[i] * x1n[i] + (1 - tn[i]) * x0n[i]
            v = 2.0 * xt + cn[:, :3].mean()
            err = x1n[i] - x0n[i] - v
            total += float((err**2).sum())
            count += err.size
        worst = max(worst, relative_error(np.array(got), np.array(total / count)))

    elapsed = time.monotonic() - started
    assert worst < 1e-6, f"worst kernel oracle relative error {worst}"
    assert elapsed < 60.0, f"kernel oracle suite took {elapsed:.1f}s"


def test_criterion_2_gradient_suite():
    started = time.monotonic()
    rng = np.random.default_rng(22)
    worst = 0.0

    def fd_vs_autograd(f, x):
        xt = torch.tensor(x, requires_grad=True)
        y = f(xt)
        (grad,) = torch.autograd.grad(y, xt)
        fd = finite_difference_grad(lambda a: float(f(torch.tensor(a))), x)
        return relative_error(grad.numpy(), fd)

    k = torch.tensor(rng.standard_normal((2, 2, 3, 3)))
    bias = torch.tensor(rng.standard_normal(2))
    x = rng.standard_normal((1, 2, 4, 5))
    for stride in (1, 2):
        worst = max(worst, fd_vs_autograd(
            lambda a, s=stride: conv2d_zonal_periodic(a, k, bias, stride=s).square().sum(), x))

    gamma = torch.tensor(rng.standard_normal(4))
    beta = torch.tensor(rng.standard_normal(4))
    x = rng.standard_normal((2, 4, 3, 3))
    worst = max(worst, fd_vs_autograd(
        lambda a: group_norm_affine(a, 2, gamma, beta).square().sum(), x))

    wq, wk, wv, wo = (torch.tensor(rng.standard_normal((3, 3))) for _ in range(4))
    x = rng.standard_normal((1, 3, 3, 4))
    worst = max(worst, fd_vs_autograd(
        lambda a: self_attention(a, wq, wk, wv, wo).square().sum(), x))

    # Full tiny network (base width 4): directional derivatives through every
    # parameter against central differences.
    cfg = NetConfig(in_channels=2, base_width=4, mults=(1, 2, 2, 4), groups=2, embed_dim=8)
    net = init_parameters(cfg, 77).double()
    params = [p for _, p in net.named_parameters()]
    xin = torch.tensor(rng.standard_normal((1, 2, 5, 6)))
    cond = torch.tensor(rng.standard_normal((1, 4, 5, 6)))
    weight = torch.tensor(rng.standard_normal((1, 2, 5, 6)))

    def loss():
        return (net(xin, 0.4, cond) * weight).sum()

    grads = torch.autograd.grad(loss(), params)
    h = 1e-4
    dir_rng = np.random.default_rng(23)
    for _ in range(5):
        ds = [torch.tensor(dir_rng.standard_normal(tuple(p.shape))) for p in params]
        norm = float(torch.sqrt(sum((d**2).sum() for d in ds)))
        ds = [d / norm for d in ds]
        analytic = float(sum((g * d).sum() for g, d in zip(grads, ds)))
        with torch.no_grad():
            for p, d in zip(params, ds):
                p += h * d
            plus = float(loss())
            for p, d in zip(params, ds):
                p -= 2 * h * d
            minus = float(loss())
            for p, d in zip(params, ds):
                p += h * d
        numeric = (plus - minus) / (2 * h)
        worst = max(worst, relative_error(np.array(analytic), np.array(numeric)))

    elapsed = time.monotonic() - started
    assert worst < 1e-3, f"worst gradient relative error {worst}"
    assert elapsed < 300.0, f"gradient suite took {elapsed:.1f}s"


def test_criterion_3_sampler_exactness():
    gen = torch.Generator().manual_seed(5)
    x0 = torch.randn((1, 2, 3, 4), generator=gen, dtype=torch.float64)
    cond = torch.zeros((1, 4, 3, 4), dtype=torch.float64)
    c = torch.randn((1, 2, 3, 4), generator=gen, dtype=torch.float64)

    const = _StubNet(lambda x, t, cond: c.expand_as(x), 2)
    for n_steps in (1, 5, 20):
        got = _integrate(const, x0, cond, n_steps)
        assert float((got - (x0 + c)).abs().max()) < 1e-12

    linear = _StubNet(lambda x, t, cond: -x, 2)
    got = _integrate(linear, x0, cond, 20)
    want = (1 - 1 / 20) ** 20 * x0
    assert float((got - want).abs().max()) < 1e-9


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(44)
    grid = DESK_GRID
    row = grid.diagnostic_lat_index()

    for _ in range(20):
        pred = rng.standard_normal((grid.n_lat, grid.n_lon))
        truth = rng.standard_normal((grid.n_lat, grid.n_lon))
        clim = rng.standard_normal((grid.n_lat, grid.n_lon))
        assert relative_error(np.array(verify.rmse(pred, truth)),
                              np.array(rmse_naive(pred, truth))) < 1e-12
        assert relative_error(np.array(verify.acc(pred, truth, clim)),
                              np.array(acc_naive(pred, truth, clim))) < 1e-12
        assert relative_error(np.array(verify.vortex_index(pred, grid)),
                              np.array(sum(pred[row]) / grid.n_lon)) < 1e-12

    from .conftest import make_season

    seasons = [make_season(y, grid, desk_layout(), rng) for y in (2001, 2002)]
    got = verify.climatology(seasons, 1)
    total = np.zeros((grid.n_lat, grid.n_lon))
    count = 0
    for s in seasons:
        for d, (m, _) in enumerate(s.day_calendar):
            if m in (11, 12, 1, 2, 3):
                total += s.values[d, 1]
                count += 1
    assert relative_error(got, total / count) < 1e-12

    for _ in range(200):
        series = rng.normal(10, 12, rng.integers(1, 30))
        for crit, thr in ((verify.STRICT, 0.0), (verify.RELAXED, 5.0)):
            v = verify.detect_ssw(series, crit)
            hits = [i for i, x in enumerate(series) if x < thr]
            assert v.detected == bool(hits)
            assert v.onset_day == (hits[0] if hits else None)

    for lead in range(1, 25):
        want = 5 if lead >= 10 else (3 if lead >= 6 else 2)
        assert verify.timing_window(lead) == want

    for _ in range(20):
        flags = rng.random(rng.integers(1, 60)) < 0.4
        verdicts = [
            verify.SSWVerdict(bool(f), 0 if f else None, verify.STRICT, timely=bool(f))
            for f in flags
        ]
        want = 100.0 * sum(flags) / len(flags)
        assert verify.ensemble_accuracy(verdicts) == want

    for _ in range(1000):
        series = rng.normal(rng.uniform(-5, 20), rng.uniform(0.1, 15), rng.integers(1, 40))
        s = verify.detect_ssw(series, verify.STRICT)
        r = verify.detect_ssw(series, verify.RELAXED)
        if s.detected:
            assert r.detected and r.onset_day <= s.onset_day


@pytest.mark.slow
def test_criterion_5_mixture_moments():
    started = time.monotonic()
    cfg = NetConfig(in_channels=2, base_width=4, mults=(1, 1, 2, 2), groups=2, embed_dim=8)
    net = init_parameters(cfg, 12345)
    params = [p for _, p in net.named_parameters()]
    opt = MomentOptimizer(params, weight_decay=0.0)

    # Two-component mixture over an 8-dimensional field (2 channels, 2x2).
    mu_a = torch.tensor([1.5, -0.5]).view(2, 1, 1).expand(2, 2, 2)
    mu_b = torch.tensor([-1.0, 1.0]).view(2, 1, 1).expand(2, 2, 2)
    sigma = 0.5
    mean_true = 0.5 * (mu_a + mu_b)
    var_true = sigma**2 + 0.5 * (mu_a**2 + mu_b**2) - mean_true**2

    gen = torch.Generator().manual_seed(999)
    batch = 256
    for step in range(6000):
        lr = 2e-3 * 0.5 ** (step // 2000)
        z = torch.rand(batch, 1, 1, 1, generator=gen) < 0.5
        mu = torch.where(z, mu_a, mu_b)
        x1 = mu + sigma * torch.randn(batch, 2, 2, 2, generator=gen)
        x0 = torch.randn(batch, 2, 2, 2, generator=gen)
        t = torch.rand(batch, generator=gen)
        cond = torch.zeros(batch, 4, 2, 2)  # condition frozen at zero
        loss = fm_loss(net, x1, cond, x0, t)
        grads = torch.autograd.grad(loss, params)
        opt.step(list(grads), lr)

    samples = sample_next_day(net, torch.zeros(1000, 4, 2, 2), seed=777, n_steps=20)
    mean_err = float((samples.mean(dim=0) - mean_true).abs().max())
    var_rel = float(((samples.var(dim=0) - var_true) / var_true).abs().max())
    elapsed = time.monotonic() - started
    assert mean_err < 0.1, f"per-dimension mean error {mean_err}"
    assert var_rel < 0.2, f"per-dimension variance relative error {var_rel}"
    assert elapsed < 600.0, f"mixture check took {elapsed:.1f}s"


@pytest.fixture(scope="module")
def desk_experiment():
    """Shared archive + trained model for the skill and intervention gates.

    12 seasons on the 16x24 grid. The coupling gain is set so a wave burst
    takes about a week to drive the index through zero, which puts the
    tropospheric precursor inside a 5-day forecast window; the reduced wave
    amplitudes keep the event-day anomaly dominated by its predictable
    zonal-mean part. The held-out 2012 season has a labeled event at day 64.
    """
    started = time.monotonic()
    years = list(range(2001, 2013))
    params = SynthParams(season_length=120, seed=7, coupling_gain=1.2,
                         event_prob=0.006, wave1_amp=1.5, wave2_amp=0.75)
    seasons, manifest = generate_archive(
        params, years, grid=DESK_GRID, layout=desk_layout()
    )
    by_year = {s.year: s for s in seasons}
    train_seasons = [by_year[y] for y in years if y != 2012]
    stats = compute_norm_stats(train_seasons)
    normalized = [normalize(s, stats) for s in train_seasons]

    net_cfg = NetConfig(in_channels=6, base_width=16, mults=(1, 2, 2, 4),
                        groups=8, embed_dim=32)
    tr_cfg = TrainConfig(initial_lr=1e-4, lr_decay_factor=0.5, lr_decay_period=30,
                         epochs=60, weight_decay=1e-4, seed=3, checkpoint_every=1000)
    result = train(normalized, net_cfg, tr_cfg)

    event = [e for e in manifest if e.year == 2012][0]
    return SimpleNamespace(
        net=result.net,
        stats=stats,
        train_seasons=train_seasons,
        truth=by_year[2012],
        event=event,
        train_time=time.monotonic() - started,
    )


def _desk_forecast(exp, lead, members, perfect_troposphere=False, horizon=None):
    norm_truth = normalize(exp.truth, exp.stats)
    init_day = exp.event.onset_day - lead
    cfg = ForecastConfig(
        n_steps=20, horizon=horizon or lead + 3, members=members,
        master_seed=7, init_day=init_day, perfect_troposphere=perfect_troposphere,
    )
    return forecast(
        exp.net, norm_truth.values[init_day - 1 : init_day + 1], cfg,
        DESK_GRID, desk_layout(), year=exp.truth.year,
        truth=norm_truth if perfect_troposphere else None,
    )


@pytest.mark.slow
def test_criterion_6_end_to_end_skill(desk_experiment):
    exp = desk_experiment
    started = time.monotonic()
    ens = _desk_forecast(exp, lead=5, members=20)
    clim = {i: verify.climatology(exp.train_seasons, i) for i in range(6)}
    report = verify.verify_ensemble(ens, exp.truth, clim, exp.event, exp.stats)
    elapsed = exp.train_time + (time.monotonic() - started)
    assert report.acc_mean[4] > 0.5, (
        f"ensemble-mean ACC at 5-day lead: {report.acc_mean[4]}"
    )
    assert report.accuracy[verify.RELAXED] >= 50.0, (
        f"relaxed ensemble accuracy at 5-day lead: {report.accuracy[verify.RELAXED]}"
    )
    assert elapsed < 1800.0, f"end-to-end skill run took {elapsed:.1f}s"


@pytest.fixture(scope="module")
def strong_coupling_experiment():
    """Archive + model with strong troposphere->index coupling.

    A five-fold-stronger coupling gain makes a wave burst collapse the
    vortex within days, so the free-running 10-day forecast is nearly
    hopeless while the pinned troposphere carries the full burst signal.
    A short training run is enough for the directional comparison.
    """
    years = list(range(2001, 2013))
    params = SynthParams(season_length=120, seed=11, coupling_gain=6.0)
    seasons, manifest = generate_archive(
        params, years, grid=DESK_GRID, layout=desk_layout()
    )
    by_year = {s.year: s for s in seasons}
    train_seasons = [by_year[y] for y in years if y != 2012]
    stats = compute_norm_stats(train_seasons)
    normalized = [normalize(s, stats) for s in train_seasons]

    net_cfg = NetConfig(in_channels=6, base_width=16, mults=(1, 2, 2, 4),
                        groups=8, embed_dim=32)
    tr_cfg = TrainConfig(initial_lr=1e-4, lr_decay_factor=0.5, lr_decay_period=30,
                         epochs=20, weight_decay=1e-4, seed=3, checkpoint_every=1000)
    result = train(normalized, net_cfg, tr_cfg)

    event = [e for e in manifest if e.year == 2012][0]
    return SimpleNamespace(
        net=result.net,
        stats=stats,
        train_seasons=train_seasons,
        truth=by_year[2012],
        event=event,
    )


@pytest.mark.slow
def test_criterion_7_perfect_troposphere_direction(strong_coupling_experiment):
    exp = strong_coupling_experiment
    free = _desk_forecast(exp, lead=10, members=20, horizon=10)
    pt = _desk_forecast(exp, lead=10, members=20, horizon=10, perfect_troposphere=True)
    assert free.member_seeds == pt.member_seeds

    truth_idx = verify.season_index_series(exp.truth)[
        free.init_day + 1 : free.init_day + 11
    ]

    def index_rmse(ens):
        ci = desk_layout().u_diagnostic_index()
        row = DESK_GRID.diagnostic_lat_index()
        phys = ens.physical_values(exp.stats)
        mean_idx = phys[:, :, ci, row, :].mean(axis=(0, -1))
        return float(np.sqrt(np.mean((mean_idx - truth_idx) ** 2)))

    rmse_free = index_rmse(free)
    rmse_pt = index_rmse(pt)
    assert rmse_pt <= rmse_free + 1e-9, (
        f"perfect-troposphere index RMSE {rmse_pt} vs free-running {rmse_free}"
    )


TINY_CONFIG = """\
[paths]
archive_dir = archive
checkpoint_dir = checkpoints
report_dir = reports

[grid]
n_lat = 4
n_lon = 8
lat_start_deg = 50.0
lat_step_deg = 4.0
lon_step_deg = 45.0

[channels]
preset = desk

[synth]
years = 2001-2004
season_length = 48
seed = 5

[split]
test_years = 2004

[train]
base_width = 4
mults = 1,1,2,2
groups = 2
embed_dim = 8
epochs = 2
checkpoint_every = 1

[forecast]
n_steps = 2
horizon = 6
members = 3

[evaluate]
leads = 5
validation_lead = 3
validation_members = 2
"""


@pytest.mark.slow
def test_criterion_8_determinism_and_speed(tmp_path):
    runs = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        config = root / "config.ini"
        config.write_text(TINY_CONFIG)
        assert cli.main(["synth", "--config", str(config)]) == 0
        assert cli.main(["train", "--config", str(config)]) == 0
        assert cli.main(["forecast", "--config", str(config),
                         "--event", "2004:18", "--lead", "5"]) == 0
        assert cli.main(["evaluate", "--config", str(config),
                         str(root / "reports" / "ensemble_2004_lead5.fmce")]) == 0
        runs.append(root)

    a, b = runs
    artifacts = [
        "archive/season_2004.fmct", "archive/events.csv",
        "checkpoints/checkpoint_ep0001.fmcparm",
        "checkpoints/checkpoint_ep0002.fmcparm",
        "checkpoints/loss_trace.csv", "checkpoints/norm_stats.txt",
        "checkpoints/selection.txt",
        "reports/ensemble_2004_lead5.fmce",
        "reports/rmse_members.csv", "reports/acc_members.csv",
        "reports/index_series.csv", "reports/accuracy_matrix.csv",
    ]
    for rel in artifacts:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    # 50-member, 30-day forecast on the 16x24 grid with the default-width
    # network, single core.
    net = init_parameters(NetConfig(in_channels=6), 99)
    gen = torch.Generator().manual_seed(1)
    initial = torch.randn((2, 6, DESK_GRID.n_lat, DESK_GRID.n_lon), generator=gen).numpy()
    started = time.monotonic()
    ens = forecast(net, initial, ForecastConfig(master_seed=4),
                   DESK_GRID, desk_layout())
    elapsed = time.monotonic() - started
    assert ens.values.shape == (50, 30, 6, DESK_GRID.n_lat, DESK_GRID.n_lon)
    assert np.all(np.isfinite(ens.values))
    assert elapsed < 120.0, f"desk forecast took {elapsed:.1f}s"


def test_criterion_9_default_constants():
    cfg = TrainConfig()
    assert [lr_schedule(e, cfg) for e in (0, 30, 60)] == [1e-4, 5e-5, 2.5e-5]
    assert [batch_schedule(e, cfg) for e in (0, 30, 60)] == [16, 8, 8]
    assert cfg.epochs == 100
    assert cfg.weight_decay == 1e-4

    assert verify.timing_window(20) == 5
    assert verify.timing_window(15) == 5
    assert verify.timing_window(12) == 5
    assert verify.timing_window(10) == 5
    assert verify.timing_window(9) == 3
    assert verify.timing_window(7) == 3
    assert verify.timing_window(6) == 3
    assert verify.timing_window(5) == 2
    assert verify.timing_window(1) == 2

    assert verify.DEFAULT_LEADS == (20, 15, 12, 10, 7, 5)

    fc = ForecastConfig()
    assert fc.n_steps == 20
    assert fc.members == 50
    assert fc.horizon == 30
