"""Flow-matching training: straight-path interpolation, velocity regression,
adaptive-moment optimizer with decoupled weight decay, step-decay schedules,
and epoch-cadence checkpointing.

The loop is reproducible: permutation and noise generators are reseeded per
epoch from the config seed, so a resumed run produces the same checkpoints
as an uninterrupted one.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import seeds
from .grid import SeasonTensor
from .network import NetConfig, VelocityNet, init_parameters, save_checkpoint


class TrainingAborted(Exception):
    """Raised when a non-finite loss or update is encountered."""


class SelectionError(Exception):
    """Checkpoint selection requires at least one validation event."""


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    lr_decay_factor: float = 0.5
    lr_decay_period: int = 30       # epochs
    batch_size_early: int = 16
    batch_size_late: int = 8
    batch_switch_epoch: int = 30
    epochs: int = 100
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 10      # epochs

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """lr0 * factor^floor(epoch / period)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.initial_lr * config.lr_decay_factor ** (epoch // config.lr_decay_period)


def batch_schedule(epoch: int, config: TrainConfig) -> int:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.batch_size_early if epoch < config.batch_switch_epoch else config.batch_size_late


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t: torch.Tensor | float) -> torch.Tensor:
    """Straight interpolation path: x_t = t*x1 + (1-t)*x0, t broadcast per sample."""
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    if torch.is_tensor(t) and t.dim() == 1:
        t = t.view(-1, *([1] * (x0.dim() - 1)))
    return t * x1 + (1 - t) * x0


def make_condition(day_older: torch.Tensor, day_newer: torch.Tensor) -> torch.Tensor:
    """Pack the two prior days into the condition tensor, older day first."""
    return torch.cat([day_older, day_newer], dim=1)


def fm_loss(
    net: VelocityNet,
    x1: torch.Tensor,
    cond: torch.Tensor,
    x0: torch.Tensor,
    t: torch.Tensor,
) -> torch.Tensor:
    """Mean squared error between (x1 - x0) and the predicted velocity.

    Reduction is the mean over the batch (and all elements), so learning
    rates transfer across batch sizes.
    """
    x_t = interpolate(x0, x1, t)
    v = net(x_t, t, cond)
    loss = ((x1 - x0 - v) ** 2).mean()
    if not torch.isfinite(loss):
        raise TrainingAborted("non-finite flow-matching loss")
    return loss


class MomentOptimizer:
    """Adaptive-moment update with bias correction and decoupled weight decay.

    w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w), with the
    decay applied only to convolution/dense weights (ndim >= 2), not to
    biases or normalization parameters.
    """

    def __init__(self, params: list[torch.Tensor], weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]

    def step(self, grads: list[torch.Tensor], lr: float) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        with torch.no_grad():
            for p, g, m, v in zip(self.params, grads, self.m, self.v):
                if not torch.all(torch.isfinite(g)):
                    raise TrainingAborted("non-finite gradient")
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                update = (m / c1) / (torch.sqrt(v / c2) + self.eps)
                if self.weight_decay and p.dim() >= 2:
                    update = update + self.weight_decay * p
                p.add_(update, alpha=-lr)
                if not torch.all(torch.isfinite(p)):
                    raise TrainingAborted("non-finite parameter after update")


def optimizer_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor],
    opt: MomentOptimizer,
    lr: float,
) -> None:
    """Single optimizer step; `opt` carries the moment accumulators."""
    assert opt.params is params or all(a is b for a, b in zip(opt.params, params))
    opt.step(grads, lr)


@dataclass
class TraceRow:
    epoch: int
    step: int
    lr: float
    batch: int
    loss: float


def save_loss_trace(rows: list[TraceRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "lr", "batch", "loss"])
        for r in rows:
            w.writerow([r.epoch, r.step, f"{r.lr:.10g}", r.batch, f"{r.loss:.10g}"])


@dataclass
class TrainResult:
    net: VelocityNet
    trace: list[TraceRow]
    checkpoints: list[tuple[int, Path]] = field(default_factory=list)  # (epoch, path)


def stack_training_tensor(seasons: list[SeasonTensor]) -> torch.Tensor:
    """(season, day, channel, lat, lon) float32 tensor from normalized seasons."""
    for s in seasons:
        if not s.normalized:
            raise ValueError(f"season {s.year} is not normalized")
    return torch.from_numpy(np.stack([s.values for s in seasons]).astype(np.float32))


def train(
    seasons: list[SeasonTensor],
    net_config: NetConfig,
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    net: VelocityNet | None = None,
    start_epoch: int = 0,
    provenance: str = "",
) -> TrainResult:
    """Train over all valid (season, target day >= 2) pairs.

    Targets are shuffled per epoch by a seeded permutation; checkpoints are
    written every `checkpoint_every` epochs and at the end. Pass `net` and
    `start_epoch` to resume from a checkpoint.
    """
    data = stack_training_tensor(seasons)
    n_seasons, n_days = data.shape[0], data.shape[1]
    samples = [(s, d) for s in range(n_seasons) for d in range(2, n_days)]

    if net is None:
        net = init_parameters(net_config, seeds.mix(config.seed, 0xA11))
    params = [p for _, p in net.named_parameters()]
    opt = MomentOptimizer(params, weight_decay=config.weight_decay)
    # Moment state restarts on resume; epoch-seeded draws keep the data
    # stream identical either way.
    opt.step_count = 0

    result = TrainResult(net=net, trace=[])
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, config.epochs):
        lr = lr_schedule(epoch, config)
        batch = batch_schedule(epoch, config)
        perm_rng = np.random.default_rng(seeds.mix(config.seed, 2 * epoch))
        gen = torch.Generator().manual_seed(seeds.mix(config.seed, 2 * epoch + 1) & (2**63 - 1))
        order = perm_rng.permutation(len(samples))
        for step, lo in enumerate(range(0, len(order), batch)):
            idx = order[lo : lo + batch]
            s_idx = torch.tensor([samples[i][0] for i in idx])
            d_idx = torch.tensor([samples[i][1] for i in idx])
            x1 = data[s_idx, d_idx]
            cond = make_condition(data[s_idx, d_idx - 2], data[s_idx, d_idx - 1])
            x0 = torch.randn(x1.shape, generator=gen, dtype=x1.dtype)
            t = torch.rand(x1.shape[0], generator=gen, dtype=x1.dtype)
            try:
                loss = fm_loss(net, x1, cond, x0, t)
                grads = torch.autograd.grad(loss, params)
                opt.step(list(grads), lr)
            except TrainingAborted as e:
                raise TrainingAborted(f"epoch {epoch} step {step}: {e}") from e
            result.trace.append(TraceRow(epoch, step, lr, batch, float(loss.item())))
        last = epoch == config.epochs - 1
        if ckpt_dir is not None and ((epoch + 1) % config.checkpoint_every == 0 or last):
            path = ckpt_dir / f"checkpoint_ep{epoch + 1:04d}.fmcparm"
            save_checkpoint(net, path, step=epoch + 1, seed=config.seed, provenance=provenance)
            result.checkpoints.append((epoch + 1, path))
    return result


def select_checkpoint(
    checkpoints: list[tuple[int, object]],
    validation_events: list,
    score_fn,
) -> tuple[int, object]:
    """Pick the checkpoint with the best validation-event score.

    `score_fn(checkpoint, validation_events) -> float` (higher is better,
    e.g. mean ensemble ACC at a fixed lead). Ties break to the earliest
    epoch.
    """
    if not checkpoints:
        raise SelectionError("no checkpoints to select from")
    if not validation_events:
        raise SelectionError("checkpoint selection requires at least one validation event")
    best = None
    best_score = -float("inf")
    for epoch, ckpt in sorted(checkpoints, key=lambda c: c[0]):
        score = score_fn(ckpt, validation_events)
        if score > best_score:
            best, best_score = (epoch, ckpt), score
    return best
