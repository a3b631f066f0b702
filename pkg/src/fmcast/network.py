"""Conditional U-Net that predicts the flow-matching velocity field.

Two encoders downsample in four stride-2 stages: the signal-noise encoder
consumes the interpolated state x_t with noise-conditioned adaptive
normalization and a bottleneck self-attention block; the condition encoder
consumes the two prior days' states with plain normalization. Each decoder
level receives the channel-concatenation of both encoders' same-resolution
features as its skip input, and the output has the input's channel count
and spatial shape.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import kernels

CHECKPOINT_MAGIC = b"FMCPARM1"
N_LEVELS = 4


@dataclass(frozen=True)
class NetConfig:
    in_channels: int
    base_width: int = 32
    mults: tuple[int, int, int, int] = (1, 2, 2, 4)
    groups: int = 8
    embed_dim: int = 64

    def __post_init__(self):
        if len(self.mults) != N_LEVELS:
            raise ValueError(f"exactly {N_LEVELS} encoder/decoder levels are supported")
        for m in self.mults:
            if (self.base_width * m) % self.groups != 0:
                raise ValueError("every level width must be divisible by the group count")
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even")

    @property
    def cond_channels(self) -> int:
        return 2 * self.in_channels

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.mults)


def sinusoidal_features(t: torch.Tensor, dim: int, max_freq: float = 1000.0) -> torch.Tensor:
    """Sin/cos features of t at geometrically spaced frequencies.

    Ordering is all sines then all cosines, so t=0 maps to (0,...,0,1,...,1).
    """
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(max_freq), half, dtype=t.dtype, device=t.device)
    )
    arg = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


def max_embedding_frequency(dim: int, max_freq: float = 1000.0) -> float:
    """Largest angular frequency used by sinusoidal_features (Lipschitz bound)."""
    del dim
    return max_freq


class NoiseEmbedding(nn.Module):
    """Sinusoidal featurization of the noise level plus a two-layer projection."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if torch.any(t < 0) or torch.any(t > 1):
            raise ValueError("noise level t must lie in [0, 1]")
        h = sinusoidal_features(t, self.dim)
        return self.fc2(kernels.activation(self.fc1(h)))


class PeriodicConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, ksize: int = 3, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(c_out, c_in, ksize, ksize))
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return kernels.conv2d_zonal_periodic(x, self.weight, self.bias, stride=self.stride)


class AdaptiveGroupNorm(nn.Module):
    """Affine-free group norm whose gamma/beta are predicted from the noise embedding."""

    def __init__(self, channels: int, groups: int, embed_dim: int):
        super().__init__()
        self.channels = channels
        self.groups = groups
        self.predictor = nn.Linear(embed_dim, 2 * channels)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        pred = self.predictor(emb)
        gamma, beta = pred[:, : self.channels], pred[:, self.channels :]
        return kernels.group_norm_affine(x, self.groups, gamma, beta)


class PlainGroupNorm(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.groups = groups
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:
        del emb
        return kernels.group_norm_affine(x, self.groups, self.gamma, self.beta)


class ResBlock(nn.Module):
    """Two convolutional sublayers (norm -> silu -> conv) with residual addition."""

    def __init__(self, c_in: int, c_out: int, groups: int, embed_dim: int | None):
        super().__init__()
        norm = (
            (lambda c: AdaptiveGroupNorm(c, groups, embed_dim))
            if embed_dim is not None
            else (lambda c: PlainGroupNorm(c, groups))
        )
        self.norm1 = norm(c_in)
        self.conv1 = PeriodicConv(c_in, c_out)
        self.norm2 = norm(c_out)
        self.conv2 = PeriodicConv(c_out, c_out)
        self.skip = PeriodicConv(c_in, c_out, ksize=1) if c_in != c_out else None

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None) -> torch.Tensor:
        h = self.conv1(kernels.activation(self.norm1(x, emb)))
        h = self.conv2(kernels.activation(self.norm2(h, emb)))
        return h + (self.skip(x) if self.skip is not None else x)


class SelfAttentionBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.w_q = nn.Parameter(torch.empty(channels, channels))
        self.w_k = nn.Parameter(torch.empty(channels, channels))
        self.w_v = nn.Parameter(torch.empty(channels, channels))
        self.w_out = nn.Parameter(torch.empty(channels, channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return kernels.self_attention(x, self.w_q, self.w_k, self.w_v, self.w_out)


class Encoder(nn.Module):
    def __init__(self, config: NetConfig, c_in: int, adaptive: bool, with_attention: bool):
        super().__init__()
        embed = config.embed_dim if adaptive else None
        w = config.widths
        self.stem = PeriodicConv(c_in, w[0])
        blocks, downs = [], []
        prev = w[0]
        for wi in w:
            blocks.append(ResBlock(prev, wi, config.groups, embed))
            downs.append(PeriodicConv(wi, wi, stride=2))
            prev = wi
        self.blocks = nn.ModuleList(blocks)
        self.downs = nn.ModuleList(downs)
        self.bottleneck = ResBlock(w[-1], w[-1], config.groups, embed)
        self.attention = SelfAttentionBlock(w[-1]) if with_attention else None

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None):
        h = self.stem(x)
        skips = []
        for block, down in zip(self.blocks, self.downs):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.bottleneck(h, emb)
        if self.attention is not None:
            h = self.attention(h)
        return h, skips


class VelocityNet(nn.Module):
    """v(x_t, t, cond): predicted velocity with the same shape as x_t."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        w = config.widths
        self.noise_embedding = NoiseEmbedding(config.embed_dim)
        self.signal_encoder = Encoder(config, config.in_channels, adaptive=True, with_attention=True)
        self.cond_encoder = Encoder(config, config.cond_channels, adaptive=False, with_attention=False)
        self.fuse = PeriodicConv(2 * w[-1], w[-1], ksize=1)
        upconvs, merges, blocks = [], [], []
        prev = w[-1]
        for wi in reversed(w):
            upconvs.append(PeriodicConv(prev, wi))
            merges.append(PeriodicConv(3 * wi, wi, ksize=1))
            blocks.append(ResBlock(wi, wi, config.groups, config.embed_dim))
            prev = wi
        self.upconvs = nn.ModuleList(upconvs)
        self.skip_merges = nn.ModuleList(merges)
        self.decoder_blocks = nn.ModuleList(blocks)
        self.head_norm = PlainGroupNorm(w[0], config.groups)
        self.head = PeriodicConv(w[0], config.in_channels)

    def encode_condition(self, cond: torch.Tensor):
        """Condition-encoder features; cacheable across ODE steps within a day."""
        if cond.shape[1] != self.config.cond_channels:
            raise kernels.ShapeError(
                f"cond has {cond.shape[1]} channels, expected {self.config.cond_channels}"
            )
        return self.cond_encoder(cond, None)

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor | float,
        cond: torch.Tensor | None,
        cond_features=None,
    ) -> torch.Tensor:
        if x_t.shape[1] != self.config.in_channels:
            raise kernels.ShapeError(
                f"x_t has {x_t.shape[1]} channels, expected {self.config.in_channels}"
            )
        if cond_features is None:
            if cond is None:
                raise kernels.ShapeError("either cond or cond_features is required")
            if x_t.shape[0] != cond.shape[0] or x_t.shape[2:] != cond.shape[2:]:
                raise kernels.ShapeError("x_t and cond must share batch and spatial dims")
            cond_features = self.encode_condition(cond)
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), float(t), dtype=x_t.dtype, device=x_t.device)
        emb = self.noise_embedding(t)

        h_sig, skips_sig = self.signal_encoder(x_t, emb)
        h_cond, skips_cond = cond_features
        h = self.fuse(kernels.concat_channels(h_sig, h_cond))
        for upconv, merge, block, s_sig, s_cond in zip(
            self.upconvs, self.skip_merges, self.decoder_blocks,
            reversed(skips_sig), reversed(skips_cond),
        ):
            h = upconv(kernels.upsample_nearest_to(h, s_sig.shape[2:]))
            h = block(merge(torch.cat([h, s_sig, s_cond], dim=1)), emb)
        return self.head(kernels.activation(self.head_norm(h)))


def init_parameters(config: NetConfig, seed: int) -> VelocityNet:
    """Deterministic fan-in-scaled initialization.

    Adaptive-norm predictors start at gamma=1, beta=0, so adaptive
    normalization initially equals plain group normalization for any t.
    """
    net = VelocityNet(config)
    gen = torch.Generator().manual_seed(seed & (2**63 - 1))
    for name, p in net.named_parameters():
        with torch.no_grad():
            if "predictor" in name:
                if name.endswith("weight"):
                    p.zero_()
                else:
                    c = p.shape[0] // 2
                    p[:c] = 1.0
                    p[c:] = 0.0
            elif name.endswith("gamma"):
                p.fill_(1.0)
            elif name.endswith(("beta", "bias")):
                p.zero_()
            else:
                fan_in = p[0].numel() if p.dim() > 1 else p.numel()
                p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
    return net


def save_checkpoint(net: VelocityNet, path: str | Path, step: int = 0, seed: int = 0,
                    provenance: str = "") -> None:
    """Write parameters as named little-endian float32 blocks behind a text header."""
    cfg = net.config
    names, blocks = [], []
    for name, p in net.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f4")
        names.append(f"param: {name} {','.join(map(str, arr.shape))}")
        blocks.append(arr.tobytes())
    header_lines = [
        f"in_channels: {cfg.in_channels}",
        f"base_width: {cfg.base_width}",
        "mults: " + ",".join(map(str, cfg.mults)),
        f"groups: {cfg.groups}",
        f"embed_dim: {cfg.embed_dim}",
        f"step: {step}",
        f"seed: {seed}",
        f"provenance: {provenance}",
        *names,
    ]
    header = "\n".join(header_lines).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blocks:
            f.write(b)


class CheckpointError(Exception):
    pass


def load_checkpoint(path: str | Path) -> tuple[VelocityNet, dict]:
    """Load a checkpoint; returns the network and header metadata."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    lines = raw[12 : 12 + hlen].decode("utf-8").splitlines()
    meta: dict = {}
    params: list[tuple[str, tuple[int, ...]]] = []
    for line in lines:
        key, _, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if key == "param":
            pname, shape = value.split()
            params.append((pname, tuple(int(s) for s in shape.split(","))))
        else:
            meta[key] = value
    config = NetConfig(
        in_channels=int(meta["in_channels"]),
        base_width=int(meta["base_width"]),
        mults=tuple(int(m) for m in meta["mults"].split(",")),
        groups=int(meta["groups"]),
        embed_dim=int(meta["embed_dim"]),
    )
    net = VelocityNet(config)
    expected = sum(int(np.prod(shape)) for _, shape in params) * 4
    if len(raw) - (12 + hlen) != expected:
        raise CheckpointError("payload length does not match declared parameters")
    offset = 12 + hlen
    state = {}
    for pname, shape in params:
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        state[pname] = torch.from_numpy(arr.copy())
    missing = net.load_state_dict(state, strict=True)
    del missing
    return net, meta
