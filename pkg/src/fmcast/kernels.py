"""Differentiable tensor kernels for the velocity-field network.

All kernels operate on (batch, channel, lat, lon) tensors. Convolutions are
cross-correlations with circular indexing along longitude (the grid is
exactly periodic zonally) and zero padding along latitude. Reverse-mode
gradients come from torch's autograd graph; `gradients` exposes the
backward pass with unreferenced parameters reported as zero.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F


class ShapeError(Exception):
    """Kernel input shapes violate the operation's contract."""


def _check_4d(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise ShapeError(f"{name} must be 4-d (batch, channel, lat, lon), got {tuple(x.shape)}")


def conv2d_zonal_periodic(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
) -> torch.Tensor:
    """Cross-correlation, circular along longitude, zero-padded along latitude.

    Kernel extents must be odd; stride applies to both spatial dims and the
    output longitude size is ceil(n_lon / stride).
    """
    _check_4d(x)
    if kernel.dim() != 4:
        raise ShapeError(f"kernel must be 4-d, got {tuple(kernel.shape)}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    _, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ShapeError(f"input channels {x.shape[1]} != kernel input channels {c_in}")
    ph, pw = kh // 2, kw // 2
    x = F.pad(x, (pw, pw, 0, 0), mode="circular")
    x = F.pad(x, (0, 0, ph, ph), mode="constant", value=0.0)
    return F.conv2d(x, kernel, bias=bias, stride=stride)


def group_norm_affine(
    x: torch.Tensor,
    n_groups: int,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Per-(sample, group) normalization followed by a per-channel affine.

    gamma/beta may be per-channel vectors (shared across batch) or
    (batch, channel) tensors, as produced by the noise-conditioned
    affine predictors.
    """
    _check_4d(x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    b, c, h, w = x.shape
    if c % n_groups != 0:
        raise ShapeError(f"channels {c} not divisible by {n_groups} groups")
    normed = F.group_norm(x, n_groups, eps=eps)
    if gamma.dim() == 1:
        gamma = gamma.view(1, c, 1, 1)
        beta = beta.view(1, c, 1, 1)
    elif gamma.dim() == 2:
        gamma = gamma.view(b, c, 1, 1)
        beta = beta.view(b, c, 1, 1)
    else:
        raise ShapeError("gamma/beta must be (channel,) or (batch, channel)")
    return normed * gamma + beta


def self_attention(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_out: torch.Tensor,
) -> torch.Tensor:
    """Single-head scaled dot-product attention over all lat*lon positions.

    Per-position tokens are the channel vectors; projections are
    (channel, channel) matrices; the output is added residually.
    """
    _check_4d(x)
    b, c, h, w = x.shape
    for name, m in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v), ("w_out", w_out)):
        if m.shape != (c, c):
            raise ShapeError(f"{name} must be ({c}, {c}), got {tuple(m.shape)}")
    tokens = x.reshape(b, c, h * w).transpose(1, 2)  # (b, n, c)
    q = tokens @ w_q.T
    k = tokens @ w_k.T
    v = tokens @ w_v.T
    attn = torch.softmax(q @ k.transpose(1, 2) / (c ** 0.5), dim=-1)
    out = (attn @ v) @ w_out.T
    return x + out.transpose(1, 2).reshape(b, c, h, w)


def dense(x: torch.Tensor, weights: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Affine map on the trailing dimension: x @ weights.T + bias."""
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != weight columns {weights.shape[1]}")
    return F.linear(x, weights, bias)


def activation(x: torch.Tensor) -> torch.Tensor:
    """Sigmoid-weighted linear unit, x * sigmoid(x)."""
    return F.silu(x)


def upsample_nearest2x(x: torch.Tensor) -> torch.Tensor:
    """Replicate each spatial value into a 2x2 block."""
    _check_4d(x)
    return x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)


def upsample_nearest_to(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor upsampling to an explicit spatial size.

    Used by the decoder when ceil-division downsampling produced odd sizes;
    coincides with upsample_nearest2x when size is exactly doubled.
    """
    _check_4d(x)
    return F.interpolate(x, size=size, mode="nearest")


def concat_channels(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_4d(a, "a")
    _check_4d(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"batch/spatial dims must match: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.cat([a, b], dim=1)


def gradients(loss: torch.Tensor, params: list[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for each parameter.

    Parameters with no path to the loss get zero gradients.
    """
    if loss.dim() != 0:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]
