"""Latent-code operations: the mapping network, the 26-channel style
encoder, style mixing, and interpolation.

A StyleStack is a tensor of shape (..., t, 512): one 512-dim code per
synthesis layer. All operations accept an optional leading batch dim.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ENCODER_IN_CH, channels_at, num_style_layers
from .errors import InvalidInputError, ShapeError
from .nets import ConvBlock, EqualLinear, PixelNorm

W_DIM = 512


def check_finite(x: torch.Tensor, name: str = "input") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def check_style_stack(w: torch.Tensor, t: int | None = None) -> torch.Tensor:
    if w.dim() < 2 or w.shape[-1] != W_DIM:
        raise ShapeError(f"style stack must be (..., t, {W_DIM}), got {tuple(w.shape)}")
    if t is not None and w.shape[-2] != t:
        raise ShapeError(f"expected t={t} style layers, got {w.shape[-2]}")
    return w


class MappingNet(nn.Module):
    """z -> w, an 8-layer fully-connected net; the single w is broadcast to
    all t layers of the stack."""

    def __init__(self, w_dim: int = W_DIM, depth: int = 8, lr_mul: float = 0.01):
        super().__init__()
        self.w_dim = w_dim
        layers: list[nn.Module] = [PixelNorm()]
        for _ in range(depth):
            layers.append(EqualLinear(w_dim, w_dim, lr_mul=lr_mul, activate=True))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor, t: int) -> torch.Tensor:
        check_finite(z, "z")
        if z.shape[-1] != self.w_dim:
            raise ShapeError(f"z must be (..., {self.w_dim}), got {tuple(z.shape)}")
        w = self.net(z)
        return w.unsqueeze(-2).expand(*w.shape[:-1], t, self.w_dim).contiguous()


def map_latent(z: torch.Tensor, params: MappingNet, t: int) -> torch.Tensor:
    return params(z, t)


class StyleEncoder(nn.Module):
    """26-channel image -> StyleStack.

    Shared conv pyramid; the first code is predicted from the deepest
    features and later codes are predicted as offsets from it, each head
    reading the pyramid level that matches its layer's scale (coarse codes
    from coarse features).
    """

    def __init__(self, resolution: int, in_ch: int = ENCODER_IN_CH, w_dim: int = W_DIM):
        super().__init__()
        self.resolution = resolution
        self.in_ch = in_ch
        self.t = num_style_layers(resolution)
        self.w_dim = w_dim

        blocks = [ConvBlock(in_ch, channels_at(resolution))]
        res = resolution
        self.tap_res = []  # resolution of the feature map after each block
        self.tap_res.append(res)
        while res > 2:
            blocks.append(ConvBlock(channels_at(res), channels_at(res // 2), down=True))
            res //= 2
            self.tap_res.append(res)
        self.blocks = nn.ModuleList(blocks)

        # head i reads coarse features for small i, fine features for large i
        fine = min(16, resolution)
        mid = min(8, resolution // 2)
        self.head_src = []
        for i in range(self.t):
            if i < self.t * 0.3:
                self.head_src.append(2)
            elif i < self.t * 0.7:
                self.head_src.append(mid)
            else:
                self.head_src.append(fine)
        self.heads = nn.ModuleList(
            EqualLinear(channels_at(r), w_dim) for r in self.head_src)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_ch or x.shape[2:] != (self.resolution, self.resolution):
            raise ShapeError(
                f"encoder input must be (B,{self.in_ch},{self.resolution},{self.resolution}), "
                f"got {tuple(x.shape)}")
        check_finite(x, "encoder input")
        feats = {}
        h = x
        for res, block in zip(self.tap_res, self.blocks):
            h = block(h)
            feats[res] = h
        pooled = {r: F.adaptive_avg_pool2d(feats[r], 1).flatten(1)
                  for r in set(self.head_src)}
        codes = [head(pooled[r]) for head, r in zip(self.heads, self.head_src)]
        w0 = codes[0]
        out = [w0] + [w0 + d for d in codes[1:]]
        return torch.stack(out, dim=1)

    def deltas(self, x: torch.Tensor) -> torch.Tensor:
        """Per-layer offsets from the first code (for delta regularization)."""
        w = self.forward(x)
        return w[:, 1:] - w[:, :1]


def encode_styles(stacked_modalities: torch.Tensor, params: StyleEncoder) -> torch.Tensor:
    single = stacked_modalities.dim() == 3
    x = stacked_modalities.unsqueeze(0) if single else stacked_modalities
    w = params(x)
    return w.squeeze(0) if single else w


def style_mixing(w1: torch.Tensor, w2: torch.Tensor, crossover: int) -> torch.Tensor:
    check_style_stack(w1)
    check_style_stack(w2, t=w1.shape[-2])
    t = w1.shape[-2]
    if not 0 <= crossover <= t:
        raise InvalidInputError(f"crossover must be in [0,{t}], got {crossover}")
    out = w2.clone()
    out[..., :crossover, :] = w1[..., :crossover, :]
    return out


def interpolate_styles(a: torch.Tensor, b: torch.Tensor, lam: float) -> torch.Tensor:
    check_style_stack(a)
    if a.shape != b.shape:
        raise ShapeError(f"style stacks differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    if isinstance(lam, torch.Tensor):
        if ((lam < 0) | (lam > 1)).any():
            raise InvalidInputError("lam must be in [0,1]")
        while lam.dim() < a.dim():
            lam = lam.unsqueeze(-1)
    elif not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"lam must be in [0,1], got {lam}")
    return lam * a + (1 - lam) * b
