"""Latent pose warping: a stack of code-to-code modulation blocks that move
a source style stack toward a target's pose while keeping everything else.

    w_wa = H(w_ta - w_so, w_so) + w_so

H is four chained blocks. Each block cross-attends the running delta
against the residual code along both the layer axis (channel attention,
t x t) and the channel axis (position attention, 512 x 512), then applies a
residual-conditioned affine:

    Delta_i = LayerNorm(a_p + a_c) * (xi + 1) + mu
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .latents import StyleEncoder, interpolate_styles


@dataclass
class WarpBlockTrace:
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    attn_c: torch.Tensor  # (t, t), rows sum to 1
    a_c: torch.Tensor
    wh_q: torch.Tensor
    wh_k: torch.Tensor
    wh_v: torch.Tensor
    attn_p: torch.Tensor  # (dim, dim), columns sum to 1
    a_p: torch.Tensor
    xi: torch.Tensor
    mu: torch.Tensor
    tau1: float
    tau2: float


class CodeModulationBlock(nn.Module):
    def __init__(self, dim: int = 512):
        super().__init__()
        self.dim = dim
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_qh = nn.Linear(dim, dim)
        self.to_kh = nn.Linear(dim, dim)
        self.to_vh = nn.Linear(dim, dim)
        self.mlp_xi = nn.Sequential(nn.Linear(dim, dim), nn.LeakyReLU(0.2), nn.Linear(dim, dim))
        self.mlp_mu = nn.Sequential(nn.Linear(dim, dim), nn.LeakyReLU(0.2), nn.Linear(dim, dim))
        self.norm = nn.LayerNorm(dim)

    def forward(self, w_r: torch.Tensor, delta_prev: torch.Tensor,
                return_trace: bool = False):
        if w_r.shape != delta_prev.shape or w_r.shape[-1] != self.dim:
            raise ShapeError(
                f"block inputs must share shape (..., t, {self.dim}), got "
                f"{tuple(w_r.shape)} and {tuple(delta_prev.shape)}")
        t = w_r.shape[-2]
        tau1 = math.sqrt(t)
        tau2 = math.sqrt(self.dim)

        # channel attention over the t layer codes
        w_q = self.to_q(w_r)
        w_k = self.to_k(delta_prev)
        w_v = self.to_v(delta_prev)
        attn_c = F.softmax(w_q @ w_k.transpose(-1, -2) / tau1, dim=-1)
        a_c = attn_c @ w_v

        # position attention over the 512 channels
        wh_q = self.to_qh(w_r)
        wh_k = self.to_kh(delta_prev)
        wh_v = self.to_vh(delta_prev)
        attn_p = F.softmax(wh_q.transpose(-1, -2) @ wh_k / tau2, dim=-2)
        a_p = wh_v @ attn_p

        xi = torch.sigmoid(self.mlp_xi(w_r))
        mu = F.leaky_relu(self.mlp_mu(w_r), 0.2)
        out = self.norm(a_p + a_c) * (xi + 1) + mu
        if return_trace:
            return out, WarpBlockTrace(w_q, w_k, w_v, attn_c, a_c,
                                       wh_q, wh_k, wh_v, attn_p, a_p,
                                       xi, mu, tau1, tau2)
        return out


def code_modulation_block(w_r: torch.Tensor, delta_prev: torch.Tensor,
                          params: CodeModulationBlock, return_trace: bool = False):
    return params(w_r, delta_prev, return_trace=return_trace)


class WarpNet(nn.Module):
    def __init__(self, dim: int = 512, n_blocks: int = 4):
        super().__init__()
        self.dim = dim
        self.blocks = nn.ModuleList(CodeModulationBlock(dim) for _ in range(n_blocks))

    def residual(self, w_r: torch.Tensor, w_so: torch.Tensor) -> torch.Tensor:
        """H(w_r, w_so): chain the blocks starting from Delta_0 = w_so."""
        delta = w_so
        for block in self.blocks:
            delta = block(w_r, delta)
        return delta

    def forward(self, w_ta: torch.Tensor, w_so: torch.Tensor) -> torch.Tensor:
        if w_ta.dim() < 2 or w_ta.shape[-1] != self.dim:
            raise ShapeError(f"expected (..., t, {self.dim}), got {tuple(w_ta.shape)}")
        if w_ta.shape != w_so.shape:
            raise ShapeError(f"target/source shapes differ: {tuple(w_ta.shape)} vs {tuple(w_so.shape)}")
        return self.residual(w_ta - w_so, w_so) + w_so


def warp_latent(w_ta: torch.Tensor, w_so: torch.Tensor, params: WarpNet) -> torch.Tensor:
    return params(w_ta, w_so)


@dataclass
class WarpTriplet:
    w_ini: torch.Tensor
    w_ta: torch.Tensor
    w_f: torch.Tensor
    w_so: torch.Tensor
    beta: torch.Tensor  # (B,) interpolation weights, in [0,1]
    i_ini: Optional[torch.Tensor] = None  # source images, kept for the warp loss

    def verify(self, tol: float = 1e-6) -> bool:
        recon = interpolate_styles(self.w_ini, self.w_f, self.beta.view(-1, 1, 1))
        return bool((self.w_so - recon).abs().max() <= tol)


def build_warp_triplet(image: torch.Tensor, encoder: StyleEncoder,
                       rng: torch.Generator, *,
                       scale_range=(0.8, 1.2), jitter=0.2, mask_frac=0.25) -> WarpTriplet:
    """Self-supervised triplet: original, augmented target, flipped; the
    source is a random interpolation between original and flip. The flip
    moves pose while keeping identity, and beta sets how far the source
    sits from the original."""
    from .data import augment_image, stack_modalities

    if image.dim() == 3:
        image = image.unsqueeze(0)
    b = image.shape[0]
    i_ta = augment_image(image, rng, scale_range=scale_range, jitter=jitter,
                         mask_frac=mask_frac)
    i_f = torch.flip(image, dims=[-1])
    with torch.no_grad():
        w_ini = encoder(stack_modalities(image=image))
        w_ta = encoder(stack_modalities(image=i_ta))
        w_f = encoder(stack_modalities(image=i_f))
    beta = torch.rand(b, generator=rng)
    w_so = interpolate_styles(w_ini, w_f, beta.view(b, 1, 1))
    return WarpTriplet(w_ini, w_ta, w_f, w_so, beta, i_ini=image)
