"""The multimodal generator: StyleGAN-style facial feature bank S, the
refinement encoder/decoder with adaptive gated style fusion, and masked
composition.

Layer geometry at resolution R with t = 2*log2(R)-2 style codes:
  bank maps   F_s[1..t]  sizes 4,4,8,8,...,R,R       (doubles every 2nd layer)
  encoder     F_en[1..t] sizes R,R/2,R/2,...,2       (halves every 2nd layer)
  decoder     F_de[0..t] sizes s0,2*s0,2*s0,...,R    with s0 = R / 2^(t/2)
Odd decoder layers upsample and fuse with F_en[t-i] and F_s[i]; even layers
consume the fused map. Every map's channel count is a function of its
resolution, so the three pyramids agree wherever they meet.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .aggregation import AggregationModule, ModalityBundle
from .config import channels_at, num_style_layers
from .errors import InvalidMaskError, ShapeError
from .latents import MappingNet, StyleEncoder, W_DIM
from .nets import (ConvBlock, EqualConv2d, EqualLinear, ModulatedConv2d,
                   StyleConv, ToRGB, upsample2x)
from .warping import WarpNet


def bank_sizes(resolution: int) -> list:
    t = num_style_layers(resolution)
    return [4 * 2 ** ((i - 1) // 2) for i in range(1, t + 1)]


def encoder_sizes(resolution: int) -> list:
    t = num_style_layers(resolution)
    return [resolution // 2 ** (i // 2) for i in range(1, t + 1)]


def decoder_sizes(resolution: int) -> list:
    t = num_style_layers(resolution)
    s0 = resolution // 2 ** (t // 2)
    return [s0 * 2 ** ((i + 1) // 2) for i in range(0, t + 1)]


class FeatureBank(nn.Module):
    """Synthesis network exposing its per-layer pre-RGB feature maps.
    Per-layer noise is disabled by default for reproducibility."""

    def __init__(self, resolution: int, channels: dict = None, w_dim: int = W_DIM):
        super().__init__()
        self.resolution = resolution
        self.t = num_style_layers(resolution)
        ch = channels or {r: channels_at(r) for r in set(bank_sizes(resolution))}
        sizes = bank_sizes(resolution)
        self.sizes = sizes
        self.const = nn.Parameter(torch.randn(1, ch[4], 4, 4))
        convs, rgbs = [], []
        prev = ch[4]
        for i, s in enumerate(sizes):
            convs.append(StyleConv(prev, ch[s], w_dim))
            rgbs.append(ToRGB(ch[s], w_dim) if i % 2 == 1 else None)
            prev = ch[s]
        self.convs = nn.ModuleList(convs)
        self.rgbs = nn.ModuleList(m for m in rgbs if m is not None)
        self.out_channels = {s: ch[s] for s in set(sizes)}

    def forward(self, w: torch.Tensor):
        """(F_s pyramid list of t maps, bank image I_p)."""
        if w.dim() == 2:
            w = w.unsqueeze(0)
        if w.shape[-2] != self.t:
            raise ShapeError(f"bank needs t={self.t} style codes, got {w.shape[-2]}")
        b = w.shape[0]
        x = self.const.expand(b, -1, -1, -1)
        pyramid = []
        img = None
        rgb_idx = 0
        for i in range(self.t):
            if i >= 2 and i % 2 == 0:
                x = upsample2x(x)
            x = self.convs[i](x, w[:, i])
            pyramid.append(x)
            if i % 2 == 1:
                img = self.rgbs[rgb_idx](x, w[:, i], skip=img)
                rgb_idx += 1
        return pyramid, img


class RefineEncoder(nn.Module):
    """Aggregated conditioning -> feature pyramid F_en plus the global
    context c (512 x 2)."""

    def __init__(self, resolution: int, in_ch: int, channels: dict = None):
        super().__init__()
        self.resolution = resolution
        self.t = num_style_layers(resolution)
        sizes = encoder_sizes(resolution)
        self.sizes = sizes
        ch = channels or {r: channels_at(r) for r in set(sizes)}
        blocks = []
        prev_ch, prev_s = in_ch, resolution
        for s in sizes:
            blocks.append(ConvBlock(prev_ch, ch[s], down=(s < prev_s)))
            prev_ch, prev_s = ch[s], s
        self.blocks = nn.ModuleList(blocks)
        self.ctx = EqualLinear(ch[sizes[-1]] * sizes[-1] * sizes[-1], W_DIM * 2)

    def forward(self, x: torch.Tensor):
        if x.shape[-1] != self.resolution:
            raise ShapeError(f"expected {self.resolution}px input, got {x.shape[-1]}")
        pyramid = []
        h = x
        for block in self.blocks:
            h = block(h)
            pyramid.append(h)
        c = self.ctx(h.flatten(1)).view(-1, W_DIM, 2)
        return pyramid, c


class StyleFusion(nn.Module):
    """Adaptive gated fusion of decoder, encoder-skip, and bank features.

        H_hat = (sigmoid(SC(F_de, w)) + 1) * F_en + leaky(SC(F_de, w))
        F_m   = sigmoid(SC(F_s, w))
        F_g   = F_m * F_s + (1 - F_m) * H_hat

    The style convs here are raw (bias, no activation): both activations are
    written out above.
    """

    def __init__(self, ch: int, w_dim: int = W_DIM):
        super().__init__()
        self.sc_de = ModulatedConv2d(ch, ch, 3, w_dim)
        self.bias_de = nn.Parameter(torch.zeros(ch))
        self.sc_s = ModulatedConv2d(ch, ch, 3, w_dim)
        self.bias_s = nn.Parameter(torch.zeros(ch))

    def forward(self, f_de, f_en, f_s, w_next, return_trace: bool = False):
        if not (f_de.shape == f_en.shape == f_s.shape):
            raise ShapeError(
                f"fusion inputs must agree: {tuple(f_de.shape)} vs "
                f"{tuple(f_en.shape)} vs {tuple(f_s.shape)}")
        de = self.sc_de(f_de, w_next) + self.bias_de.view(1, -1, 1, 1)
        h_hat = (torch.sigmoid(de) + 1.0) * f_en + F.leaky_relu(de, 0.2)
        gate = torch.sigmoid(self.sc_s(f_s, w_next) + self.bias_s.view(1, -1, 1, 1))
        f_g = gate * f_s + (1.0 - gate) * h_hat
        if return_trace:
            return f_g, {"h_hat": h_hat, "gate": gate}
        return f_g


class RefineDecoder(nn.Module):
    """Alternating recurrence over t layers:
    odd i: F_de_i = UP(SC(F_de_{i-1}, [w_i, c])), then fuse -> F_g_i;
    even i: F_de_i = SC(F_g_{i-1}, [w_i, c]); output Conv(F_de_t), tanh."""

    def __init__(self, resolution: int, channels: dict = None, w_dim: int = W_DIM):
        super().__init__()
        self.resolution = resolution
        self.t = num_style_layers(resolution)
        d_sizes = decoder_sizes(resolution)
        e_sizes = encoder_sizes(resolution)
        all_sizes = set(d_sizes) | set(e_sizes) | {4}
        ch = channels or {r: channels_at(r) for r in all_sizes}
        self.ch = ch
        self.d_sizes = d_sizes
        style_dim = w_dim + W_DIM * 2  # [w_i, flatten(c)]

        self.stem = EqualConv2d(ch[e_sizes[-1]], ch[d_sizes[0]], 3, padding=1)
        convs, fusions = [], []
        for i in range(1, self.t + 1):
            s_in = d_sizes[i - 1]
            s_out = d_sizes[i]
            if i % 2 == 1:  # conv at the incoming size, then upsample
                convs.append(StyleConv(ch[s_in], ch[s_out], style_dim))
                fusions.append(StyleFusion(ch[s_out], w_dim))
            else:
                convs.append(StyleConv(ch[s_in], ch[s_out], style_dim))
        self.convs = nn.ModuleList(convs)
        self.fusions = nn.ModuleList(fusions)
        self.out = EqualConv2d(ch[d_sizes[-1]], 3, 3, padding=1)

    def forward(self, enc_pyramid: list, c: torch.Tensor, w: torch.Tensor,
                bank_pyramid: list, return_traces: bool = False):
        if len(enc_pyramid) != self.t or len(bank_pyramid) != self.t:
            raise ShapeError(
                f"pyramids must have t={self.t} maps, got {len(enc_pyramid)} "
                f"and {len(bank_pyramid)}")
        if w.shape[-2] != self.t:
            raise ShapeError(f"need t={self.t} style codes, got {w.shape[-2]}")
        ctx = c.flatten(1)
        traces = []
        h = self.stem(enc_pyramid[-1])  # F_de_0 = Conv(F_en_t)
        f_g = None
        for i in range(1, self.t + 1):
            style = torch.cat([w[:, i - 1], ctx], dim=1)
            if i % 2 == 1:
                h = upsample2x(self.convs[i - 1](h, style))
                fusion = self.fusions[i // 2]
                # skip pairing: F_en_{t-i} (1-based) with the bank map F_s_i
                out = fusion(h, enc_pyramid[self.t - i - 1], bank_pyramid[i - 1],
                             w[:, i], return_trace=return_traces)
                f_g = out[0] if return_traces else out
                if return_traces:
                    traces.append(out[1])
            else:
                h = self.convs[i - 1](f_g, style)
        img = torch.tanh(self.out(h))
        if return_traces:
            return img, traces
        return img


def compose_edit(i_m: torch.Tensor, mask: torch.Tensor,
                 generated: torch.Tensor) -> torch.Tensor:
    """I_out = I_m*(1-M) + generated*M; exact outside the mask."""
    uniq = mask.unique()
    if not bool(((uniq == 0) | (uniq == 1)).all()):
        raise InvalidMaskError("mask must be binary 0/1")
    if i_m.shape != generated.shape:
        raise ShapeError(f"image shapes differ: {tuple(i_m.shape)} vs {tuple(generated.shape)}")
    return i_m * (1 - mask) + generated * mask


class Discriminator(nn.Module):
    def __init__(self, resolution: int, channels: dict = None):
        super().__init__()
        sizes = []
        s = resolution
        while s > 4:
            sizes.append(s)
            s //= 2
        sizes.append(4)
        ch = channels or {r: channels_at(r) for r in sizes}
        layers = [ConvBlock(3, ch[resolution])]
        for a, b in zip(sizes[:-1], sizes[1:]):
            layers.append(ConvBlock(ch[a], ch[b], down=True))
        self.convs = nn.Sequential(*layers)
        self.head = nn.Sequential(
            EqualLinear(ch[4] * 16, ch[4], activate=True),
            EqualLinear(ch[4], 1))

    def forward(self, img):
        h = self.convs(img)
        return self.head(h.flatten(1))


class FacemugModel(nn.Module):
    """All trainable pieces plus the full conditional forward pass."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        res = config.resolution
        self.t = num_style_layers(res)
        self.mapping = MappingNet(config.w_dim, config.mapping_depth)
        self.style_encoder = StyleEncoder(res)
        self.warp = WarpNet(config.w_dim, config.warp_blocks)
        self.aggregation = AggregationModule(config.agg_channels)
        self.bank = FeatureBank(res)
        self.refine_encoder = RefineEncoder(res, in_ch=config.agg_channels)
        self.refine_decoder = RefineDecoder(res)
        self.discriminator = Discriminator(res)

    def generate(self, bundle: ModalityBundle, w_star: torch.Tensor,
                 bank_pyramid: list = None) -> torch.Tensor:
        """G(F_hat_a, w*, F_s): the raw generated image, before composition.
        bank_pyramid defaults to S(w_star)."""
        agg = self.aggregation(bundle)
        enc_pyr, c = self.refine_encoder(agg)
        if bank_pyramid is None:
            bank_pyramid, _ = self.bank(w_star)
        return self.refine_decoder(enc_pyr, c, w_star, bank_pyramid)

    def edit_forward(self, bundle: ModalityBundle, w_star: torch.Tensor,
                     bank_pyramid: list = None) -> torch.Tensor:
        gen = self.generate(bundle, w_star, bank_pyramid)
        return compose_edit(bundle.masked_image, bundle.mask, gen)


def edit_forward(bundle: ModalityBundle, w_star: torch.Tensor,
                 params: FacemugModel) -> torch.Tensor:
    return params.edit_forward(bundle, w_star)
