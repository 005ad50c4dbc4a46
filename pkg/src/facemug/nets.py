"""Shared network primitives: equalized-learning-rate layers, modulated
convolution, and small conv blocks used by the bank, encoders, and
discriminator.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(torch.mean(x ** 2, dim=1, keepdim=True) + 1e-8)


class EqualLinear(nn.Module):
    def __init__(self, in_dim, out_dim, bias=True, bias_init=0.0, lr_mul=1.0, activate=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim).div_(lr_mul))
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init))) if bias else None
        self.scale = (1.0 / math.sqrt(in_dim)) * lr_mul
        self.lr_mul = lr_mul
        self.activate = activate

    def forward(self, x):
        bias = self.bias * self.lr_mul if self.bias is not None else None
        out = F.linear(x, self.weight * self.scale, bias)
        if self.activate:
            out = F.leaky_relu(out, 0.2) * math.sqrt(2)
        return out


class EqualConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias,
                        stride=self.stride, padding=self.padding)


class ModulatedConv2d(nn.Module):
    """Style-modulated conv. Equivalent to per-sample weight modulation
    w' = w * s with demodulation, computed as input scaling + output scaling
    so the conv itself stays batched (no grouped conv)."""

    def __init__(self, in_ch, out_ch, kernel, style_dim, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.padding = kernel // 2
        self.modulation = EqualLinear(style_dim, in_ch, bias_init=1.0)
        self.demodulate = demodulate

    def forward(self, x, style):
        b, c, _, _ = x.shape
        s = self.modulation(style)  # (b, in_ch)
        w = self.weight * self.scale
        out = F.conv2d(x * s.view(b, c, 1, 1), w, padding=self.padding)
        if self.demodulate:
            w2 = w.pow(2).sum(dim=(2, 3))  # (out, in)
            sigma = torch.rsqrt(w2 @ (s.pow(2).t()) + 1e-8)  # (out, b)
            out = out * sigma.t().view(b, -1, 1, 1)
        return out


class StyleConv(nn.Module):
    """Modulated conv + bias + leaky activation; the SC(...) unit."""

    def __init__(self, in_ch, out_ch, style_dim, kernel=3, demodulate=True):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, kernel, style_dim, demodulate)
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x, style):
        out = self.conv(x, style) + self.bias.view(1, -1, 1, 1)
        return F.leaky_relu(out, 0.2) * math.sqrt(2)


class ToRGB(nn.Module):
    def __init__(self, in_ch, style_dim, out_ch=3):
        super().__init__()
        self.conv = ModulatedConv2d(in_ch, out_ch, 1, style_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x, style, skip=None):
        out = self.conv(x, style) + self.bias.view(1, -1, 1, 1)
        if skip is not None:
            out = out + F.interpolate(skip, scale_factor=2, mode="bilinear",
                                      align_corners=False)
        return out


def upsample2x(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def downsample2x(x):
    return F.avg_pool2d(x, 2)


class ConvBlock(nn.Module):
    """Plain encoder block: conv + leaky, optional stride-2 downsample."""

    def __init__(self, in_ch, out_ch, down=False):
        super().__init__()
        self.conv = EqualConv2d(in_ch, out_ch, 3, stride=2 if down else 1, padding=1)

    def forward(self, x):
        return F.leaky_relu(self.conv(x), 0.2) * math.sqrt(2)
