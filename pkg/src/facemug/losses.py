"""Training objectives: identity and perceptual distances, the latent
attribute loss, diversity-target construction, non-saturating adversarial
losses with lazy R1, and the warp / main totals with component bookkeeping.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import (DegenerateEmbeddingError, ShapeError,
                     TrainingDivergedError)
from .latents import interpolate_styles, map_latent, style_mixing


@dataclass
class LossWeights:
    lambda_latent: float = 0.1
    lambda_id: float = 0.1
    lambda_lpips: float = 0.5
    lambda_attr: float = 0.1
    gamma: float = 10.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")


def identity_loss(x: torch.Tensor, y: torch.Tensor, embedder) -> torch.Tensor:
    """1 - cos(R(x), R(y)), averaged over the batch. Range [0, 2]."""
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    ex, ey = embedder(x), embedder(y)
    if (ex.norm(dim=1) < 1e-8).any() or (ey.norm(dim=1) < 1e-8).any():
        raise DegenerateEmbeddingError("zero-norm identity embedding")
    cos = F.cosine_similarity(ex, ey, dim=1)
    return (1 - cos).mean()


def lpips_loss(x: torch.Tensor, y: torch.Tensor, perceptual) -> torch.Tensor:
    """L2 distance between stacked multi-scale features, batch mean."""
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    return (perceptual(x) - perceptual(y)).norm(dim=1).mean()


def attribute_loss(wx: torch.Tensor, wy: torch.Tensor) -> torch.Tensor:
    """L2 norm over all t x 512 entries of the style-stack difference,
    batch mean."""
    if wx.shape != wy.shape:
        raise ShapeError(f"style shapes differ: {tuple(wx.shape)} vs {tuple(wy.shape)}")
    diff = wx - wy
    if diff.dim() == 2:
        return diff.norm()
    return diff.flatten(1).norm(dim=1).mean()


def build_diversity_target(w_e: torch.Tensor, z1: torch.Tensor,
                           z2: torch.Tensor, alpha: float, mapping,
                           rng: torch.Generator) -> torch.Tensor:
    """Mixed random style target: cross two mapped codes at a random layer,
    then blend with the exemplar code. alpha=1 returns w_e."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    t = w_e.shape[-2]
    w1 = map_latent(z1, mapping, t)
    w2 = map_latent(z2, mapping, t)
    crossover = int(torch.randint(0, t + 1, (1,), generator=rng))
    w_z = style_mixing(w1, w2, crossover)
    return interpolate_styles(w_e, w_z, alpha)


def _check_logits(*logits):
    for l in logits:
        if not torch.isfinite(l).all():
            raise TrainingDivergedError(-1, "non-finite discriminator logits")


def adversarial_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating logistic generator loss: softplus(-D(fake))."""
    _check_logits(fake_logits)
    return F.softplus(-fake_logits).mean()


def adversarial_d_loss(real_logits: torch.Tensor,
                       fake_logits: torch.Tensor) -> torch.Tensor:
    """softplus(D(fake)) + softplus(-D(real))."""
    _check_logits(real_logits, fake_logits)
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()


def range_penalty(image: torch.Tensor) -> torch.Tensor:
    """Mean squared overshoot of the [-1, 1] data range. Zero for in-range
    output. Without it the generator can win the adversarial game by
    amplitude blow-up once softplus saturates, freezing both players."""
    return F.relu(image.abs() - 1.0).pow(2).mean()


def r1_penalty(d, real: torch.Tensor, gamma: float = 10.0) -> torch.Tensor:
    """(gamma/2) * E[ ||grad_x D(x)||^2 ] on real images. Differentiable in
    D's parameters (double backward)."""
    real = real.detach().requires_grad_(True)
    logits = d(real)
    _check_logits(logits)
    (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=True)
    return gamma / 2 * grad.pow(2).flatten(1).sum(dim=1).mean()


def warp_total(l_id: torch.Tensor, l_lpips: torch.Tensor,
               l_attr: torch.Tensor, weights: LossWeights):
    """Warp-stage objective: lambda_latent * (id + perceptual + attribute).
    Returns (total, components)."""
    total = weights.lambda_latent * (l_id + l_lpips + l_attr)
    comps = {"l_id": l_id, "l_lpips": l_lpips, "l_attr": l_attr, "total": total}
    return total, {k: float(v.detach()) for k, v in comps.items()}


def main_total(i_out: torch.Tensor, i_ex: torch.Tensor, i_gt: torch.Tensor,
               w_o: torch.Tensor, w_bar: torch.Tensor, weights: LossWeights,
               id_embedder, perceptual, d, lpips_active: bool = None):
    """Full generator objective:

        lambda_id * L_id(I_out, I_ex) + lambda_attr * L_attr(w_o, w_bar)
        + lambda_lpips * L_lpips(I_out, I_gt) + L_adv

    The perceptual term is dropped when the exemplar is not the ground
    truth (there is no pixel-aligned target to match). Returns
    (total, components)."""
    if lpips_active is None:
        lpips_active = torch.equal(i_gt, i_ex)
    l_id = identity_loss(i_out, i_ex, id_embedder)
    l_attr = attribute_loss(w_o, w_bar)
    if lpips_active:
        l_lpips = lpips_loss(i_out, i_gt, perceptual)
    else:
        l_lpips = torch.zeros((), dtype=i_out.dtype)
    g_adv = adversarial_g_loss(d(i_out))
    total = (weights.lambda_id * l_id + weights.lambda_attr * l_attr
             + weights.lambda_lpips * l_lpips + g_adv)
    comps = {"l_id": l_id, "l_attr": l_attr, "l_lpips": l_lpips,
             "g_adv": g_adv, "total": total}
    return total, {k: float(v.detach()) for k, v in comps.items()}
