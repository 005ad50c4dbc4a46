"""Multimodal aggregation: per-modality residual feature extraction, a
shared contribution scorer, per-pixel softmax over modalities, and the
weighted merge

    F_hat = sum_j F_j * B_hat_j.

Four pixel-wise branches: masked image (with the mask concatenated), sketch,
color map, semantic map. Absent modalities participate as zero tensors; the
exemplar acts through the latent path only.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SEMANTIC_CH
from .errors import InvalidInputError, InvalidMaskError, ShapeError
from .nets import EqualConv2d

MODALITIES = ("masked_image", "sketch", "color", "semantic")


@dataclass
class ModalityBundle:
    masked_image: torch.Tensor  # (B,3,H,W), I_gt*(1-M) when built from gt
    mask: torch.Tensor          # (B,1,H,W) binary
    sketch: torch.Tensor        # (B,1,H,W)
    color: torch.Tensor         # (B,3,H,W)
    semantic: torch.Tensor      # (B,19,H,W)
    exemplar: torch.Tensor      # (B,3,H,W)
    present: dict = field(default_factory=dict)  # name -> bool

    @property
    def batch(self) -> int:
        return self.masked_image.shape[0]

    @property
    def resolution(self) -> int:
        return self.masked_image.shape[-1]

    def validate(self) -> "ModalityBundle":
        res = self.resolution
        shapes = {"masked_image": 3, "mask": 1, "sketch": 1, "color": 3,
                  "semantic": SEMANTIC_CH, "exemplar": 3}
        for name, ch in shapes.items():
            t = getattr(self, name)
            if t.shape != (self.batch, ch, res, res):
                raise ShapeError(f"{name} must be ({self.batch},{ch},{res},{res}), "
                                 f"got {tuple(t.shape)}")
        uniq = self.mask.unique()
        if not bool(((uniq == 0) | (uniq == 1)).all()):
            raise InvalidMaskError("mask must be binary 0/1")
        if self.present.get("semantic", False):
            # each pixel is either labeled (one-hot, sums to 1) or masked
            # away entirely (all channels zero)
            sums = self.semantic.sum(dim=1)
            off = torch.minimum((sums - 1).abs(), sums.abs())
            if off.max() > 1e-5:
                raise InvalidInputError("semantic channels must sum to 0 or 1 per pixel")
        for name in ("sketch", "color", "semantic"):
            if not self.present.get(name, False) and getattr(self, name).abs().max() > 0:
                raise InvalidInputError(f"absent modality {name} must be all-zero")
        return self

    def stack(self) -> torch.Tensor:
        """26-channel encoder input [masked image | sketch | color | semantic]."""
        return torch.cat([self.masked_image, self.sketch, self.color,
                          self.semantic], dim=1)


def build_bundle(image: torch.Tensor, mask: torch.Tensor, *,
                 sketch: torch.Tensor = None, color: torch.Tensor = None,
                 semantic: torch.Tensor = None, exemplar: torch.Tensor = None,
                 mask_modalities: bool = True) -> ModalityBundle:
    """Assemble a bundle from a ground-truth/base image and a mask. Sketch
    and color guidance only make sense inside the edited region, so they are
    zeroed outside the mask by default."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    b, _, h, w = image.shape
    if mask.dim() == 3:
        mask = mask.unsqueeze(0)
    mask = mask.expand(b, 1, h, w)

    def prep(t, ch, apply_mask):
        if t is None:
            return torch.zeros(b, ch, h, w), False
        if t.dim() == 3:
            t = t.unsqueeze(0)
        t = t.expand(b, ch, h, w)
        return (t * mask if apply_mask else t), True

    sk, has_sk = prep(sketch, 1, mask_modalities)
    cm, has_cm = prep(color, 3, mask_modalities)
    sem, has_sem = prep(semantic, SEMANTIC_CH, False)
    ex, has_ex = prep(exemplar, 3, False)
    return ModalityBundle(
        masked_image=image * (1 - mask), mask=mask, sketch=sk, color=cm,
        semantic=sem, exemplar=ex,
        present={"sketch": has_sk, "color": has_cm, "semantic": has_sem,
                 "exemplar": has_ex})


@dataclass
class AggregationMaps:
    features: list        # per-modality F_j, each (B,c_a,H,W)
    raw_scores: list      # B_j, each (B,1,H,W)
    norm_scores: list     # B_hat_j, sum to 1 per pixel
    aggregate: torch.Tensor


class ResBlock(nn.Module):
    """Pre-activation residual block: x + conv(act(conv(act(x))))."""

    def __init__(self, ch):
        super().__init__()
        self.c1 = EqualConv2d(ch, ch, 3, padding=1)
        self.c2 = EqualConv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.c1(F.leaky_relu(x, 0.2))
        h = self.c2(F.leaky_relu(h, 0.2))
        return x + h


class AggregationModule(nn.Module):
    IN_CH = {"masked_image": 4, "sketch": 1, "color": 3, "semantic": SEMANTIC_CH}

    def __init__(self, c_a: int = 16):
        super().__init__()
        self.c_a = c_a
        self.stems = nn.ModuleDict(
            {name: EqualConv2d(ch, c_a, 3, padding=1) for name, ch in self.IN_CH.items()})
        self.branches = nn.ModuleDict({name: ResBlock(c_a) for name in self.IN_CH})
        # one scorer shared across modalities
        self.scorer = nn.Sequential(ResBlock(c_a))
        self.score_head = EqualConv2d(c_a, 1, 3, padding=1)

    def extract(self, bundle: ModalityBundle) -> list:
        inputs = {
            "masked_image": torch.cat([bundle.masked_image, bundle.mask], dim=1),
            "sketch": bundle.sketch,
            "color": bundle.color,
            "semantic": bundle.semantic,
        }
        return [self.branches[n](self.stems[n](inputs[n])) for n in MODALITIES]

    def score(self, features: list) -> list:
        if not features:
            raise InvalidInputError("empty feature list")
        ref = features[0].shape
        for f in features:
            if f.shape != ref:
                raise ShapeError(f"feature shapes differ: {tuple(f.shape)} vs {tuple(ref)}")
        return [self.score_head(self.scorer(f)) for f in features]

    @staticmethod
    def normalize(raw_scores: list) -> list:
        if not raw_scores:
            raise InvalidInputError("empty score list")
        stacked = torch.stack(raw_scores, dim=0)  # (n,B,1,H,W)
        # softmax over modalities; torch subtracts the per-pixel max, so
        # scores of +-80 stay finite
        norm = torch.softmax(stacked, dim=0)
        return list(norm.unbind(0))

    def forward(self, bundle: ModalityBundle, return_maps: bool = False):
        feats = self.extract(bundle)
        raw = self.score(feats)
        norm = self.normalize(raw)
        agg = sum(f * s for f, s in zip(feats, norm))
        if return_maps:
            return agg, AggregationMaps(feats, raw, norm, agg)
        return agg


def extract_modality_features(bundle: ModalityBundle, params: AggregationModule) -> list:
    return params.extract(bundle)


def score_and_normalize(features: list, params: AggregationModule) -> list:
    return params.normalize(params.score(features))


def aggregate(bundle: ModalityBundle, params: AggregationModule,
              return_maps: bool = False):
    return params(bundle, return_maps=return_maps)
