"""Single-edit inference pipeline shared by the CLI and the HTTP service.

One call runs the whole chain: bundle the guidance, project it to style
codes, pull the feature-bank pyramid, derive the base latent (input code,
or exemplar code warped to the input pose), apply attribute directions and
optional text-guided optimization, then generate and composite. The mask
contract means every result leaves unmasked pixels untouched, which the
editor re-audits on every call.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import torch

from .aggregation import build_bundle
from .checkpoint import Checkpoint
from .data import (SynthCorpus, luminance01, pose_from_image,
                   random_face_specs, stack_modalities)
from .editing import (DirectionRegistry, TextDirective,
                      apply_attribute_direction, mine_directions,
                      optimize_text_edit)
from .embedders import train_joint_embedder
from .errors import InvalidInputError, InvalidMaskError, ShapeError
from .evaluation import background_preservation_audit, model_from_checkpoint

# text/mining bootstrap corpus: fixed spec so the cached embedder and any
# mined directions are reproducible across machines
BOOTSTRAP_CORPUS = dict(n=96, n_identities=24, seed=500)


def default_registry_path(ckpt_path: str) -> str:
    """Attribute directions live next to the checkpoint they were mined on."""
    return os.path.splitext(ckpt_path)[0] + ".directions.json"


def _yaw_oracle(img: torch.Tensor) -> float:
    if img.dim() == 4:
        img = img[0]
    yaw = pose_from_image(img)
    return 0.0 if yaw is None else yaw


def _brightness_oracle(img: torch.Tensor) -> float:
    return float(luminance01(img).mean())


def builtin_oracles() -> dict:
    """Scalar image readouts a direction can be mined against."""
    return {"yaw": _yaw_oracle, "brightness": _brightness_oracle}


def mine_default_directions(model, *, names=None, n_samples: int = 64,
                            seed: int = 77, epsilon_scale: float = 1.0
                            ) -> DirectionRegistry:
    """Mine latent directions from bank samples against built-in oracles."""
    oracles = builtin_oracles()
    if names is not None:
        unknown = [n for n in names if n not in oracles]
        if unknown:
            raise InvalidInputError(
                f"no oracle for {unknown}; available: {sorted(oracles)}")
        oracles = {n: oracles[n] for n in names}
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(n_samples, model.config.w_dim, generator=gen)
    with torch.no_grad():
        w = model.mapping(z, model.config.t)
    return mine_directions(w, lambda ws: model.bank(ws)[1], oracles,
                           epsilon_scale=epsilon_scale)


@dataclass
class EditRequest:
    """One edit step. Tensors are single-image (C, H, W) at the model
    resolution; attrs are (direction name, epsilon) applied in order."""
    image: torch.Tensor
    mask: torch.Tensor
    sketch: torch.Tensor | None = None
    color: torch.Tensor | None = None
    semantic: torch.Tensor | None = None
    exemplar: torch.Tensor | None = None
    text: str | None = None
    attrs: list = field(default_factory=list)
    seed: int = 0


@dataclass
class EditResult:
    image: torch.Tensor          # composed output (3, H, W)
    w_star: torch.Tensor         # final latent after all edits
    bg_max_dev: float            # audit: max |out - in| outside the mask
    timings: dict
    text_trajectory: list | None = None
    text_aborted: bool = False


class Editor:
    """Checkpoint plus direction registry, ready to run edits."""

    def __init__(self, ckpt: Checkpoint, registry: DirectionRegistry = None,
                 joint_embedder=None):
        self.model = model_from_checkpoint(ckpt)
        self.config = ckpt.config
        self.registry = registry if registry is not None else DirectionRegistry()
        self._joint = joint_embedder

    def joint_embedder(self):
        """Text/image embedder, trained on a fixed synthetic corpus the
        first time a text edit is requested (cached on disk)."""
        if self._joint is None:
            # the joint embedder's conv stack needs >= 16px; it resizes its
            # inputs, so a 16px embedder still scores smaller renders
            res = max(16, self.config.resolution)
            corpus = SynthCorpus(random_face_specs(**BOOTSTRAP_CORPUS), res)
            self._joint = train_joint_embedder(corpus)
        return self._joint

    def _batched(self, t: torch.Tensor, channels: int, name: str) -> torch.Tensor:
        if t.dim() != 3 or t.shape[0] != channels:
            raise ShapeError(
                f"{name} must be ({channels}, H, W), got {tuple(t.shape)}")
        if t.shape[-1] != self.config.resolution or t.shape[-2] != self.config.resolution:
            raise ShapeError(
                f"{name} must match checkpoint resolution "
                f"{self.config.resolution}, got {tuple(t.shape[-2:])}")
        return t.unsqueeze(0)

    def edit(self, req: EditRequest) -> EditResult:
        timings: dict = {}
        start = time.perf_counter()
        torch.manual_seed(req.seed)

        image = self._batched(req.image, 3, "image")
        mask = self._batched(req.mask, 1, "mask")
        if mask.sum() == 0:
            raise InvalidMaskError("mask selects no pixels; nothing to edit")
        extras = {}
        for name, ch in (("sketch", 1), ("color", 3), ("semantic", 19),
                         ("exemplar", 3)):
            val = getattr(req, name)
            if val is not None:
                extras[name] = self._batched(val, ch, name)
        bundle = build_bundle(image=image, mask=mask, **extras)
        timings["bundle_ms"] = (time.perf_counter() - start) * 1000

        tick = time.perf_counter()
        with torch.no_grad():
            w_p = self.model.style_encoder(bundle.stack())
            pyramid, _ = self.model.bank(w_p)
            w_input = self.model.style_encoder(stack_modalities(image=image))
            if req.exemplar is not None:
                # keep the input's pose, take the exemplar's appearance
                w_ex = self.model.style_encoder(
                    stack_modalities(image=extras["exemplar"]))
                w_hat = self.model.warp(w_input, w_ex)
            else:
                w_hat = w_input
        timings["encode_ms"] = (time.perf_counter() - tick) * 1000

        tick = time.perf_counter()
        w_star = w_hat
        for name, eps in req.attrs:
            w_star = apply_attribute_direction(
                w_star, self.registry.get(name), eps)

        text_trajectory, text_aborted = None, False
        if req.text:
            directive = TextDirective(
                t_tar=req.text,
                lambda_clip=self.config.lambda_clip,
                lambda_reg=self.config.lambda_reg,
                iterations=self.config.text_iters,
                learning_rate=self.config.text_lr)
            render = lambda w: self.model.edit_forward(
                bundle, w, bank_pyramid=pyramid)
            res = optimize_text_edit(w_star, directive,
                                     self.joint_embedder(), render)
            w_star = res.w
            text_trajectory, text_aborted = res.trajectory, res.aborted
        timings["latent_ms"] = (time.perf_counter() - tick) * 1000

        tick = time.perf_counter()
        with torch.no_grad():
            out = self.model.edit_forward(bundle, w_star, bank_pyramid=pyramid)
        timings["generate_ms"] = (time.perf_counter() - tick) * 1000
        timings["total_ms"] = (time.perf_counter() - start) * 1000

        bg = background_preservation_audit(zip(bundle.masked_image, mask, out))
        return EditResult(image=out[0], w_star=w_star.detach(),
                          bg_max_dev=bg, timings=timings,
                          text_trajectory=text_trajectory,
                          text_aborted=text_aborted)
