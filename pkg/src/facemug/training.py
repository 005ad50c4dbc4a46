"""Self-supervised training stages.

Four stages share one loop skeleton and one checkpoint container:

  1. pretrain_feature_bank   adversarial pretraining of mapping + bank
  2. train_style_encoder     single-modality inversion through the frozen bank
  3. train_warp              pose-transfer triplets, latent-space loss
  4. train_main              aggregation + refinement, alternating with D

Stages 3 and 4 are independent given stage 2. Every stage consumes and
produces a full-model checkpoint, freezes whatever it does not train,
writes one JSON line per step ({step, g_loss, d_loss, r1, l_id, l_attr,
l_lpips}; slots a stage does not compute hold 0.0), snapshots at a fixed
interval so a resumed run replays the exact remaining trajectory, and
aborts via TrainingDivergedError after three consecutive non-finite
steps, leaving the last good checkpoint on disk.

All randomness in a loop flows through one torch.Generator seeded from
config.seed plus a per-stage offset; nothing reads global RNG state, so
fixed seed + single-threaded math gives identical logs across runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import chain
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F

from .aggregation import build_bundle
from .checkpoint import (
    MODULE_SEGMENTS,
    Checkpoint,
    capture_model,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from .config import SEMANTIC_CH, Config
from .data import MaskSpec, SynthCorpus, derive_color, derive_sketch, gen_mask, stack_modalities
from .embedders import load_perceptual, train_identity_embedder
from .errors import InvalidInputError, TrainingDivergedError
from .generator import FacemugModel, compose_edit
from .losses import (
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    attribute_loss,
    build_diversity_target,
    identity_loss,
    lpips_loss,
    main_total,
    r1_penalty,
    range_penalty,
    warp_total,
)
from .warping import build_warp_triplet

LOG_KEYS = ("g_loss", "d_loss", "r1", "l_id", "l_attr", "l_lpips")
PIXEL_MODALITIES = ("sketch", "color", "semantic")
MASK_KINDS = ("hair", "face", "foreground", "irregular", "center")

# per-stage offsets added to config.seed for the loop generator, so the
# stages draw from disjoint streams even under one seed
_STAGE_SEEDS = {"bank": 1, "encoder": 2, "warp": 3, "main": 4}


# ---------------------------------------------------------------- data

class TrainingData:
    """Corpus tensors materialized once: images, semantic labels, pencil
    sketches, and flat per-region color maps. Semantic maps are stored as
    label ids and expanded to one-hot per batch."""

    def __init__(self, corpus: SynthCorpus):
        self.corpus = corpus
        self.resolution = corpus.resolution
        images, labels, sketches, colors, yaws = [], [], [], [], []
        for item in corpus:
            img, sem = item["image"], item["semantic"]
            images.append(img)
            labels.append(sem.argmax(dim=0).to(torch.uint8))
            sketches.append(derive_sketch(img))
            colors.append(derive_color(img, sem))
            yaws.append(float(item["yaw"]))
        res = self.resolution
        self.images = torch.stack(images) if images else torch.zeros(0, 3, res, res)
        self.labels = torch.stack(labels) if labels else torch.zeros(0, res, res, dtype=torch.uint8)
        self.sketches = torch.stack(sketches) if sketches else torch.zeros(0, 1, res, res)
        self.colors = torch.stack(colors) if colors else torch.zeros(0, 3, res, res)
        self.yaws = torch.tensor(yaws)

    def __len__(self) -> int:
        return self.images.shape[0]

    def semantic(self, idx: torch.Tensor) -> torch.Tensor:
        onehot = F.one_hot(self.labels[idx].long(), SEMANTIC_CH)
        return onehot.permute(0, 3, 1, 2).float()

    def batch(self, idx: torch.Tensor) -> dict:
        return {
            "image": self.images[idx],
            "sketch": self.sketches[idx],
            "color": self.colors[idx],
            "semantic": self.semantic(idx),
        }


# ---------------------------------------------------------------- sampling

def draw_modality_index(gen: torch.Generator, n_slots: int = 4) -> int:
    """Which input slot survives an encoder-training step (0 = image)."""
    return int(torch.randint(0, n_slots, (1,), generator=gen))


@dataclass
class MainBranchPlan:
    """One main-stage step's branch decisions, split out so the sampler's
    statistics can be tested without running the model."""

    exemplar_branch: bool
    alpha: float = 1.0
    keep: dict = field(default_factory=dict)


def plan_main_branch(gen: torch.Generator, rho: float, omega: float) -> MainBranchPlan:
    r = float(torch.rand((), generator=gen))
    if r > rho:
        alpha = float(torch.rand((), generator=gen))
        return MainBranchPlan(True, alpha=alpha, keep={m: False for m in PIXEL_MODALITIES})
    q = torch.rand(len(PIXEL_MODALITIES), generator=gen)
    keep = {m: bool(q[i] <= omega) for i, m in enumerate(PIXEL_MODALITIES)}
    return MainBranchPlan(False, alpha=1.0, keep=keep)


def random_masks(gen: torch.Generator, semantics: torch.Tensor,
                 kinds: Sequence[str] = MASK_KINDS) -> torch.Tensor:
    """One mask per sample, of a kind drawn uniformly."""
    out = []
    for i in range(semantics.shape[0]):
        kind = kinds[int(torch.randint(0, len(kinds), (1,), generator=gen))]
        out.append(gen_mask(MaskSpec(kind), semantic=semantics[i], rng=gen,
                            resolution=semantics.shape[-1]))
    return torch.stack(out)


def _distinct_indices(gen: torch.Generator, idx: torch.Tensor, n: int) -> torch.Tensor:
    ex = torch.randint(0, n, idx.shape, generator=gen)
    while bool((ex == idx).any()):
        clash = ex == idx
        ex[clash] = torch.randint(0, n, (int(clash.sum()),), generator=gen)
    return ex


def build_encoder_inputs(batch: dict, r: int, masks: torch.Tensor) -> torch.Tensor:
    """Encoder-stage gating: slot r survives, masked; the rest are zero."""
    slots = ("image", "sketch", "color", "semantic")
    if not 0 <= r < len(slots):
        raise InvalidInputError(f"modality index must be in [0,{len(slots) - 1}], got {r}")
    kept = {name: batch[name] * masks if i == r else None for i, name in enumerate(slots)}
    return stack_modalities(batch=batch["image"].shape[0],
                            resolution=batch["image"].shape[-1], **kept)


def latent_delta_penalty(w: torch.Tensor) -> torch.Tensor:
    """Mean squared offset of each style layer from the first, keeping
    encoder outputs near a single shared code."""
    return (w[:, 1:] - w[:, :1]).square().mean()


# ---------------------------------------------------------------- loop

class TrainRng:
    def __init__(self, seed: int):
        self.gen = torch.Generator().manual_seed(seed)

    def capture(self) -> dict:
        return {"sampler": self.gen.get_state()}

    def restore(self, state: dict) -> None:
        self.gen.set_state(state["sampler"].to(torch.uint8))


def _freeze_except(model: FacemugModel, trained: Iterable[str]) -> None:
    trained = set(trained)
    for attr in MODULE_SEGMENTS.values():
        getattr(model, attr).requires_grad_(attr in trained)


def _params(model: FacemugModel, attrs: Iterable[str]):
    return chain.from_iterable(getattr(model, a).parameters() for a in attrs)


def _adam(config: Config, params) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.lr, betas=(config.beta1, config.beta2))


def _try_loss(fn: Callable[[], torch.Tensor]):
    """Evaluate a loss, mapping non-finite values (including non-finite
    logits raised from inside the adversarial terms) to (None, nan) so the
    step is skipped but the run continues toward the divergence gate."""
    try:
        loss = fn()
    except TrainingDivergedError:
        return None, float("nan")
    value = float(loss.detach())
    if not math.isfinite(value):
        return None, value
    return loss, value


def _apply(opt: torch.optim.Optimizer, loss: torch.Tensor | None) -> None:
    if loss is None:
        return
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    opt.zero_grad(set_to_none=True)


class _StageRun:
    """Shared plumbing: model construction, freezing, resume, the step
    loop with logging, snapshots, and the divergence gate."""

    def __init__(self, stage: str, config: Config, trained: Sequence[str],
                 opt_groups: dict[str, Sequence[str]],
                 frozen_ckpts: Sequence[Checkpoint] = ()):
        torch.manual_seed(config.seed)
        self.config = config
        self.model = FacemugModel(config)
        for ck in frozen_ckpts:
            restore_model(self.model, ck, restore_rng_state=False)
        _freeze_except(self.model, trained)
        self.opts = {name: _adam(config, _params(self.model, attrs))
                     for name, attrs in opt_groups.items()}
        self.rng = TrainRng(config.seed + _STAGE_SEEDS[stage])
        self.start_step = 0

    def resume(self, path) -> None:
        ckpt = load_checkpoint(path, expected_config=self.config)
        self.start_step = restore_model(self.model, ckpt, optimizers=self.opts,
                                        restore_rng_state=False)
        self.rng.restore(ckpt.require("rng"))

    def _capture(self, step: int) -> Checkpoint:
        return capture_model(self.model, step, optimizers=self.opts,
                             extra_rng=self.rng.capture())

    def loop(self, steps: int, body: Callable[[int], dict], *,
             out_path=None, log_path=None, snapshot_interval: int = 500) -> Checkpoint:
        log_fh = open(log_path, "a" if self.start_step > 0 else "w") if log_path else None
        last_good = self._capture(self.start_step)
        streak = 0
        try:
            for step in range(self.start_step, steps):
                if step > self.start_step and snapshot_interval and step % snapshot_interval == 0:
                    last_good = self._capture(step)
                    if out_path:
                        save_checkpoint(last_good, out_path)
                comps = body(step)
                if log_fh:
                    row = {"step": step}
                    row.update((k, float(comps.get(k, 0.0))) for k in LOG_KEYS)
                    log_fh.write(json.dumps(row, separators=(",", ":")) + "\n")
                bad = sorted(k for k, v in comps.items() if not math.isfinite(v))
                if bad:
                    streak += 1
                    if streak >= 3:
                        if out_path:
                            save_checkpoint(last_good, out_path)
                        raise TrainingDivergedError(
                            step, f"{'/'.join(bad)} non-finite for {streak} consecutive steps; "
                                  f"last good checkpoint is from step {last_good.step}")
                else:
                    streak = 0
            final = self._capture(steps)
            if out_path:
                save_checkpoint(final, out_path)
            return final
        finally:
            if log_fh:
                log_fh.close()


def _sample_indices(gen: torch.Generator, n: int, batch: int) -> torch.Tensor:
    return torch.randint(0, n, (batch,), generator=gen)


# ---------------------------------------------------------------- stage 1

def pretrain_feature_bank(data: TrainingData, config: Config, *, steps: int | None = None,
                          out_path=None, log_path=None, resume_from=None,
                          snapshot_interval: int = 500) -> Checkpoint:
    """Adversarial pretraining of the mapping net + feature bank against
    the discriminator, with lazy R1 every config.r1_interval D steps."""
    if len(data) == 0:
        raise InvalidInputError("dataset is empty")
    steps = config.bank_steps if steps is None else steps
    run = _StageRun("bank", config, trained=("mapping", "bank", "discriminator"),
                    opt_groups={"g": ("mapping", "bank"), "d": ("discriminator",)})
    if resume_from:
        run.resume(resume_from)
    model, gen, t = run.model, run.rng.gen, config.t

    def body(step: int) -> dict:
        idx = _sample_indices(gen, len(data), config.batch_size)
        real = data.images[idx]
        z = torch.randn(config.batch_size, config.w_dim, generator=gen)
        with torch.no_grad():
            _, fake = model.bank(model.mapping(z, t))
        d_loss, d_val = _try_loss(lambda: adversarial_d_loss(
            model.discriminator(real), model.discriminator(fake)))
        _apply(run.opts["d"], d_loss)
        r1_val = 0.0
        if step % config.r1_interval == 0:
            r1, r1_val = _try_loss(lambda: r1_penalty(
                model.discriminator, real, config.r1_gamma) * config.r1_interval)
            _apply(run.opts["d"], r1)
        z = torch.randn(config.batch_size, config.w_dim, generator=gen)
        _, fake = model.bank(model.mapping(z, t))
        g_loss, g_val = _try_loss(lambda: adversarial_g_loss(model.discriminator(fake))
                                  + config.lambda_range * range_penalty(fake))
        _apply(run.opts["g"], g_loss)
        return {"g_loss": g_val, "d_loss": d_val, "r1": r1_val}

    return run.loop(steps, body, out_path=out_path, log_path=log_path,
                    snapshot_interval=snapshot_interval)


# ---------------------------------------------------------------- stage 2

def train_style_encoder(data: TrainingData, bank_ckpt: Checkpoint, config: Config, *,
                        steps: int | None = None, out_path=None, log_path=None,
                        resume_from=None, snapshot_interval: int = 500) -> Checkpoint:
    """Inversion training: each step keeps exactly one randomly chosen
    input slot (image, sketch, color, or semantic), masks it, zero-fills
    the rest, and reconstructs the face through the frozen bank under a
    composite pixel + perceptual + identity + latent-regularity loss."""
    if len(data) == 0:
        raise InvalidInputError("dataset is empty")
    steps = config.encoder_steps if steps is None else steps
    run = _StageRun("encoder", config, trained=("style_encoder",),
                    opt_groups={"e": ("style_encoder",)}, frozen_ckpts=(bank_ckpt,))
    if resume_from:
        run.resume(resume_from)
    model, gen = run.model, run.rng.gen
    id_embedder = train_identity_embedder(data.corpus)
    perceptual = load_perceptual()

    def body(step: int) -> dict:
        idx = _sample_indices(gen, len(data), config.batch_size)
        batch = data.batch(idx)
        r = draw_modality_index(gen)
        masks = random_masks(gen, batch["semantic"])
        x = build_encoder_inputs(batch, r, masks)

        comps: dict = {}

        def total() -> torch.Tensor:
            w_p = model.style_encoder(x)
            _, i_p = model.bank(w_p)
            l_pix = F.mse_loss(i_p, batch["image"])
            l_lp = lpips_loss(i_p, batch["image"], perceptual)
            l_id = identity_loss(i_p, batch["image"], id_embedder)
            l_delta = latent_delta_penalty(w_p)
            comps.update(l_id=float(l_id.detach()), l_lpips=float(l_lp.detach()))
            return (config.enc_pixel * l_pix + config.enc_lpips * l_lp
                    + config.enc_id * l_id + config.enc_delta * l_delta)

        loss, value = _try_loss(total)
        _apply(run.opts["e"], loss)
        return {"g_loss": value, "l_id": comps.get("l_id", value),
                "l_lpips": comps.get("l_lpips", value)}

    return run.loop(steps, body, out_path=out_path, log_path=log_path,
                    snapshot_interval=snapshot_interval)


# ---------------------------------------------------------------- stage 3

def train_warp(data: TrainingData, encoder_ckpt: Checkpoint, config: Config, *,
               bank_ckpt: Checkpoint | None = None, steps: int | None = None,
               out_path=None, log_path=None, resume_from=None,
               snapshot_interval: int = 500) -> Checkpoint:
    """Pose-warp training on self-supervised triplets; the encoder and
    bank stay frozen, the loss lives in latent + decoded space."""
    if len(data) == 0:
        raise InvalidInputError("dataset is empty")
    steps = config.warp_steps if steps is None else steps
    frozen = (bank_ckpt, encoder_ckpt) if bank_ckpt is not None else (encoder_ckpt,)
    run = _StageRun("warp", config, trained=("warp",),
                    opt_groups={"w": ("warp",)}, frozen_ckpts=frozen)
    if resume_from:
        run.resume(resume_from)
    model, gen = run.model, run.rng.gen
    id_embedder = train_identity_embedder(data.corpus)
    perceptual = load_perceptual()
    weights = LossWeights(lambda_latent=config.lambda_latent)

    def body(step: int) -> dict:
        idx = _sample_indices(gen, len(data), config.batch_size)
        triplet = build_warp_triplet(
            data.images[idx], model.style_encoder, gen,
            scale_range=(config.aug_scale_min, config.aug_scale_max),
            jitter=config.aug_jitter, mask_frac=config.aug_mask_frac)

        comps: dict = {}

        def total() -> torch.Tensor:
            w_wa = model.warp(triplet.w_ta, triplet.w_so)
            _, i_wa = model.bank(w_wa)
            l_id = identity_loss(i_wa, triplet.i_ini, id_embedder)
            l_lpips = lpips_loss(i_wa, triplet.i_ini, perceptual)
            l_attr = attribute_loss(w_wa, triplet.w_ini)
            loss, parts = warp_total(l_id, l_lpips, l_attr, weights)
            comps.update(parts)
            return loss

        loss, value = _try_loss(total)
        _apply(run.opts["w"], loss)
        return {"g_loss": value, "l_id": comps.get("l_id", value),
                "l_attr": comps.get("l_attr", value),
                "l_lpips": comps.get("l_lpips", value)}

    return run.loop(steps, body, out_path=out_path, log_path=log_path,
                    snapshot_interval=snapshot_interval)


# ---------------------------------------------------------------- stage 4

def train_main(data: TrainingData, frozen: Checkpoint | Sequence[Checkpoint],
               config: Config, *, steps: int | None = None, out_path=None,
               log_path=None, resume_from=None,
               snapshot_interval: int = 500) -> Checkpoint:
    """Main stage: aggregation + refinement against the discriminator.

    Each step draws r; with probability 1-rho the exemplar branch runs
    (random exemplar, pixel modalities zeroed, diversity-mixed latent
    target), otherwise the reconstruction branch keeps each modality with
    probability omega under an extra random mask and targets the
    exemplar code directly. The generator phase updates aggregation +
    refinement; the discriminator phase updates only D."""
    if len(data) < 2:
        raise InvalidInputError("main stage needs at least two faces for exemplar sampling")
    steps = config.main_steps if steps is None else steps
    frozen_list = [frozen] if isinstance(frozen, Checkpoint) else list(frozen)
    run = _StageRun("main", config,
                    trained=("aggregation", "refine_encoder", "refine_decoder", "discriminator"),
                    opt_groups={"g": ("aggregation", "refine_encoder", "refine_decoder"),
                                "d": ("discriminator",)},
                    frozen_ckpts=frozen_list)
    if resume_from:
        run.resume(resume_from)
    model, gen = run.model, run.rng.gen
    id_embedder = train_identity_embedder(data.corpus)
    perceptual = load_perceptual()
    weights = LossWeights(lambda_id=config.lambda_id, lambda_lpips=config.lambda_lpips,
                          lambda_attr=config.lambda_attr, gamma=config.r1_gamma)

    def body(step: int) -> dict:
        idx = _sample_indices(gen, len(data), config.batch_size)
        batch = data.batch(idx)
        images = batch["image"]
        masks = random_masks(gen, batch["semantic"])
        plan = plan_main_branch(gen, config.rho, config.omega)

        if plan.exemplar_branch:
            i_ex = data.images[_distinct_indices(gen, idx, len(data))]
            guidance = {m: None for m in PIXEL_MODALITIES}
        else:
            i_ex = images
            guidance = {}
            for m in PIXEL_MODALITIES:
                if plan.keep[m]:
                    extra = random_masks(gen, batch["semantic"])
                    # build_bundle clips sketch/color to the edit mask;
                    # semantics are clipped here for the same effect
                    mod = batch[m] * extra
                    guidance[m] = mod * masks if m == "semantic" else mod
                else:
                    guidance[m] = None

        bundle = build_bundle(image=images, mask=masks, exemplar=i_ex, **guidance)
        with torch.no_grad():
            w_e = model.style_encoder(stack_modalities(image=i_ex))
            w_p = model.style_encoder(bundle.stack())
            bank_pyramid, _ = model.bank(w_p)
            if plan.exemplar_branch:
                z1 = torch.randn(config.batch_size, config.w_dim, generator=gen)
                z2 = torch.randn(config.batch_size, config.w_dim, generator=gen)
                w_bar = build_diversity_target(w_e, z1, z2, plan.alpha, model.mapping, gen)
            else:
                w_bar = w_e

        comps: dict = {}

        def g_total() -> torch.Tensor:
            raw = model.generate(bundle, w_bar, bank_pyramid=bank_pyramid)
            i_out = compose_edit(bundle.masked_image, bundle.mask, raw)
            comps["i_out"] = i_out.detach()
            w_o = model.style_encoder(stack_modalities(image=i_out))
            loss, parts = main_total(i_out, i_ex, images, w_o, w_bar, weights,
                                     id_embedder, perceptual, model.discriminator,
                                     lpips_active=not plan.exemplar_branch)
            comps.update(parts)
            # penalize the raw patch, not i_out: outside the mask i_out is
            # real pixels and already in range
            return loss + config.lambda_range * range_penalty(raw)

        g_loss, g_val = _try_loss(g_total)
        _apply(run.opts["g"], g_loss)

        i_out = comps.pop("i_out", None)
        if i_out is None:  # generator pass diverged before producing an image
            d_val, r1_val = float("nan"), 0.0
        else:
            d_loss, d_val = _try_loss(lambda: adversarial_d_loss(
                model.discriminator(images), model.discriminator(i_out)))
            _apply(run.opts["d"], d_loss)
            r1_val = 0.0
            if step % config.r1_interval == 0:
                r1, r1_val = _try_loss(lambda: r1_penalty(
                    model.discriminator, images, config.r1_gamma) * config.r1_interval)
                _apply(run.opts["d"], r1)
        return {"g_loss": g_val, "d_loss": d_val, "r1": r1_val,
                "l_id": comps.get("l_id", g_val), "l_attr": comps.get("l_attr", g_val),
                "l_lpips": comps.get("l_lpips", 0.0)}

    return run.loop(steps, body, out_path=out_path, log_path=log_path,
                    snapshot_interval=snapshot_interval)
