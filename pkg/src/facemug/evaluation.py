"""Metrics for judging edits at desk scale.

Feature-space Frechet distance over a small identity net, paired cosine
identity similarity, pose-transfer scoring for the warp head, and a hard
background-preservation audit. Published face benchmarks run at 1024px on
CelebA-HQ-sized corpora; nothing at this resolution is comparable to them,
so these numbers support relative comparisons between checkpoints only.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import Checkpoint, restore_model
from .data import gen_mask, pose_from_image, stack_modalities, MaskSpec
from .aggregation import build_bundle
from .embedders import load_perceptual, train_identity_embedder
from .errors import InvalidInputError, ShapeError
from .generator import FacemugModel
from .losses import lpips_loss
from .warping import build_warp_triplet

EVAL_MASK_KINDS = ("face", "hair", "irregular", "center")


# ------------------------------------------------------- frechet distance

def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues from roundoff are
    clamped to zero rather than propagated into the trace."""
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(mu1, cov1, mu2, cov2, eps: float = 1e-6) -> float:
    """Frechet distance between two Gaussians from their moments:
    ||mu1-mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^(1/2))."""
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    cov1 = np.asarray(cov1, dtype=np.float64)
    cov2 = np.asarray(cov2, dtype=np.float64)
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise ShapeError("moment shapes differ between the two sets")
    # unconditional regularization keeps the value a deterministic function
    # of the inputs instead of branching on a singularity test
    eye = np.eye(cov1.shape[0]) * eps
    cov1 = cov1 + eye
    cov2 = cov2 + eye
    s1 = _psd_sqrt(cov1)
    # Tr((C1 C2)^(1/2)) == Tr((s1 C2 s1)^(1/2)) with s1 = C1^(1/2); the
    # inner matrix is symmetric PSD, so eigh applies
    inner = s1 @ cov2 @ s1
    inner_vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_sqrt = float(np.sqrt(inner_vals).sum())
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def extract_features(images: torch.Tensor, extractor, batch_size: int = 64) -> np.ndarray:
    """Run the feature extractor over a stack of images; float64 output so
    the covariance arithmetic downstream is stable."""
    chunks = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunks.append(extractor(images[start:start + batch_size]))
    return torch.cat(chunks).double().numpy()


def _moments(feats: np.ndarray):
    return feats.mean(axis=0), np.cov(feats, rowvar=False)


def proxy_fid(real_set: torch.Tensor, fake_set: torch.Tensor,
              feature_extractor=None) -> float:
    """Frechet distance between feature distributions of two image sets.

    With feature_extractor=None the inputs are treated as raw (n, d)
    feature matrices. Needs at least two samples per set for a covariance.
    """
    if real_set.shape[0] < 2 or fake_set.shape[0] < 2:
        raise InvalidInputError("need at least 2 samples per set for a covariance")
    if feature_extractor is None:
        if real_set.dim() != 2 or fake_set.dim() != 2:
            raise InvalidInputError("raw feature sets must be 2-d (n, d)")
        f_real = np.asarray(real_set.double().numpy() if torch.is_tensor(real_set) else real_set,
                            dtype=np.float64)
        f_fake = np.asarray(fake_set.double().numpy() if torch.is_tensor(fake_set) else fake_set,
                            dtype=np.float64)
    else:
        f_real = extract_features(real_set, feature_extractor)
        f_fake = extract_features(fake_set, feature_extractor)
    mu1, cov1 = _moments(f_real)
    mu2, cov2 = _moments(f_fake)
    return frechet_gaussian(mu1, cov1, mu2, cov2)


def masked_region_fid(real_set: torch.Tensor, fake_set: torch.Tensor,
                      masks: torch.Tensor, feature_extractor) -> float:
    """proxy_fid restricted to edited content: everything outside the mask
    is zeroed in both sets, so the unedited background cannot dilute it."""
    return proxy_fid(real_set * masks, fake_set * masks, feature_extractor)


# -------------------------------------------------------- identity cosine

def csim(set_a: torch.Tensor, set_b: torch.Tensor, embedder) -> float:
    """Mean pairwise cosine similarity of identity embeddings. Paired
    metric: sample i of set_a is compared to sample i of set_b."""
    if set_a.shape[0] != set_b.shape[0]:
        raise ShapeError(
            f"paired metric needs equal set sizes, got {set_a.shape[0]} and {set_b.shape[0]}")
    if set_a.shape[0] == 0:
        raise InvalidInputError("empty sets")
    with torch.no_grad():
        ea = torch.nn.functional.normalize(embedder(set_a), dim=1)
        eb = torch.nn.functional.normalize(embedder(set_b), dim=1)
    return float((ea * eb).sum(dim=1).mean())


def proxy_lpips(set_a: torch.Tensor, set_b: torch.Tensor, perceptual=None) -> float:
    """Mean perceptual distance over paired samples."""
    if set_a.shape != set_b.shape:
        raise ShapeError("paired metric needs identically shaped sets")
    if perceptual is None:
        perceptual = load_perceptual()
    with torch.no_grad():
        return float(lpips_loss(set_a, set_b, perceptual))


# ------------------------------------------------------------ pose metric

@dataclass
class PoseEvalTriplet:
    """One scoring unit: move w_so toward the pose of w_ta."""
    w_so: torch.Tensor
    w_ta: torch.Tensor
    target_pose: float
    source_pose: float


@dataclass
class PoseTransferResult:
    fraction: float
    n_scored: int
    n_excluded: int


def _decode_poses(model: FacemugModel, w: torch.Tensor) -> list:
    with torch.no_grad():
        _, imgs = model.bank(w)
    return pose_from_image(imgs)


def build_pose_eval_triplets(images: torch.Tensor, model: FacemugModel,
                             gen: torch.Generator, n: int, *,
                             min_delta_deg: float = 5.0,
                             max_rounds: int = 60) -> list:
    """Sample warp triplets and keep those with a real pose gap.

    Triplets where source and target decode to poses within min_delta_deg
    are degenerate (nothing to transfer) and are dropped at construction,
    as are samples where the pose readout fails on either decode.
    """
    if images.shape[0] == 0:
        raise InvalidInputError("no images to build triplets from")
    out = []
    batch = min(16, images.shape[0])
    for _ in range(max_rounds):
        if len(out) >= n:
            break
        idx = torch.randint(0, images.shape[0], (batch,), generator=gen)
        trip = build_warp_triplet(images[idx], model.style_encoder, gen)
        poses_ta = _decode_poses(model, trip.w_ta)
        poses_so = _decode_poses(model, trip.w_so)
        for i in range(batch):
            if len(out) >= n:
                break
            if poses_ta[i] is None or poses_so[i] is None:
                continue
            if abs(poses_ta[i] - poses_so[i]) <= min_delta_deg:
                continue
            out.append(PoseEvalTriplet(w_so=trip.w_so[i].clone(),
                                       w_ta=trip.w_ta[i].clone(),
                                       target_pose=poses_ta[i],
                                       source_pose=poses_so[i]))
    return out


def pose_transfer_accuracy(warp_ckpt, test_triplets: list,
                           pose_oracle=pose_from_image) -> PoseTransferResult:
    """Fraction of triplets where warping moved the decoded pose closer to
    the target pose than the unwarped source was. Samples on which the
    oracle fails are excluded and counted."""
    model = model_from_checkpoint(warp_ckpt) if isinstance(warp_ckpt, Checkpoint) else warp_ckpt
    if not test_triplets:
        raise InvalidInputError("no triplets to score")
    w_so = torch.stack([t.w_so for t in test_triplets])
    w_ta = torch.stack([t.w_ta for t in test_triplets])
    with torch.no_grad():
        w_wa = model.warp(w_ta, w_so)
        _, warped = model.bank(w_wa)
        _, source = model.bank(w_so)
    poses_wa = pose_oracle(warped)
    poses_so = pose_oracle(source)
    wins, scored, excluded = 0, 0, 0
    for t, p_wa, p_so in zip(test_triplets, poses_wa, poses_so):
        if p_wa is None or p_so is None:
            excluded += 1
            continue
        scored += 1
        if abs(p_wa - t.target_pose) < abs(p_so - t.target_pose):
            wins += 1
    if scored == 0:
        raise InvalidInputError("pose oracle failed on every triplet")
    return PoseTransferResult(fraction=wins / scored, n_scored=scored,
                              n_excluded=excluded)


# ------------------------------------------------------- background audit

def background_preservation_audit(edit_records) -> float:
    """Max absolute deviation outside the mask over a batch of edits.

    Each record is (base_image, mask, output); the compositing contract
    makes this exactly zero in tensor space, and at most one quantization
    level after a PNG round trip.
    """
    worst = None
    for base, mask, out in edit_records:
        dev = ((out - base) * (1.0 - mask)).abs().max().item()
        worst = dev if worst is None else max(worst, dev)
    if worst is None:
        raise InvalidInputError("no edit records to audit")
    return worst


# ---------------------------------------------------------- optional uids

def uids_score(real_set: torch.Tensor, fake_set: torch.Tensor,
               feature_extractor) -> float:
    """Unpaired separability score: misclassification rate of a linear SVM
    told to separate real from generated features. 0.5 means statistically
    indistinguishable; 0 means trivially separable. Off the default report
    because sklearn's solver is not bit-deterministic across platforms."""
    from sklearn.svm import LinearSVC

    f_real = extract_features(real_set, feature_extractor)
    f_fake = extract_features(fake_set, feature_extractor)
    x = np.concatenate([f_real, f_fake])
    y = np.concatenate([np.zeros(len(f_real)), np.ones(len(f_fake))])
    clf = LinearSVC(C=1.0, max_iter=5000).fit(x, y)
    return float((clf.predict(x) != y).mean())


# ------------------------------------------------------------ full report

def model_from_checkpoint(ckpt: Checkpoint) -> FacemugModel:
    model = FacemugModel(ckpt.config)
    restore_model(model, ckpt, restore_rng_state=False)
    model.eval()
    return model


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _eval_batch(corpus, indices) -> dict:
    items = [corpus[i] for i in indices]
    return {
        "image": torch.stack([it["image"] for it in items]),
        "semantic": torch.stack([it["semantic"] for it in items]),
    }


def evaluate_checkpoint(ckpt: Checkpoint, corpus, *, seed: int = 0,
                        n_eval: int = 64, n_pose: int = 64,
                        ckpt_hash: str = "", include_uids: bool = False,
                        id_embedder=None, batch_size: int = 16) -> dict:
    """Run the standard metric battery on held-back corpus samples.

    Reconstruction protocol: each eval face gets a random mask and is
    inpainted with itself as the exemplar and no other guidance, so the
    model's only job is to refill the hole consistently. Deterministic for
    a fixed (checkpoint, corpus, seed): sample order is fixed and every
    reduction runs in a single pass.
    """
    if len(corpus) < 2:
        raise InvalidInputError("need at least 2 eval samples")
    model = model_from_checkpoint(ckpt)
    gen = torch.Generator().manual_seed(seed)
    if id_embedder is None:
        id_embedder = train_identity_embedder(corpus)
    perceptual = load_perceptual()

    n_eval = min(n_eval, len(corpus))
    order = torch.randperm(len(corpus), generator=gen)[:n_eval].tolist()

    reals, outs, masks_all = [], [], []
    bg_worst = 0.0
    for start in range(0, n_eval, batch_size):
        batch = _eval_batch(corpus, order[start:start + batch_size])
        image, semantic = batch["image"], batch["semantic"]
        masks = []
        for i in range(image.shape[0]):
            kind = EVAL_MASK_KINDS[int(torch.randint(0, len(EVAL_MASK_KINDS), (1,), generator=gen))]
            masks.append(gen_mask(MaskSpec(kind=kind), semantic=semantic[i],
                                  rng=gen, resolution=image.shape[-1]))
        mask = torch.stack(masks)
        bundle = build_bundle(image=image, mask=mask, exemplar=image)
        with torch.no_grad():
            w_e = model.style_encoder(stack_modalities(image=image))
            w_p = model.style_encoder(bundle.stack())
            pyramid, _ = model.bank(w_p)
            out = model.edit_forward(bundle, w_e, bank_pyramid=pyramid)
        reals.append(image)
        outs.append(out)
        masks_all.append(mask)
        bg_worst = max(bg_worst, background_preservation_audit(
            zip(bundle.masked_image, mask, out)))

    real = torch.cat(reals)
    fake = torch.cat(outs)
    mask = torch.cat(masks_all)

    trips = build_pose_eval_triplets(real, model, gen, n_pose) if n_pose > 0 else []
    # an undertrained decoder can render nothing the pose oracle reads, at
    # construction or at scoring; null is more honest than a made-up fraction
    pose_acc, pose_scored, pose_excluded = None, 0, 0
    if trips:
        try:
            pose = pose_transfer_accuracy(model, trips)
            pose_acc, pose_scored, pose_excluded = (
                pose.fraction, pose.n_scored, pose.n_excluded)
        except InvalidInputError:
            pose_excluded = len(trips)

    report = {
        "proxy_fid": masked_region_fid(real, fake, mask, id_embedder.features),
        "proxy_lpips": proxy_lpips(real, fake, perceptual),
        "csim": csim(fake, real, id_embedder),
        "pose_acc": pose_acc,
        "pose_scored": pose_scored,
        "pose_excluded": pose_excluded,
        "bg_max_dev": bg_worst,
        "n": n_eval,
        "seed": seed,
        "ckpt_hash": ckpt_hash,
    }
    if include_uids:
        report["uids"] = uids_score(real, fake, id_embedder.features)
    return report
