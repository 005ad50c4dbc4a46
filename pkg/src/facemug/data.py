"""Synthetic-face corpus with analytic ground truth, modality derivation
(sketch, color map, semantic map, masks), augmentation, and folder
ingestion.

The renderer draws parametric faces (ellipse head, eyes, nose, mouth, hair,
optional glasses) at 4x supersampling and box-downsamples. Yaw moves all
internal features horizontally by dx = 0.18*sin(yaw) in [-1,1] canvas
coordinates, so pose is analytically recoverable from the eye positions:
both from landmarks (exact) and from the dark-pixel centroid of the eye
band (robust to generator blur).
"""

import colorsys
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import ENCODER_IN_CH, SEMANTIC_CH, cache_dir
from .errors import InvalidInputError, InvalidMaskError

log = logging.getLogger(__name__)

# CelebAMask-HQ label order; the synthetic renderer populates a 9-label subset
SEMANTIC_LABELS = [
    "background", "skin", "l_brow", "r_brow", "l_eye", "r_eye", "eye_g",
    "l_ear", "r_ear", "ear_r", "nose", "mouth", "u_lip", "l_lip", "neck",
    "neck_l", "cloth", "hair", "hat",
]
L_BG, L_SKIN, L_LEYE, L_REYE, L_GLASS, L_NOSE, L_MOUTH, L_NECK, L_HAIR = \
    0, 1, 4, 5, 6, 10, 11, 14, 17

SEMANTIC_PALETTE = [
    (0, 0, 0), (204, 0, 0), (76, 153, 0), (204, 204, 0), (51, 51, 255),
    (204, 0, 204), (0, 255, 255), (255, 204, 204), (102, 51, 0), (255, 0, 0),
    (102, 204, 0), (255, 255, 0), (0, 0, 153), (0, 0, 204), (255, 51, 153),
    (0, 204, 204), (0, 51, 0), (255, 153, 51), (0, 204, 0),
]

# horizontal feature shift at yaw 90 deg, in [-1,1] canvas units
POSE_SHIFT = 0.18
# eye band for the image pose oracle: rows and columns in canvas units
EYE_BAND_Y = (-0.30, -0.02)
EYE_BAND_X = 0.44
DARK_LUM = 0.35


@dataclass
class SynthFaceSpec:
    yaw: float  # degrees in [-45, 45]
    identity: list  # 8 reals in [0,1]
    identity_id: int
    skin: list  # RGB in [0,1]
    hair: list
    eye: list
    glasses: bool
    smile: bool
    long_hair: bool
    seed: int

    def __post_init__(self):
        if not -45.0 <= self.yaw <= 45.0:
            raise InvalidInputError(f"yaw must be in [-45,45] deg, got {self.yaw}")
        if len(self.identity) != 8:
            raise InvalidInputError("identity must have 8 parameters")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _identity_palette(rng: np.random.Generator):
    skin = np.array([0.87, 0.72, 0.62]) + (rng.random(3) - 0.5) * [0.08, 0.06, 0.05]
    hair = colorsys.hsv_to_rgb(rng.random(), 0.40, 0.70)
    eye = np.array([0.06, 0.06, 0.09]) + rng.random(3) * 0.02
    return list(np.round(skin, 4)), list(np.round(hair, 4)), list(np.round(eye, 4))


def random_face_specs(n: int, n_identities: int, seed: int) -> list:
    """n specs over n_identities base identities; shape/palette fixed per
    identity, pose and flags vary per face."""
    identities = []
    for k in range(n_identities):
        rng = np.random.default_rng((seed, k))
        params = list(np.round(rng.random(8), 4))
        skin, hair, eye = _identity_palette(rng)
        identities.append((params, skin, hair, eye, bool(rng.random() < 0.3)))
    specs = []
    rng = np.random.default_rng((seed, n_identities + 1))
    for i in range(n):
        k = int(rng.integers(n_identities))
        params, skin, hair, eye, glasses = identities[k]
        specs.append(SynthFaceSpec(
            yaw=float(np.round(rng.uniform(-45, 45), 3)),
            identity=params, identity_id=k,
            skin=skin, hair=list(np.round(hair, 4)), eye=eye,
            glasses=glasses,
            smile=bool(rng.random() < 0.5),
            long_hair=bool(rng.random() < 0.5),
            seed=int(rng.integers(2 ** 31)),
        ))
    return specs


def _ellipse(x, y, cx, cy, ax, ay):
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0


def synth_face(spec: SynthFaceSpec, resolution: int = 64):
    """Render one face. Returns (image (3,r,r) in [-1,1], semantic one-hot
    (19,r,r), landmarks dict in pixel coords, yaw degrees)."""
    ss = 4
    S = resolution * ss
    coords = (np.arange(S) + 0.5) / S * 2.0 - 1.0
    x, y = np.meshgrid(coords, coords)  # y grows downward

    p = spec.identity
    ax_ = 0.44 + 0.11 * p[0]
    ay_ = 0.58 + 0.10 * p[1]
    eye_sep = 0.14 + 0.03 * p[2]
    eye_r = 0.060 + 0.015 * p[3]
    nose_s = 0.040 + 0.020 * p[4]
    mouth_w = 0.10 + 0.05 * p[5]
    eye_y = -0.16
    nose_y = 0.08
    mouth_y = 0.32
    dx = POSE_SHIFT * math.sin(math.radians(spec.yaw))

    skin = np.array(spec.skin)
    hair = np.array(spec.hair)
    eye = np.array(spec.eye)
    bg = np.array([0.82, 0.84, 0.88])

    label = np.zeros((S, S), dtype=np.uint8)  # background
    img = np.empty((S, S, 3))
    img[:] = bg

    def paint(mask, lab, color):
        label[mask] = lab
        img[mask] = color

    paint(_ellipse(x, y, 0.0, -0.05, ax_ + 0.10, ay_ + 0.08), L_HAIR, hair)
    if spec.long_hair:
        paint(_ellipse(x, y, 0.0, 0.35, ax_ + 0.06, 0.45), L_HAIR, hair)
    neck = (np.abs(x) <= 0.16) & (y >= 0.45) & (y <= 0.95)
    paint(neck, L_NECK, skin * 0.92)
    paint(_ellipse(x, y, 0.0, 0.0, ax_, ay_), L_SKIN, skin)

    for side, lab in ((-1, L_LEYE), (1, L_REYE)):
        ex = side * eye_sep + dx
        paint(_ellipse(x, y, ex, eye_y, eye_r, eye_r * 0.6), lab, eye)
    if spec.glasses:
        gcol = np.array([0.12, 0.12, 0.13])
        ro, ri = eye_r * 1.35, eye_r * 1.35 - 0.020
        for side in (-1, 1):
            ex = side * eye_sep + dx
            ring = _ellipse(x, y, ex, eye_y, ro, ro) & ~_ellipse(x, y, ex, eye_y, ri, ri)
            paint(ring, L_GLASS, gcol)
        bridge = (np.abs(y - eye_y) <= 0.008) & (np.abs(x - dx) <= eye_sep)
        bridge &= ~_ellipse(x, y, -eye_sep + dx, eye_y, ri, ri)
        bridge &= ~_ellipse(x, y, eye_sep + dx, eye_y, ri, ri)
        paint(bridge, L_GLASS, gcol)

    paint(_ellipse(x, y, dx, nose_y, nose_s, nose_s * 1.4), L_NOSE, skin * 0.88)

    mcol = np.array([0.72, 0.30, 0.32])
    if spec.smile:
        big = _ellipse(x, y, dx, mouth_y, mouth_w * 1.25, mouth_w * 0.55)
        cut = _ellipse(x, y, dx, mouth_y - mouth_w * 0.45, mouth_w * 1.25, mouth_w * 0.55)
        paint(big & ~cut, L_MOUTH, mcol)
    else:
        paint(_ellipse(x, y, dx, mouth_y, mouth_w, mouth_w * 0.38), L_MOUTH, mcol)

    # box-filter downsample for the image, majority vote for labels
    r = resolution
    img_small = img.reshape(r, ss, r, ss, 3).mean(axis=(1, 3))
    blocks = label.reshape(r, ss, r, ss).transpose(0, 2, 1, 3).reshape(r, r, ss * ss)
    onehot = blocks[..., None] == np.arange(SEMANTIC_CH, dtype=np.uint8)
    label_small = onehot.sum(axis=2).argmax(axis=-1).astype(np.uint8)

    image_t = torch.from_numpy((img_small * 2.0 - 1.0).transpose(2, 0, 1)).float()
    sem_t = F.one_hot(torch.from_numpy(label_small).long(), SEMANTIC_CH)
    sem_t = sem_t.permute(2, 0, 1).float()

    def px(cx, cy):
        return ((cx + 1.0) / 2.0 * resolution, (cy + 1.0) / 2.0 * resolution)

    landmarks = {
        "face_center": px(0.0, 0.0),
        "l_eye": px(-eye_sep + dx, eye_y),
        "r_eye": px(eye_sep + dx, eye_y),
        "nose": px(dx, nose_y),
        "mouth": px(dx, mouth_y),
    }
    return image_t, sem_t, landmarks, spec.yaw


def yaw_from_landmarks(landmarks: dict, resolution: int) -> float:
    """Exact analytic inverse of the renderer's pose shift."""
    cx = landmarks["face_center"][0]
    ex = 0.5 * (landmarks["l_eye"][0] + landmarks["r_eye"][0])
    dx = (ex - cx) / (resolution / 2.0)
    return math.degrees(math.asin(max(-1.0, min(1.0, dx / POSE_SHIFT))))


def luminance01(image: torch.Tensor) -> torch.Tensor:
    """Per-pixel luminance in [0,1] from a [-1,1] RGB tensor."""
    x = (image + 1.0) / 2.0
    r, g, b = x.unbind(-3)
    return 0.299 * r + 0.587 * g + 0.114 * b


def pose_from_image(image: torch.Tensor):
    """Yaw estimate in degrees from the dark-pixel centroid of the eye
    band; None if no dark pixels found (oracle failure). Works on renderer
    output and on blurry generator output alike."""
    if image.dim() == 4:
        return [pose_from_image(im) for im in image]
    _, h, w = image.shape
    lum = luminance01(image)
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) / h * 2 - 1
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) / w * 2 - 1
    row_ok = (ys >= EYE_BAND_Y[0]) & (ys <= EYE_BAND_Y[1])
    col_ok = xs.abs() <= EYE_BAND_X
    band = lum[row_ok][:, col_ok]
    # darkness-weighted column mass: sub-pixel accurate and invariant under
    # symmetric blur, which a binary threshold centroid is not
    weight = (DARK_LUM - band).clamp(min=0.0)
    if weight.sum().item() < 1e-4 or (band < DARK_LUM).sum() < 3:
        return None
    cols = xs[col_ok]
    mass = weight.sum(dim=0)

    def centroid(sel):
        return (mass[sel] * cols[sel]).sum().item() / mass[sel].sum().item()

    # the two eyes raster with different sub-pixel phase, so their masses
    # differ; averaging per-eye centroids cancels that, the global centroid
    # does not. Split at the widest empty gap between massive columns.
    hot = (mass > mass.max() * 0.05).nonzero().flatten()
    lo, hi = hot[0].item(), hot[-1].item()
    gap_len, gap_mid, run = 0, None, 0
    for j in range(lo, hi + 1):
        if mass[j] <= mass.max() * 0.05:
            run += 1
            if run > gap_len:
                gap_len, gap_mid = run, j - run // 2
        else:
            run = 0
    if gap_len >= 2 and gap_mid is not None:
        left, right = torch.arange(len(cols)) < gap_mid, torch.arange(len(cols)) >= gap_mid
        left &= mass > 0
        right &= mass > 0
        if left.any() and right.any():
            cx = 0.5 * (centroid(left) + centroid(right))
        else:
            cx = centroid(mass > 0)
    else:
        cx = centroid(mass > 0)
    return math.degrees(math.asin(max(-1.0, min(1.0, cx / POSE_SHIFT))))


# ---------------------------------------------------------------- sketches

def _gaussian_blur(gray: torch.Tensor, sigma: float) -> torch.Tensor:
    k = int(2 * math.ceil(3 * sigma) + 1)
    t = torch.arange(k, dtype=torch.float32) - k // 2
    g = torch.exp(-t ** 2 / (2 * sigma ** 2))
    g = (g / g.sum()).to(gray.dtype)
    x = gray.unsqueeze(0).unsqueeze(0)
    x = F.pad(x, (k // 2, k // 2, 0, 0), mode="replicate")
    x = F.conv2d(x, g.view(1, 1, 1, k))
    x = F.pad(x, (0, 0, k // 2, k // 2), mode="replicate")
    x = F.conv2d(x, g.view(1, 1, k, 1))
    return x[0, 0]


def derive_sketch(image: torch.Tensor, variant: str = "pencil") -> torch.Tensor:
    """1-channel sketch in [0,1]; 0 on flat regions, high on edges."""
    if image.dim() == 4:
        return torch.stack([derive_sketch(im, variant) for im in image])
    gray = luminance01(image)
    if variant == "pencil":
        # dodge blend of gray against its blur (1 - blur(1-gray) = blur(gray)
        # up to kernel normalization, and exact at black)
        blur = _gaussian_blur(gray, sigma=2.0)
        dodge = torch.clamp((gray + 1e-4) / (blur + 1e-4), max=1.0)
        out = (1.0 - dodge).clamp(0.0, 1.0)
        # kernel normalization leaves ~1e-7 residue on constant inputs;
        # snap it so flat regions are exactly zero
        out[out < 1e-5] = 0.0
        return out.unsqueeze(0)
    if variant == "canny":
        return _canny(gray).unsqueeze(0)
    raise InvalidInputError(f"unknown sketch variant {variant!r}")


def _canny(gray: torch.Tensor, lo: float = 0.08, hi: float = 0.20) -> torch.Tensor:
    from scipy import ndimage

    g = gray.numpy().astype(np.float64)
    g = ndimage.gaussian_filter(g, 1.0)
    gx = ndimage.sobel(g, axis=1)
    gy = ndimage.sobel(g, axis=0)
    mag = np.hypot(gx, gy)
    if mag.max() > 0:
        mag = mag / mag.max()
    ang = np.rad2deg(np.arctan2(gy, gx)) % 180.0

    # non-maximum suppression along the quantized gradient direction
    nms = np.zeros_like(mag)
    h, w = mag.shape
    padded = np.pad(mag, 1)
    for (a0, a1), (di, dj) in (((0, 22.5), (0, 1)), ((157.5, 180.1), (0, 1)),
                               ((22.5, 67.5), (1, 1)), ((67.5, 112.5), (1, 0)),
                               ((112.5, 157.5), (1, -1))):
        sel = (ang >= a0) & (ang < a1)
        n1 = padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
        n2 = padded[1 - di:1 - di + h, 1 - dj:1 - dj + w]
        keep = sel & (mag >= n1) & (mag >= n2)
        nms[keep] = mag[keep]

    strong = nms >= hi
    weak = nms >= lo
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    keep_ids = np.unique(labels[strong])
    out = np.isin(labels, keep_ids[keep_ids > 0]) & weak
    return torch.from_numpy(out.astype(np.float32))


# ---------------------------------------------------------------- color map

def derive_color(image: torch.Tensor, semantic: torch.Tensor) -> torch.Tensor:
    """Every pixel replaced by the mean color of its semantic region."""
    if image.dim() == 4:
        return torch.stack([derive_color(i, s) for i, s in zip(image, semantic)])
    labels = semantic.argmax(dim=0)  # (H,W)
    out = torch.zeros_like(image)
    for lab in labels.unique():
        region = labels == lab
        mean = image[:, region].mean(dim=1)
        out[:, region] = mean.unsqueeze(1)
    return out


# ---------------------------------------------------------------- masks

@dataclass
class MaskSpec:
    kind: str  # hair | face | foreground | irregular | center
    ratio_min: float = 0.50
    ratio_max: float = 0.60

    VALID = ("hair", "face", "foreground", "irregular", "center")

    def __post_init__(self):
        if self.kind not in self.VALID:
            raise InvalidMaskError(f"unknown mask kind {self.kind!r}")


FACE_LABELS = (L_SKIN, L_LEYE, L_REYE, L_GLASS, L_NOSE, L_MOUTH)


def _irregular_mask(resolution: int, rng: torch.Generator,
                    ratio_min: float, ratio_max: float) -> torch.Tensor:
    """Random walk strokes + occasional rectangles until a sampled target
    ratio is reached; resample up to 50 times if outside [min-0.02, max+0.02],
    then clamp by paint order."""
    r = resolution
    yy, xx = torch.meshgrid(torch.arange(r, dtype=torch.float32),
                            torch.arange(r, dtype=torch.float32), indexing="ij")
    lo, hi = ratio_min - 0.02, ratio_max + 0.02

    def attempt():
        order = torch.full((r, r), torch.inf)
        target = ratio_min + (ratio_max - ratio_min) * torch.rand(1, generator=rng).item()
        step = 0
        px = r * r
        while (order.isfinite().sum().item() / px) < target and step < 400:
            if torch.rand(1, generator=rng).item() < 0.2:
                w = int(torch.randint(r // 8, r // 4 + 1, (1,), generator=rng))
                h = int(torch.randint(r // 8, r // 4 + 1, (1,), generator=rng))
                x0 = int(torch.randint(0, r - w, (1,), generator=rng))
                y0 = int(torch.randint(0, r - h, (1,), generator=rng))
                region = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
                order[region & ~order.isfinite()] = step
                step += 1
            else:
                cx = torch.rand(1, generator=rng).item() * r
                cy = torch.rand(1, generator=rng).item() * r
                theta = torch.rand(1, generator=rng).item() * 2 * math.pi
                rad = r / 16 + torch.rand(1, generator=rng).item() * r / 16
                n = int(torch.randint(8, 24, (1,), generator=rng))
                for _ in range(n):
                    disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= rad ** 2
                    order[disc & ~order.isfinite()] = step
                    step += 1
                    theta += (torch.rand(1, generator=rng).item() - 0.5) * 1.2
                    cx = min(max(cx + math.cos(theta) * rad, 0.0), r - 1.0)
                    cy = min(max(cy + math.sin(theta) * rad, 0.0), r - 1.0)
                    if (order.isfinite().sum().item() / px) >= target:
                        break
        return order

    for _ in range(50):
        order = attempt()
        ratio = order.isfinite().sum().item() / (r * r)
        if lo <= ratio <= hi:
            return order.isfinite().float().unsqueeze(0)
    # clamp: keep earliest-painted pixels up to the upper ratio bound
    flat = order.flatten()
    k = int(ratio_max * r * r)
    idx = torch.argsort(flat)[:k]
    mask = torch.zeros(r * r)
    mask[idx[flat[idx].isfinite()]] = 1.0
    return mask.view(1, r, r)


def gen_mask(spec: MaskSpec, semantic: torch.Tensor = None,
             rng: torch.Generator = None, resolution: int = None) -> torch.Tensor:
    """Binary (1,H,W) mask of the requested kind."""
    if spec.kind in ("hair", "face", "foreground"):
        if semantic is None:
            raise InvalidMaskError(f"{spec.kind} mask needs a semantic map")
        labels = semantic.argmax(dim=0)
        if spec.kind == "hair":
            m = labels == L_HAIR
        elif spec.kind == "face":
            m = torch.zeros_like(labels, dtype=torch.bool)
            for lab in FACE_LABELS:
                m |= labels == lab
        else:
            m = labels != L_BG
        return m.float().unsqueeze(0)
    if resolution is None:
        resolution = semantic.shape[-1] if semantic is not None else 64
    if spec.kind == "center":
        m = torch.zeros(1, resolution, resolution)
        q = resolution // 4
        m[:, q:q + resolution // 2, q:q + resolution // 2] = 1.0
        return m
    if rng is None:
        raise InvalidMaskError("irregular mask needs an rng")
    return _irregular_mask(resolution, rng, spec.ratio_min, spec.ratio_max)


def check_mask(mask: torch.Tensor, resolution: int) -> torch.Tensor:
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    if mask.shape[-3:] != (1, resolution, resolution):
        raise InvalidMaskError(
            f"mask must be (1,{resolution},{resolution}), got {tuple(mask.shape)}")
    uniq = mask.unique()
    if not bool(((uniq == 0) | (uniq == 1)).all()):
        raise InvalidMaskError("mask must be binary 0/1")
    if mask.sum() == 0:
        raise InvalidMaskError("mask is empty")
    return mask


# ---------------------------------------------------------------- augment

def mirror_flip(image: torch.Tensor) -> torch.Tensor:
    return torch.flip(image, dims=[-1])


def augment_image(image: torch.Tensor, rng: torch.Generator, *,
                  scale_range=(0.8, 1.2), jitter=0.2, mask_frac=0.25) -> torch.Tensor:
    """Bilinear scaling + color jitter + region masking, per sample. Each
    op is skipped exactly when its magnitude is zero, so zero magnitudes
    give the identity bitwise."""
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    b = x.shape[0]

    if scale_range != (1.0, 1.0):
        s = scale_range[0] + (scale_range[1] - scale_range[0]) * torch.rand(b, generator=rng)
        theta = torch.zeros(b, 2, 3)
        theta[:, 0, 0] = 1.0 / s
        theta[:, 1, 1] = 1.0 / s
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border",
                          align_corners=False)

    if jitter > 0:
        bright = (torch.rand(b, 1, 1, 1, generator=rng) * 2 - 1) * jitter
        contrast = 1.0 + (torch.rand(b, 1, 1, 1, generator=rng) * 2 - 1) * jitter
        chan = 1.0 + (torch.rand(b, 3, 1, 1, generator=rng) * 2 - 1) * jitter
        mean = x.mean(dim=(2, 3), keepdim=True)
        x = ((x - mean) * contrast + mean) * chan + bright
        x = x.clamp(-1.0, 1.0)

    if mask_frac > 0:
        res = x.shape[-1]
        x = x.clone()
        for i in range(b):
            frac = torch.rand(1, generator=rng).item() * mask_frac
            ar = 0.5 + torch.rand(1, generator=rng).item() * 1.5
            w = int(res * math.sqrt(frac * ar))
            h = int(res * math.sqrt(frac / ar)) if ar > 0 else 0
            w, h = min(w, res), min(h, res)
            if w > 0 and h > 0:
                x0 = int(torch.randint(0, res - w + 1, (1,), generator=rng))
                y0 = int(torch.randint(0, res - h + 1, (1,), generator=rng))
                x[i, :, y0:y0 + h, x0:x0 + w] = 0.0

    return x.squeeze(0) if single else x


# ---------------------------------------------------------------- stacking

def stack_modalities(image=None, sketch=None, color=None, semantic=None,
                     batch: int = None, resolution: int = None) -> torch.Tensor:
    """Assemble the 26-channel encoder input
    [3 image | 1 sketch | 3 color | 19 semantic], zero-filling absences.
    The mask is not a channel; apply it to each modality beforehand."""
    parts = [p for p in (image, sketch, color, semantic) if p is not None]
    if not parts:
        raise InvalidInputError("at least one modality required")
    ref = parts[0]
    single = ref.dim() == 3
    if batch is None:
        batch = 1 if single else ref.shape[0]
    if resolution is None:
        resolution = ref.shape[-1]

    def norm(p, ch):
        if p is None:
            return torch.zeros(batch, ch, resolution, resolution)
        if p.dim() == 3:
            p = p.unsqueeze(0)
        if p.shape[1] != ch or p.shape[-1] != resolution:
            raise InvalidInputError(
                f"modality with {p.shape[1]} channels at {p.shape[-1]}px does "
                f"not fit slot of {ch} channels at {resolution}px")
        return p.expand(batch, ch, resolution, resolution)

    out = torch.cat([norm(image, 3), norm(sketch, 1), norm(color, 3),
                     norm(semantic, SEMANTIC_CH)], dim=1)
    assert out.shape[1] == ENCODER_IN_CH
    return out.squeeze(0) if single else out


# ---------------------------------------------------------------- PNG I/O

def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = ((image.clamp(-1, 1) + 1.0) * 127.5).round().clamp(0, 255)
    return arr.to(torch.uint8).permute(1, 2, 0).numpy()


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(np.array(arr, copy=True)).float().permute(2, 0, 1)
    return t / 127.5 - 1.0


def image_to_png(image: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return buf.getvalue()


def png_to_image(blob: bytes, resolution: int = None) -> torch.Tensor:
    img = Image.open(io.BytesIO(blob)).convert("RGB")
    if resolution is not None and img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.BILINEAR)
    return from_uint8(np.asarray(img))


def save_image(image: torch.Tensor, path: str) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def load_image(path: str, resolution: int = None) -> torch.Tensor:
    with open(path, "rb") as fh:
        return png_to_image(fh.read(), resolution)


def save_mask(mask: torch.Tensor, path: str) -> None:
    arr = (mask[0] > 0.5).numpy()
    Image.fromarray(arr).save(path, bits=1)


def _mask_from_pil(img: Image.Image, resolution: int = None) -> torch.Tensor:
    img = img.convert("L")
    if resolution is not None and img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.NEAREST)
    arr = np.array(img, copy=True)
    return (torch.from_numpy(arr).float() > 127 * 0.5).float().unsqueeze(0)


def png_to_mask(blob: bytes, resolution: int = None) -> torch.Tensor:
    return _mask_from_pil(Image.open(io.BytesIO(blob)), resolution)


def load_mask(path: str, resolution: int = None) -> torch.Tensor:
    return _mask_from_pil(Image.open(path), resolution)


def save_semantic(semantic: torch.Tensor, path: str) -> None:
    labels = semantic.argmax(dim=0).to(torch.uint8).numpy()
    img = Image.fromarray(labels, mode="P")
    img.putpalette([c for rgb in SEMANTIC_PALETTE for c in rgb])
    img.save(path)


def _semantic_from_pil(img: Image.Image, resolution: int = None) -> torch.Tensor:
    if img.mode != "P":
        img = img.convert("P")
    if resolution is not None and img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.NEAREST)
    labels = torch.from_numpy(np.array(img, copy=True)).long().clamp(0, SEMANTIC_CH - 1)
    return F.one_hot(labels, SEMANTIC_CH).permute(2, 0, 1).float()


def png_to_semantic(blob: bytes, resolution: int = None) -> torch.Tensor:
    return _semantic_from_pil(Image.open(io.BytesIO(blob)), resolution)


def load_semantic(path: str, resolution: int = None) -> torch.Tensor:
    return _semantic_from_pil(Image.open(path), resolution)


# ---------------------------------------------------------------- datasets

class SynthCorpus:
    """Lazy-rendering synthetic dataset with an in-memory cache. Images and
    label maps are kept; one-hot semantics are expanded on access."""

    def __init__(self, specs: list, resolution: int = 64):
        self.specs = specs
        self.resolution = resolution
        self._cache = {}

    def __len__(self):
        return len(self.specs)

    def __getitem__(self, i: int) -> dict:
        if i not in self._cache:
            img, sem, lm, yaw = synth_face(self.specs[i], self.resolution)
            self._cache[i] = (img, sem.argmax(0).to(torch.uint8), lm, yaw)
        img, labels, lm, yaw = self._cache[i]
        sem = F.one_hot(labels.long(), SEMANTIC_CH).permute(2, 0, 1).float()
        return {"image": img, "semantic": sem, "landmarks": lm,
                "yaw": yaw, "identity": self.specs[i].identity_id}

    def split(self, eval_frac: float = 0.1):
        n_eval = max(1, int(len(self.specs) * eval_frac))
        return (SynthCorpus(self.specs[:-n_eval], self.resolution),
                SynthCorpus(self.specs[-n_eval:], self.resolution))


def make_corpus(n: int, n_identities: int, seed: int, resolution: int,
                out_dir: str = None) -> SynthCorpus:
    """Generate specs; if out_dir given, write manifest.jsonl and cache the
    rendered PNGs content-addressed under FACEMUG_CACHE."""
    specs = random_face_specs(n, n_identities, seed)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        png_dir = os.path.join(cache_dir(), "corpus")
        os.makedirs(png_dir, exist_ok=True)
        with open(os.path.join(out_dir, "manifest.jsonl"), "w") as fh:
            for spec in specs:
                fh.write(json.dumps(spec.to_dict(), sort_keys=True) + "\n")
                png = os.path.join(png_dir, f"{spec.digest()}_{resolution}.png")
                if not os.path.exists(png):
                    img, _, _, _ = synth_face(spec, resolution)
                    save_image(img, png)
    return SynthCorpus(specs, resolution)


def load_corpus(manifest_path: str, resolution: int) -> SynthCorpus:
    specs = []
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                specs.append(SynthFaceSpec.from_dict(json.loads(line)))
    if not specs:
        raise InvalidInputError(f"empty manifest {manifest_path}")
    return SynthCorpus(specs, resolution)


class FolderDataset:
    """Sorted PNG/JPEG folder, resized and normalized to [-1,1]."""

    EXT = (".png", ".jpg", ".jpeg")

    def __init__(self, path: str, resolution: int):
        self.resolution = resolution
        self.paths = []
        for name in sorted(os.listdir(path)):
            if not name.lower().endswith(self.EXT):
                continue
            full = os.path.join(path, name)
            try:
                with Image.open(full) as im:
                    im.verify()
            except Exception as exc:
                log.warning("skipping unreadable image %s: %s", full, exc)
                continue
            self.paths.append(full)
        if not self.paths:
            raise InvalidInputError(f"no readable images in {path}")

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i: int) -> dict:
        return {"image": load_image(self.paths[i], self.resolution)}
