"""Feature extractors backing the training losses and text-driven editing:
an identity embedder trained on the synthetic corpus, a frozen multi-scale
perceptual feature stack, and a joint image/text embedder. All are small,
CPU-friendly, deterministically initialized, and cached on disk so repeated
runs skip retraining.
"""

import hashlib
import os

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import cache_dir
from .errors import DegenerateEmbeddingError, ShapeError

EMBED_DIM = 64
TEXT_CHARS = "abcdefghijklmnopqrstuvwxyz -"


def _conv_stack(widths, in_ch=3):
    layers = []
    prev = in_ch
    for w in widths:
        layers.append(nn.Conv2d(prev, w, 3, stride=2, padding=1))
        layers.append(nn.LeakyReLU(0.2))
        prev = w
    return nn.Sequential(*layers)


def _check_image(x, name="image"):
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"{name} must be (B,3,H,W), got {tuple(x.shape)}")


class IdentityEmbedder(nn.Module):
    """Maps a face image to a unit-normalized identity vector. The cosine
    between two embeddings is only meaningful after a short classification
    fine-tune on the corpus identities."""

    def __init__(self, resolution: int = 64, n_classes: int = 64,
                 embed_dim: int = EMBED_DIM, width: int = 16):
        super().__init__()
        self.resolution = resolution
        n_down = min(4, resolution.bit_length() - 2)
        widths = [width * min(2 ** i, 4) for i in range(n_down)]
        self.convs = _conv_stack(widths)
        feat = resolution // 2 ** n_down
        self.head = nn.Linear(widths[-1] * feat * feat, embed_dim)
        self.classifier = nn.Linear(embed_dim, n_classes, bias=False)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        _check_image(x)
        if x.shape[-1] != self.resolution:
            x = F.interpolate(x, self.resolution, mode="bilinear",
                              align_corners=False)
        return self.head(self.convs(x).flatten(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.features(x)
        norms = f.norm(dim=1, keepdim=True)
        if (norms < 1e-8).any():
            raise DegenerateEmbeddingError("zero-norm identity embedding")
        return f / norms

    embed = forward

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Angular logits: cosine to normalized class centers, scaled.
        Training on these separates identities on the sphere, which is what
        the cosine identity loss measures."""
        f = self.features(x)
        f = f / f.norm(dim=1, keepdim=True).clamp(min=1e-8)
        w = F.normalize(self.classifier.weight, dim=1)
        return 10.0 * f @ w.t()


class PerceptualProxy(nn.Module):
    """Frozen random multi-scale conv features. Differences of these
    features behave like a perceptual distance on the synthetic corpus:
    deterministic, fixed seed, never trained."""

    WIDTHS = (8, 16, 24)

    def __init__(self, seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers, prev = [], 3
        for w in self.WIDTHS:
            conv = nn.Conv2d(prev, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g)
                                  * (prev * 9) ** -0.5)
                conv.bias.zero_()
            layers.append(conv)
            prev = w
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Stacked multi-scale features, flattened to (B, d). Each tap is
        scaled by 1/sqrt(numel) so no scale dominates the distance."""
        _check_image(x)
        taps = []
        h = x
        for conv in self.layers:
            h = F.leaky_relu(conv(h), 0.2)
            taps.append(h.flatten(1) / h[0].numel() ** 0.5)
        return torch.cat(taps, dim=1)


def text_to_bag(text: str) -> torch.Tensor:
    """Character-count vector over a small lowercase alphabet, scaled by
    text length. Unknown characters are ignored."""
    counts = torch.zeros(len(TEXT_CHARS))
    kept = 0
    for ch in text.lower():
        idx = TEXT_CHARS.find(ch)
        if idx >= 0:
            counts[idx] += 1
            kept += 1
    if kept:
        counts /= kept
    return counts


class ToyJointEmbedder(nn.Module):
    """Shared-space image and text encoders. The text head is a bag-of-
    characters MLP; the image head is a small conv pyramid. Aligned by a
    short cosine fit on (render, attribute phrase) pairs."""

    def __init__(self, resolution: int = 64, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.resolution = resolution
        self.embed_dim = embed_dim
        self.convs = _conv_stack([12, 24, 48, 48])
        feat = resolution // 2 ** 4
        self.image_head = nn.Linear(48 * feat * feat, embed_dim)
        self.text_mlp = nn.Sequential(
            nn.Linear(len(TEXT_CHARS), 64), nn.LeakyReLU(0.2),
            nn.Linear(64, embed_dim))

    def embed_image(self, x: torch.Tensor) -> torch.Tensor:
        _check_image(x)
        if x.shape[-1] != self.resolution:
            x = F.interpolate(x, self.resolution, mode="bilinear",
                              align_corners=False)
        f = self.image_head(self.convs(x).flatten(1))
        out = f / f.norm(dim=1, keepdim=True).clamp(min=1e-8)
        if not torch.isfinite(out).all():
            raise DegenerateEmbeddingError("non-finite image embedding")
        return out

    def embed_text(self, text: str) -> torch.Tensor:
        f = self.text_mlp(text_to_bag(text))
        out = f / f.norm().clamp(min=1e-8)
        if not torch.isfinite(out).all():
            raise DegenerateEmbeddingError("non-finite text embedding")
        return out


def _attribute_phrases(spec) -> list:
    phrases = ["face"]
    phrases.append("glasses" if spec.glasses else "no glasses")
    phrases.append("smile" if spec.smile else "neutral face")
    phrases.append("long hair" if spec.long_hair else "short hair")
    if spec.yaw < -10:
        phrases.append("looking left")
    elif spec.yaw > 10:
        phrases.append("looking right")
    else:
        phrases.append("frontal face")
    return phrases


def _corpus_key(corpus) -> str:
    h = hashlib.sha256()
    for s in corpus.specs:
        h.update(s.digest().encode())
    return h.hexdigest()[:12]


def _cached(name: str, key: str, build, cache: bool = True):
    path = os.path.join(cache_dir(), "embedders", f"{name}_{key}.pt")
    if cache and os.path.exists(path):
        state, net = torch.load(path, weights_only=True), build()
        net.load_state_dict(state)
        net.eval()
        return net
    net = build()
    if cache:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        torch.save(net.state_dict(), path)
    net.eval()
    return net


def train_identity_embedder(corpus, epochs: int = 1, batch_size: int = 16,
                            lr: float = 2e-3, seed: int = 100,
                            cache: bool = True) -> IdentityEmbedder:
    """Fit the identity head with cross-entropy over corpus identities for
    one epoch; enough for same-identity cosine to exceed cross-identity."""
    n_classes = max(item["identity"] for item in corpus) + 1
    key = f"{_corpus_key(corpus)}_{epochs}_{seed}_{n_classes}"

    def build():
        torch.manual_seed(seed)
        net = IdentityEmbedder(corpus.resolution, n_classes)
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        order = torch.randperm(len(corpus),
                               generator=torch.Generator().manual_seed(seed))
        for _ in range(epochs):
            for start in range(0, len(corpus), batch_size):
                idx = order[start:start + batch_size].tolist()
                imgs = torch.stack([corpus[i]["image"] for i in idx])
                labels = torch.tensor([corpus[i]["identity"] for i in idx])
                opt.zero_grad()
                F.cross_entropy(net.logits(imgs), labels).backward()
                opt.step()
        return net

    return _cached("identity", key, build, cache)


def train_joint_embedder(corpus, steps: int = 400, batch_size: int = 16,
                         lr: float = 3e-3, seed: int = 200,
                         cache: bool = True) -> ToyJointEmbedder:
    """Align image and text heads by maximizing cosine between each render
    and its attribute phrases (negatives: the other phrases in the batch)."""
    key = f"{_corpus_key(corpus)}_{steps}_{seed}"

    def build():
        torch.manual_seed(seed)
        net = ToyJointEmbedder(corpus.resolution)
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        g = torch.Generator().manual_seed(seed)
        phrases = sorted({p for s in corpus.specs for p in _attribute_phrases(s)})
        text_mat = lambda: torch.stack([net.embed_text(p) for p in phrases])
        targets = []
        for s in corpus.specs:
            mine = set(_attribute_phrases(s))
            targets.append(torch.tensor(
                [1.0 if p in mine else 0.0 for p in phrases]))
        targets = torch.stack(targets)
        for _ in range(steps):
            idx = torch.randint(len(corpus), (batch_size,), generator=g).tolist()
            imgs = torch.stack([corpus[i]["image"] for i in idx])
            want = targets[idx]
            sim = net.embed_image(imgs) @ text_mat().t()
            opt.zero_grad()
            # pull matching phrases to cos ~0.9, push others to ~-0.1
            (sim - (want * 1.0 - 0.1)).pow(2).mean().backward()
            opt.step()
        return net

    return _cached("joint", key, build, cache)


def load_perceptual(seed: int = 1234) -> PerceptualProxy:
    return PerceptualProxy(seed).eval()
