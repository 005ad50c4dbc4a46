"""Semantic edits in the style space: named attribute directions with a
JSON registry, direction mining by logistic regression, and text-driven
latent optimization with a directional embedding loss.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (DegenerateDirectionError, InvalidInputError,
                     MissingDirectionError, ShapeError)

W_COLS = 512


@dataclass
class AttributeDirection:
    name: str
    direction: torch.Tensor  # (t, 512), unit Frobenius norm
    default_epsilon: float = 1.0

    def __post_init__(self):
        if self.direction.dim() != 2 or self.direction.shape[-1] != W_COLS:
            raise ShapeError(
                f"direction must be (t,{W_COLS}), got {tuple(self.direction.shape)}")
        norm = self.direction.norm()
        if norm < 1e-8:
            raise DegenerateDirectionError(f"direction {self.name!r} is zero")
        # normalize only when needed so save/load round-trips bitwise
        if abs(float(norm) - 1.0) > 1e-6:
            self.direction = self.direction / norm


@dataclass
class TextDirective:
    t_tar: str
    t_src: str = "face"
    lambda_clip: float = 0.05
    lambda_reg: float = 0.08
    iterations: int = 100
    learning_rate: float = 0.1

    def __post_init__(self):
        if not 0.01 <= self.lambda_clip <= 1.0:
            raise InvalidInputError(
                f"lambda_clip must be in [0.01, 1.0], got {self.lambda_clip}")
        if not 1 <= self.iterations <= 1000:
            raise InvalidInputError(
                f"iterations must be in [1, 1000], got {self.iterations}")
        if not self.t_tar.strip():
            raise InvalidInputError("empty target text")


def apply_attribute_direction(w_hat: torch.Tensor, d: AttributeDirection,
                              epsilon: float) -> torch.Tensor:
    """w* = w_hat + epsilon * direction (broadcast over the batch)."""
    if w_hat.shape[-2:] != d.direction.shape:
        raise ShapeError(
            f"stack {tuple(w_hat.shape)} does not match direction "
            f"{tuple(d.direction.shape)}")
    return w_hat + epsilon * d.direction.to(w_hat.dtype)


class DirectionRegistry:
    """Named attribute directions. Mutations replace the underlying dict so
    concurrent readers always see a consistent snapshot."""

    def __init__(self, directions: dict = None):
        self._directions = dict(directions or {})

    def add(self, d: AttributeDirection) -> None:
        self._directions = {**self._directions, d.name: d}

    def remove(self, name: str) -> None:
        if name not in self._directions:
            raise MissingDirectionError(f"unknown direction {name!r}")
        self._directions = {k: v for k, v in self._directions.items()
                            if k != name}

    def get(self, name: str) -> AttributeDirection:
        try:
            return self._directions[name]
        except KeyError:
            raise MissingDirectionError(f"unknown direction {name!r}") from None

    def names(self) -> list:
        return sorted(self._directions)

    def __len__(self):
        return len(self._directions)

    def __contains__(self, name):
        return name in self._directions

    def save(self, path: str) -> None:
        payload = {
            name: {"epsilon": d.default_epsilon,
                   "direction": d.direction.flatten().tolist()}
            for name, d in self._directions.items()}
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "DirectionRegistry":
        with open(path) as fh:
            payload = json.load(fh)
        reg = cls()
        for name, entry in payload.items():
            flat = torch.tensor(entry["direction"], dtype=torch.float32)
            if flat.numel() % W_COLS:
                raise InvalidInputError(
                    f"direction {name!r} has {flat.numel()} values, "
                    f"not a multiple of {W_COLS}")
            reg.add(AttributeDirection(name, flat.view(-1, W_COLS),
                                       float(entry["epsilon"])))
        return reg


def mine_directions(w_samples: torch.Tensor, render, oracles: dict,
                    epsilon_scale: float = 1.0) -> DirectionRegistry:
    """Fit one direction per oracle: render each w, read the scalar
    attribute, and take the normal vector of a logistic regression that
    separates above-median from below-median samples. default_epsilon is
    the projection spread times epsilon_scale."""
    from sklearn.linear_model import LogisticRegression

    n, t, _ = w_samples.shape
    with torch.no_grad():
        values = {name: [] for name in oracles}
        for i in range(n):
            img = render(w_samples[i: i + 1])
            for name, fn in oracles.items():
                values[name].append(float(fn(img)))
    x = w_samples.reshape(n, -1).numpy().astype(np.float64)
    reg = DirectionRegistry()
    for name, vals in values.items():
        v = np.asarray(vals)
        labels = v > np.median(v)
        if labels.all() or not labels.any():
            raise DegenerateDirectionError(
                f"oracle {name!r} is constant over the samples")
        clf = LogisticRegression(max_iter=2000).fit(x, labels)
        normal = torch.tensor(clf.coef_[0], dtype=torch.float32).view(t, W_COLS)
        normal = normal / normal.norm()
        proj = (w_samples.reshape(n, -1) @ normal.flatten()).numpy()
        eps = float(np.std(proj)) * epsilon_scale
        reg.add(AttributeDirection(name, normal, default_epsilon=eps or 1.0))
    return reg


def directional_embed_loss(t_tar: str, t_src: str, w: torch.Tensor,
                           w_hat: torch.Tensor, embedder,
                           render) -> torch.Tensor:
    """1 - cos(dT, dI): dT is the text-embedding shift from source to
    target, dI the image-embedding shift the latent move produced."""
    # the text direction is a constant of the objective, never a grad path
    with torch.no_grad():
        d_text = embedder.embed_text(t_tar) - embedder.embed_text(t_src)
    if d_text.norm() < 1e-8:
        raise DegenerateDirectionError(
            f"text pair {t_tar!r} / {t_src!r} has no embedding direction")
    d_img = embedder.embed_image(render(w)) - embedder.embed_image(render(w_hat))
    d_img = d_img.flatten()
    if d_img.norm() < 1e-8:
        raise DegenerateDirectionError("latent move produced no image change")
    cos = (d_text @ d_img) / (d_text.norm() * d_img.norm())
    return 1 - cos


@dataclass
class TextEditResult:
    w: torch.Tensor
    trajectory: list = field(default_factory=list)
    aborted: bool = False


def optimize_text_edit(w_hat: torch.Tensor, directive: TextDirective,
                       embedder, render) -> TextEditResult:
    """Gradient descent on lambda_clip * L_dir + lambda_reg * ||w - w_hat||
    starting at w = w_hat. The norm is smoothed so the start point is not
    singular; while the image has not visibly moved the directional term is
    replaced by a linear alignment bootstrap with the same descent
    direction. Aborts on non-finite loss, returning the best iterate."""
    # constant text direction: keeping its graph alive would make every
    # iteration after the first re-backward through freed buffers
    with torch.no_grad():
        d_text = (embedder.embed_text(directive.t_tar)
                  - embedder.embed_text(directive.t_src))
    if d_text.norm() < 1e-8:
        raise DegenerateDirectionError(
            f"text pair {directive.t_tar!r} / {directive.t_src!r} "
            "has no embedding direction")
    d_text = d_text / d_text.norm()

    base = w_hat.detach()
    with torch.no_grad():
        e_base = embedder.embed_image(render(base)).flatten().detach()
    w = base.clone().requires_grad_(True)
    opt = torch.optim.SGD([w], lr=directive.learning_rate)

    best_w, best_loss = base.clone(), float("inf")
    trajectory = []
    aborted = False
    for _ in range(directive.iterations):
        opt.zero_grad()
        d_img = embedder.embed_image(render(w)).flatten() - e_base
        scale = d_img.norm()
        if scale < 1e-3:
            l_dir = 1 - d_text @ d_img  # bootstrap: same gradient direction
        else:
            l_dir = 1 - (d_text @ d_img) / scale
        l_reg = torch.sqrt((w - base).pow(2).sum() + 1e-16)
        loss = directive.lambda_clip * l_dir + directive.lambda_reg * l_reg
        value = float(loss.detach())
        if not math.isfinite(value):
            aborted = True
            break
        trajectory.append(value)
        if value < best_loss:
            best_loss, best_w = value, w.detach().clone()
        loss.backward()
        opt.step()
    return TextEditResult(best_w, trajectory, aborted)
