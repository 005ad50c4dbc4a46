"""Attribute-direction algebra, the direction registry, directional text
loss closed forms, and text-optimization behavior."""

import math
import os

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from facemug.editing import (AttributeDirection, DirectionRegistry,
                             TextDirective, TextEditResult,
                             apply_attribute_direction,
                             directional_embed_loss, mine_directions,
                             optimize_text_edit)
from facemug.errors import (DegenerateDirectionError, InvalidInputError,
                            MissingDirectionError, ShapeError)


def unit_direction(t=10, seed=0, name="d"):
    g = torch.Generator().manual_seed(seed)
    return AttributeDirection(name, torch.randn(t, 512, generator=g))


class TestApplyDirection:
    def test_zero_epsilon_is_identity(self):
        w = torch.randn(2, 10, 512)
        d = unit_direction()
        assert torch.equal(apply_attribute_direction(w, d, 0.0), w)

    def test_apply_then_invert(self):
        w = torch.randn(1, 10, 512)
        d = unit_direction(seed=1)
        back = apply_attribute_direction(
            apply_attribute_direction(w, d, 1.7), d, -1.7)
        assert (back - w).abs().max().item() <= 1e-6

    def test_double_epsilon_equals_two_steps(self):
        w = torch.randn(1, 10, 512)
        d = unit_direction(seed=2)
        once = apply_attribute_direction(w, d, 2 * 0.6)
        twice = apply_attribute_direction(
            apply_attribute_direction(w, d, 0.6), d, 0.6)
        assert (once - twice).abs().max().item() <= 1e-6

    def test_shape_mismatch(self):
        w = torch.randn(1, 14, 512)
        with pytest.raises(ShapeError):
            apply_attribute_direction(w, unit_direction(t=10), 1.0)

    def test_directions_are_unit_normalized(self):
        g = torch.Generator().manual_seed(3)
        d = AttributeDirection("big", torch.randn(10, 512, generator=g) * 40)
        assert abs(d.direction.norm().item() - 1.0) <= 1e-6

    def test_zero_direction_rejected(self):
        with pytest.raises(DegenerateDirectionError):
            AttributeDirection("null", torch.zeros(10, 512))


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 16))
def test_property_direction_linearity(e1, e2, seed):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(1, 6, 512, generator=g)
    d = AttributeDirection("p", torch.randn(6, 512, generator=g))
    combined = apply_attribute_direction(w, d, e1 + e2)
    stepped = apply_attribute_direction(
        apply_attribute_direction(w, d, e1), d, e2)
    assert (combined - stepped).abs().max().item() <= 1e-5


class TestRegistry:
    def test_round_trip(self, tmp_path):
        reg = DirectionRegistry()
        for i, name in enumerate(["pose", "hue", "size"]):
            reg.add(unit_direction(t=10, seed=i, name=name))
        path = os.path.join(tmp_path, "directions.json")
        reg.save(path)
        loaded = DirectionRegistry.load(path)
        assert loaded.names() == ["hue", "pose", "size"]
        for name in reg.names():
            assert torch.equal(loaded.get(name).direction,
                               reg.get(name).direction)
            assert loaded.get(name).default_epsilon == \
                reg.get(name).default_epsilon

    def test_unknown_name(self):
        reg = DirectionRegistry()
        with pytest.raises(MissingDirectionError):
            reg.get("nope")
        with pytest.raises(MissingDirectionError):
            reg.remove("nope")

    def test_add_remove(self):
        reg = DirectionRegistry()
        reg.add(unit_direction(name="pose"))
        assert "pose" in reg and len(reg) == 1
        reg.remove("pose")
        assert "pose" not in reg and len(reg) == 0

    def test_snapshot_isolation(self):
        reg = DirectionRegistry()
        reg.add(unit_direction(name="a", seed=0))
        snapshot = reg._directions
        reg.add(unit_direction(name="b", seed=1))
        assert set(snapshot) == {"a"}  # old readers keep the old view

    def test_corrupt_width_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "bad.json")
        with open(path, "w") as fh:
            fh.write('{"x": {"epsilon": 1.0, "direction": [0.1, 0.2, 0.3]}}')
        with pytest.raises(InvalidInputError):
            DirectionRegistry.load(path)


class TestMining:
    def test_linear_toy_generator_monotone(self):
        # render embeds w linearly into pixels; each oracle is a linear
        # readout, so mined directions must move their attribute
        # monotonically over epsilon in {-2,-1,0,1,2}
        t, res, n = 2, 8, 240
        g = torch.Generator().manual_seed(0)
        proj = torch.randn(t * 512, 3 * res * res, generator=g) / math.sqrt(t * 512)
        render = lambda w: (w.reshape(w.shape[0], -1) @ proj).view(-1, 3, res, res)
        probes = {name: torch.randn(3 * res * res, generator=g)
                  for name in ("pose", "hue", "size")}
        oracles = {name: (lambda img, q=q: float(img.flatten() @ q))
                   for name, q in probes.items()}
        samples = torch.randn(n, t, 512, generator=g)
        reg = mine_directions(samples, render, oracles)
        assert reg.names() == ["hue", "pose", "size"]
        w0 = torch.randn(1, t, 512, generator=g)
        for name in reg.names():
            d = reg.get(name)
            vals = [oracles[name](render(
                apply_attribute_direction(w0, d, e * d.default_epsilon)))
                for e in (-2, -1, 0, 1, 2)]
            deltas = [b - a for a, b in zip(vals, vals[1:])]
            assert all(x > 0 for x in deltas) or all(x < 0 for x in deltas), \
                f"{name} not monotone: {vals}"

    def test_constant_oracle_rejected(self):
        render = lambda w: torch.zeros(1, 3, 4, 4)
        with pytest.raises(DegenerateDirectionError):
            mine_directions(torch.randn(16, 2, 512), render,
                            {"flat": lambda img: 1.0})


class HeadEmbedder:
    """Text and image embeddings read off lookup tables / tensor heads."""

    def __init__(self, text_map, k=4):
        self.text_map = text_map
        self.k = k

    def embed_text(self, s):
        return self.text_map[s].clone()

    def embed_image(self, img):
        return img.flatten()[: self.k]


class TestDirectionalLoss:
    TEXTS = {
        "face": torch.zeros(4),
        "right": torch.tensor([1.0, 0, 0, 0]),
        "diag": torch.tensor([1.0, 1.0, 0, 0]),
    }

    def loss_for(self, d_img, t_tar="right"):
        emb = HeadEmbedder(self.TEXTS)
        w_hat = torch.zeros(1, 8)
        w = torch.zeros(1, 8)
        w[0, : len(d_img)] = torch.tensor(d_img, dtype=torch.float32)
        render = lambda w: w  # images are the latents themselves
        return directional_embed_loss(t_tar, "face", w, w_hat, emb, render)

    def test_parallel_shift_gives_zero(self):
        assert abs(self.loss_for([2.0, 0, 0, 0]).item()) <= 1e-6

    def test_opposite_shift_gives_two(self):
        assert abs(self.loss_for([-1.0, 0, 0, 0]).item() - 2.0) <= 1e-6

    def test_diagonal_shift_hand_computed(self):
        want = 1 - 1 / math.sqrt(2)
        assert abs(self.loss_for([1.0, 1.0, 0, 0]).item() - want) <= 1e-6

    def test_zero_text_direction_rejected(self):
        with pytest.raises(DegenerateDirectionError):
            self.loss_for([1.0, 0, 0, 0], t_tar="face")

    def test_zero_image_shift_rejected(self):
        with pytest.raises(DegenerateDirectionError):
            self.loss_for([0.0, 0, 0, 0])


class SmoothEmbedder:
    """Differentiable mock: image embedding is a fixed linear readout."""

    def __init__(self, seed=0, k=6):
        g = torch.Generator().manual_seed(seed)
        self.proj = torch.randn(8 * 512, k, generator=g) / math.sqrt(8 * 512)
        self.text_map = {
            "face": torch.zeros(k),
            "target": torch.nn.functional.normalize(
                torch.randn(k, generator=g), dim=0),
        }

    def embed_text(self, s):
        return self.text_map[s].clone()

    def embed_image(self, img):
        return img.flatten() @ self.proj


class TestTextOptimization:
    def make(self, **kw):
        emb = SmoothEmbedder()
        w_hat = torch.randn(1, 8, 512, generator=torch.Generator().manual_seed(1))
        render = lambda w: w
        directive = TextDirective("target", "face", **kw)
        return emb, w_hat, render, directive

    def test_objective_decreases_endpoint(self):
        emb, w_hat, render, directive = self.make(iterations=60)
        result = optimize_text_edit(w_hat, directive, emb, render)
        assert isinstance(result, TextEditResult)
        assert len(result.trajectory) == 60
        assert result.trajectory[-1] <= result.trajectory[0]
        assert not result.aborted

    def test_input_not_modified(self):
        emb, w_hat, render, directive = self.make(iterations=10)
        before = w_hat.clone()
        optimize_text_edit(w_hat, directive, emb, render)
        assert torch.equal(w_hat, before)

    def test_huge_regularizer_pins_to_start(self):
        emb, w_hat, render, directive = self.make(iterations=40,
                                                  lambda_reg=1e6)
        result = optimize_text_edit(w_hat, directive, emb, render)
        assert (result.w - w_hat).abs().max().item() <= 1e-3

    def test_zero_clip_weight_returns_start(self):
        emb, w_hat, render, directive = self.make(iterations=20)
        directive.lambda_clip = 0.0  # below the constructor floor on purpose
        result = optimize_text_edit(w_hat, directive, emb, render)
        assert torch.equal(result.w, w_hat)

    def test_nonfinite_aborts_with_best(self):
        class Exploding(SmoothEmbedder):
            def __init__(self):
                super().__init__()
                self.calls = 0

            def embed_image(self, img):
                self.calls += 1
                out = super().embed_image(img)
                return out / 0.0 if self.calls > 5 else out

        emb = Exploding()
        w_hat = torch.randn(1, 8, 512)
        directive = TextDirective("target", "face", iterations=50)
        result = optimize_text_edit(w_hat, directive, emb, lambda w: w)
        assert result.aborted
        assert torch.isfinite(result.w).all()
        assert len(result.trajectory) < 50

    def test_directive_validation(self):
        with pytest.raises(InvalidInputError):
            TextDirective("x", lambda_clip=0.001)
        with pytest.raises(InvalidInputError):
            TextDirective("x", iterations=0)
        with pytest.raises(InvalidInputError):
            TextDirective("   ")

    def test_degenerate_text_pair_rejected(self):
        emb, w_hat, render, _ = self.make()
        directive = TextDirective("face", "face")
        with pytest.raises(DegenerateDirectionError):
            optimize_text_edit(w_hat, directive, emb, render)
