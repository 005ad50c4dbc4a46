"""Multimodal aggregation: per-pixel softmax correctness, the weighted
merge against a brute-force oracle, spatial equivariance, and input
validation."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from facemug.aggregation import (AggregationModule, ModalityBundle,
                                 aggregate, build_bundle,
                                 extract_modality_features,
                                 score_and_normalize)
from facemug.errors import InvalidInputError, InvalidMaskError, ShapeError


def make_bundle(b=1, res=32, seed=0, with_all=True):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(b, 3, res, res, generator=g) * 2 - 1
    mask = torch.zeros(b, 1, res, res)
    mask[:, :, res // 4: 3 * res // 4, res // 4: 3 * res // 4] = 1
    kw = {}
    if with_all:
        kw = dict(sketch=torch.rand(b, 1, res, res, generator=g),
                  color=torch.rand(b, 3, res, res, generator=g) * 2 - 1,
                  semantic=torch.softmax(
                      torch.randn(b, 19, res, res, generator=g) * 4, dim=1))
    return build_bundle(img, mask, **kw).validate()


@pytest.fixture(scope="module")
def module():
    torch.manual_seed(0)
    return AggregationModule(c_a=16)


class TestNormalization:
    def test_scores_sum_to_one_per_pixel(self, module):
        # tolerance 1e-6
        bundle = make_bundle(b=2)
        feats = extract_modality_features(bundle, module)
        norm = score_and_normalize(feats, module)
        total = sum(norm)
        assert (total - 1.0).abs().max().item() <= 1e-6

    def test_scores_nonnegative(self, module):
        bundle = make_bundle(b=2, seed=3)
        _, maps = module(bundle, return_maps=True)
        for s in maps.norm_scores:
            assert s.min().item() >= 0.0

    def test_identical_features_equal_weights(self):
        # same feature map into the shared scorer -> identical raw scores
        # -> softmax gives exactly 1/4 everywhere
        torch.manual_seed(1)
        module = AggregationModule(c_a=8)
        f = torch.randn(2, 8, 16, 16)
        norm = module.normalize(module.score([f, f.clone(), f.clone(), f.clone()]))
        for s in norm:
            assert torch.equal(s, torch.full_like(s, 0.25)) or \
                (s - 0.25).abs().max().item() <= 1e-7

    def test_extreme_scores_stay_finite(self, module):
        # raw score gaps of +-80 must not overflow the softmax
        raw = [torch.full((1, 1, 4, 4), v) for v in (-80.0, 0.0, 80.0, 40.0)]
        norm = module.normalize(raw)
        stacked = torch.stack(norm)
        assert torch.isfinite(stacked).all()
        assert (stacked.sum(dim=0) - 1).abs().max().item() <= 1e-6
        assert norm[2].min().item() > 0.99  # the +80 branch dominates

    def test_softmax_matches_manual(self, module):
        g = torch.Generator().manual_seed(5)
        raw = [torch.randn(2, 1, 8, 8, generator=g) for _ in range(4)]
        norm = module.normalize(raw)
        stacked = torch.stack([r.double() for r in raw])
        manual = stacked.exp() / stacked.exp().sum(dim=0, keepdim=True)
        for got, want in zip(norm, manual.unbind(0)):
            assert (got.double() - want).abs().max().item() <= 1e-6


class TestAggregate:
    def test_brute_force_oracle(self, module):
        # scalar loop over an 8x8 grid, numpy double arithmetic
        bundle = make_bundle(b=1, res=8, seed=2)
        agg, maps = module(bundle, return_maps=True)
        feats = [f.detach().double().numpy()[0] for f in maps.features]
        raws = [r.detach().double().numpy()[0, 0] for r in maps.raw_scores]
        want = np.zeros_like(feats[0])
        for y in range(8):
            for x in range(8):
                scores = np.array([r[y, x] for r in raws])
                e = np.exp(scores - scores.max())
                wgt = e / e.sum()
                for j in range(4):
                    want[:, y, x] += wgt[j] * feats[j][:, y, x]
        got = agg.detach().double().numpy()[0]
        assert np.abs(got - want).max() <= 1e-6

    def test_convex_combination_bound(self, module):
        # the merge can never escape the per-pixel min/max of the branches
        bundle = make_bundle(b=2, seed=7)
        agg, maps = module(bundle, return_maps=True)
        stacked = torch.stack(maps.features)
        lo, hi = stacked.min(dim=0).values, stacked.max(dim=0).values
        assert (agg >= lo - 1e-6).all()
        assert (agg <= hi + 1e-6).all()

    def test_shift_equivariance(self, module):
        # all convs are 3x3/pad 1 with no normalization over space, so a
        # toroidal shift of every input shifts the output; compare on the
        # interior to discard boundary effects. tolerance 1e-6
        bundle = make_bundle(b=1, res=32, seed=4)
        shift = (5, 9)

        def roll(t):
            return t.roll(shifts=shift, dims=(-2, -1))

        rolled = ModalityBundle(
            masked_image=roll(bundle.masked_image), mask=roll(bundle.mask),
            sketch=roll(bundle.sketch), color=roll(bundle.color),
            semantic=roll(bundle.semantic), exemplar=roll(bundle.exemplar),
            present=dict(bundle.present))
        out = module(bundle)
        out_rolled = module(rolled)
        dev = (roll(out) - out_rolled).abs()
        # receptive field radius is 6; keep pixels >=6 from every border in
        # both the rolled and the unrolled frame
        interior = dev[:, :, 6 + shift[0]: 32 - 6, 6 + shift[1]: 32 - 6]
        assert interior.max().item() <= 1e-6

    def test_zero_weight_branch_drops_out(self, module):
        # push one branch's raw score to -80: its feature must not leak in
        bundle = make_bundle(b=1, res=8, seed=8)
        feats = extract_modality_features(bundle, module)
        raw = module.score(feats)
        raw[1] = raw[1] - 80.0
        norm = module.normalize(raw)
        merged = sum(f * s for f, s in zip(feats, norm))
        raw_wo = [raw[0], raw[2], raw[3]]
        feats_wo = [feats[0], feats[2], feats[3]]
        norm_wo = module.normalize(raw_wo)
        merged_wo = sum(f * s for f, s in zip(feats_wo, norm_wo))
        assert (merged - merged_wo).abs().max().item() <= 1e-5

    def test_gradient_flow_matches_finite_differences(self):
        # d(readout)/d(raw scores) through softmax+merge, 1e-4
        torch.manual_seed(0)
        feats = [torch.randn(1, 4, 6, 6, dtype=torch.float64) for _ in range(4)]
        raw = [torch.randn(1, 1, 6, 6, dtype=torch.float64, requires_grad=True)
               for _ in range(4)]
        probe = torch.randn(1, 4, 6, 6, dtype=torch.float64)

        def readout(scores):
            norm = AggregationModule.normalize(list(scores))
            merged = sum(f * s for f, s in zip(feats, norm))
            return (merged * probe).sum()

        ana = torch.autograd.grad(readout(raw), raw)
        eps = 1e-6
        for j in range(4):
            flat = raw[j].detach().flatten()
            for idx in range(0, flat.numel(), 7):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                hi = readout([r.detach().view(r.shape) if k != j else
                              flat.view(raw[j].shape) for k, r in enumerate(raw)])
                flat[idx] = orig - eps
                lo = readout([r.detach().view(r.shape) if k != j else
                              flat.view(raw[j].shape) for k, r in enumerate(raw)])
                flat[idx] = orig
                num = (hi - lo).item() / (2 * eps)
                assert abs(num - ana[j].flatten()[idx].item()) <= 1e-4

    def test_module_functions_agree(self, module):
        bundle = make_bundle(b=1, seed=11)
        direct = module(bundle)
        via_fn, maps = aggregate(bundle, module, return_maps=True)
        assert torch.equal(direct, via_fn)
        assert torch.equal(maps.aggregate, via_fn)


class TestMaskedInputs:
    def test_absent_modalities_are_zero_filled(self):
        img = torch.rand(1, 3, 16, 16)
        mask = torch.zeros(1, 1, 16, 16)
        mask[:, :, 4:12, 4:12] = 1
        bundle = build_bundle(img, mask)
        assert bundle.sketch.abs().max().item() == 0
        assert bundle.color.abs().max().item() == 0
        assert not bundle.present["sketch"]
        bundle.validate()

    def test_masked_image_zero_inside_mask(self):
        img = torch.rand(1, 3, 16, 16) + 0.5
        mask = torch.ones(1, 1, 16, 16)
        bundle = build_bundle(img, mask)
        assert bundle.masked_image.abs().max().item() == 0

    def test_guidance_clipped_to_mask(self):
        img = torch.rand(1, 3, 16, 16)
        mask = torch.zeros(1, 1, 16, 16)
        mask[:, :, :8] = 1
        sk = torch.ones(1, 1, 16, 16)
        bundle = build_bundle(img, mask, sketch=sk)
        assert bundle.sketch[:, :, 8:].abs().max().item() == 0
        assert bundle.sketch[:, :, :8].min().item() == 1

    def test_stack_is_26_channels(self):
        bundle = make_bundle(b=2, res=16)
        assert bundle.stack().shape == (2, 26, 16, 16)

    def test_aggregation_sees_the_mask_channel(self, module):
        # same masked image, different masks -> different features
        img = torch.zeros(1, 3, 16, 16)
        m1 = torch.zeros(1, 1, 16, 16); m1[:, :, :8] = 1
        m2 = torch.zeros(1, 1, 16, 16); m2[:, :, 8:] = 1
        out1 = module(build_bundle(img, m1))
        out2 = module(build_bundle(img, m2))
        assert not torch.allclose(out1, out2)


class TestValidation:
    def test_nonbinary_mask_rejected(self):
        img = torch.rand(1, 3, 16, 16)
        mask = torch.full((1, 1, 16, 16), 0.5)
        with pytest.raises(InvalidMaskError):
            build_bundle(img, mask).validate()

    def test_score_shape_mismatch(self, module):
        with pytest.raises(ShapeError):
            module.score([torch.zeros(1, 16, 8, 8), torch.zeros(1, 16, 4, 4)])

    def test_empty_feature_list(self, module):
        with pytest.raises(InvalidInputError):
            module.score([])
        with pytest.raises(InvalidInputError):
            module.normalize([])

    def test_semantic_must_be_distribution(self):
        img = torch.rand(1, 3, 16, 16)
        mask = torch.zeros(1, 1, 16, 16)
        mask[:, :, 4:12, 4:12] = 1
        bad = torch.ones(1, 19, 16, 16)  # sums to 19
        with pytest.raises(InvalidInputError):
            build_bundle(img, mask, semantic=bad).validate()

    def test_tampered_absent_modality_rejected(self):
        bundle = make_bundle(with_all=False)
        bundle.sketch += 1.0
        with pytest.raises(InvalidInputError):
            bundle.validate()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 16), st.integers(1, 3))
def test_property_weights_always_simplex(seed, b):
    torch.manual_seed(seed)
    module = AggregationModule(c_a=4)
    bundle = make_bundle(b=b, res=8, seed=seed)
    _, maps = module(bundle, return_maps=True)
    total = sum(maps.norm_scores)
    assert (total - 1.0).abs().max().item() <= 1e-6
    for s in maps.norm_scores:
        assert s.min().item() >= 0
