"""Generator geometry and semantics: pyramid shape recurrences against a
symbolic oracle, exact background preservation, gated-fusion limit cases,
end-to-end gradients by finite differences, and determinism."""

import time

import pytest
import torch

from facemug.aggregation import build_bundle
from facemug.config import Config, channels_at, num_style_layers
from facemug.errors import InvalidMaskError, ShapeError
from facemug.generator import (Discriminator, FacemugModel, FeatureBank,
                               RefineDecoder, RefineEncoder, StyleFusion,
                               bank_sizes, compose_edit, decoder_sizes,
                               encoder_sizes)

from fd import fd_check


def symbolic_sizes(resolution):
    """Independent restatement of the three pyramids: the bank doubles from
    4 every second layer, the encoder halves from `resolution` every second
    layer, and the decoder runs the encoder sizes backwards (uppermost size
    appearing twice more for the stem)."""
    t = 2 * (resolution.bit_length() - 1) - 2
    bank, s = [], 4
    for i in range(1, t + 1):
        bank.append(s)
        if i % 2 == 0:
            s *= 2
    enc, s = [], resolution
    for i in range(1, t + 1):
        if i % 2 == 0:
            s //= 2
        enc.append(s)
    dec = enc[::-1] + [resolution]
    return t, bank, enc, dec


@pytest.mark.parametrize("res", [16, 64, 256])
def test_size_formulas_match_symbolic_oracle(res):
    t, bank, enc, dec = symbolic_sizes(res)
    assert num_style_layers(res) == t
    assert bank_sizes(res) == bank
    assert encoder_sizes(res) == enc
    assert decoder_sizes(res) == dec
    assert bank[-1] == res and enc[0] == res and dec[-1] == res
    # fusion pairing: decoder map i aligns with encoder skip t-i and bank i
    for i in range(1, t + 1, 2):
        assert dec[i] == enc[t - i - 1] == bank[i - 1]


@pytest.mark.parametrize("res", [16, 64])
def test_actual_pyramid_shapes(res):
    torch.manual_seed(0)
    t, bank_s, enc_s, dec_s = symbolic_sizes(res)
    bank = FeatureBank(res)
    pyr, img = bank(torch.randn(2, t, 512))
    assert [p.shape[-1] for p in pyr] == bank_s
    assert [p.shape[1] for p in pyr] == [channels_at(s) for s in bank_s]
    assert img.shape == (2, 3, res, res)

    enc = RefineEncoder(res, in_ch=16)
    epyr, c = enc(torch.randn(2, 16, res, res))
    assert [p.shape[-1] for p in epyr] == enc_s
    assert c.shape == (2, 512, 2)

    dec = RefineDecoder(res)
    out = dec(epyr, c, torch.randn(2, t, 512), pyr)
    assert out.shape == (2, 3, res, res)
    assert out.min().item() >= -1 and out.max().item() <= 1


class TestBank:
    def test_deterministic_rebuild(self):
        torch.manual_seed(3)
        b1 = FeatureBank(16)
        torch.manual_seed(3)
        b2 = FeatureBank(16)
        w = torch.randn(1, 6, 512)
        p1, i1 = b1(w)
        p2, i2 = b2(w)
        assert torch.equal(i1, i2)
        assert all(torch.equal(a, b) for a, b in zip(p1, p2))

    def test_wrong_layer_count_rejected(self):
        bank = FeatureBank(16)
        with pytest.raises(ShapeError):
            bank(torch.randn(1, 10, 512))

    def test_styles_control_output(self):
        torch.manual_seed(0)
        bank = FeatureBank(16)
        w1 = torch.randn(1, 6, 512)
        w2 = torch.randn(1, 6, 512)
        assert not torch.allclose(bank(w1)[1], bank(w2)[1])


class TestComposition:
    def test_background_exact(self):
        g = torch.Generator().manual_seed(1)
        img = torch.rand(4, 3, 32, 32, generator=g) * 2 - 1
        gen = torch.rand(4, 3, 32, 32, generator=g) * 2 - 1
        mask = (torch.rand(4, 1, 32, 32, generator=g) > 0.5).float()
        out = compose_edit(img * (1 - mask), mask, gen)
        assert torch.equal(out * (1 - mask), img * (1 - mask))
        assert torch.equal(out * mask, gen * mask)

    def test_full_model_background_exact(self, one_face):
        torch.manual_seed(0)
        cfg = Config()
        model = FacemugModel(cfg).eval()
        img = one_face["image"].unsqueeze(0)
        sem = one_face["semantic"]
        mask = torch.zeros(1, 1, 64, 64)
        mask[:, :, 20:44, 16:48] = 1
        bundle = build_bundle(img, mask, semantic=sem.unsqueeze(0))
        w = model.mapping(torch.randn(1, 512), model.t)
        with torch.no_grad():
            out = model.edit_forward(bundle, w)
        # bitwise: composition must copy source pixels outside the mask
        assert torch.equal(out * (1 - mask), img * (1 - mask))

    def test_nonbinary_mask_rejected(self):
        img = torch.zeros(1, 3, 8, 8)
        with pytest.raises(InvalidMaskError):
            compose_edit(img, torch.full((1, 1, 8, 8), 0.3), img)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            compose_edit(torch.zeros(1, 3, 8, 8), torch.ones(1, 1, 8, 8),
                         torch.zeros(1, 3, 16, 16))


class TestFusion:
    def setup_method(self):
        torch.manual_seed(0)
        self.fusion = StyleFusion(8)
        g = torch.Generator().manual_seed(2)
        self.f_de = torch.rand(2, 8, 16, 16, generator=g)
        self.f_en = torch.rand(2, 8, 16, 16, generator=g)
        self.f_s = torch.rand(2, 8, 16, 16, generator=g)
        self.w = torch.randn(2, 512, generator=g)

    def test_gate_saturated_high_passes_bank(self):
        # sigmoid(+80) rounds to 1.0 in float32, so F_g == F_s bitwise
        with torch.no_grad():
            self.fusion.bias_s += 80.0
        out = self.fusion(self.f_de, self.f_en, self.f_s, self.w)
        assert torch.equal(out, self.f_s)

    def test_gate_saturated_low_passes_refinement(self):
        with torch.no_grad():
            self.fusion.bias_s -= 80.0
        out, trace = self.fusion(self.f_de, self.f_en, self.f_s, self.w,
                                 return_trace=True)
        assert (out - trace["h_hat"]).abs().max().item() <= 1e-6

    def test_zero_weights_closed_form(self):
        # all-zero convs and biases: gate = sigmoid(0) = 0.5 and
        # H_hat = (sigmoid(0)+1)*F_en + leaky(0) = 1.5*F_en, tolerance 1e-6
        with torch.no_grad():
            for p in self.fusion.parameters():
                p.zero_()
            self.fusion.sc_de.modulation.bias.fill_(1.0)
            self.fusion.sc_s.modulation.bias.fill_(1.0)
        out, trace = self.fusion(self.f_de, self.f_en, self.f_s, self.w,
                                 return_trace=True)
        assert (trace["h_hat"] - 1.5 * self.f_en).abs().max().item() <= 1e-6
        want = 0.5 * self.f_s + 0.5 * 1.5 * self.f_en
        assert (out - want).abs().max().item() <= 1e-6

    def test_gate_bounds(self):
        _, trace = self.fusion(self.f_de, self.f_en, self.f_s, self.w,
                               return_trace=True)
        assert trace["gate"].min().item() > 0
        assert trace["gate"].max().item() < 1

    def test_output_between_branches(self):
        out, trace = self.fusion(self.f_de, self.f_en, self.f_s, self.w,
                                 return_trace=True)
        lo = torch.minimum(self.f_s, trace["h_hat"])
        hi = torch.maximum(self.f_s, trace["h_hat"])
        assert (out >= lo - 1e-6).all() and (out <= hi + 1e-6).all()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            self.fusion(self.f_de, self.f_en[:, :, :8], self.f_s, self.w)


SMALL = {2: 8, 4: 8, 8: 8, 16: 8}


def small_parts(res=8, dtype=torch.float64):
    torch.manual_seed(0)
    bank = FeatureBank(res, channels=SMALL).to(dtype)
    enc = RefineEncoder(res, in_ch=4, channels=SMALL).to(dtype)
    dec = RefineDecoder(res, channels=SMALL).to(dtype)
    return bank, enc, dec


class TestGradients:
    def test_end_to_end_finite_differences(self):
        # full conditional path in float64 at 8 px, relative tolerance 1e-3
        bank, enc, dec = small_parts()
        t = bank.t
        g = torch.Generator().manual_seed(4)
        x = torch.rand(1, 4, 8, 8, generator=g, dtype=torch.float64)
        w = torch.randn(1, t, 512, generator=g, dtype=torch.float64)
        probe = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)

        def readout():
            pyr, _ = bank(w)
            epyr, c = enc(x)
            out = dec(epyr, c, w, pyr)
            return (out * probe).sum()

        params = {
            "bank.const": bank.const,
            "bank.conv0.weight": bank.convs[0].conv.weight,
            "bank.conv3.mod.bias": bank.convs[3].conv.modulation.bias,
            "enc.block0.weight": enc.blocks[0].conv.weight,
            "enc.ctx.weight": enc.ctx.weight,
            "dec.stem.weight": dec.stem.weight,
            "dec.conv1.weight": dec.convs[0].conv.weight,
            "dec.fusion0.sc_de.weight": dec.fusions[0].sc_de.weight,
            "dec.fusion0.sc_s.mod.weight": dec.fusions[0].sc_s.modulation.weight,
            "dec.fusion1.bias_s": dec.fusions[1].bias_s,
            "dec.out.weight": dec.out.weight,
        }
        fd_check(readout, params, rtol=1e-3, atol=1e-7, max_entries=6)

    def test_style_gradient_reaches_all_layers(self):
        bank, enc, dec = small_parts(dtype=torch.float32)
        t = bank.t
        w = torch.randn(1, t, 512, requires_grad=True)
        x = torch.rand(1, 4, 8, 8)
        pyr, _ = bank(w)
        epyr, c = enc(x)
        out = dec(epyr, c, w, pyr)
        out.sum().backward()
        per_layer = w.grad.abs().amax(dim=-1)[0]
        assert (per_layer > 0).all(), "every style layer must influence the output"


class TestDiscriminator:
    def test_output_shape(self):
        torch.manual_seed(0)
        d = Discriminator(64)
        assert d(torch.randn(3, 3, 64, 64)).shape == (3, 1)

    def test_small_config(self):
        d = Discriminator(8, channels=SMALL)
        assert d(torch.randn(2, 3, 8, 8)).shape == (2, 1)


class TestFullModel:
    def test_deterministic_forward(self, one_face):
        img = one_face["image"].unsqueeze(0)
        sem = one_face["semantic"]
        mask = torch.zeros(1, 1, 64, 64)
        mask[:, :, 24:40, 24:40] = 1
        bundle = build_bundle(img, mask, semantic=sem.unsqueeze(0))

        outs = []
        for _ in range(2):
            torch.manual_seed(11)
            model = FacemugModel(Config()).eval()
            w = model.mapping(torch.randn(1, 512), model.t)
            with torch.no_grad():
                outs.append(model.edit_forward(bundle, w))
        assert torch.equal(outs[0], outs[1])

    def test_single_edit_under_one_second(self, one_face):
        torch.manual_seed(0)
        model = FacemugModel(Config()).eval()
        img = one_face["image"].unsqueeze(0)
        sem = one_face["semantic"]
        mask = torch.zeros(1, 1, 64, 64)
        mask[:, :, 16:48, 16:48] = 1
        bundle = build_bundle(img, mask, semantic=sem.unsqueeze(0))
        w = model.mapping(torch.randn(1, 512), model.t)
        with torch.no_grad():
            model.edit_forward(bundle, w)  # warm
            t0 = time.time()
            model.edit_forward(bundle, w)
            elapsed = time.time() - t0
        assert elapsed < 1.0, f"single edit took {elapsed:.2f}s"

    def test_bank_pyramid_override(self, one_face):
        torch.manual_seed(0)
        model = FacemugModel(Config()).eval()
        img = one_face["image"].unsqueeze(0)
        sem = one_face["semantic"]
        mask = torch.zeros(1, 1, 64, 64)
        mask[:, :, 24:40, 24:40] = 1
        bundle = build_bundle(img, mask, semantic=sem.unsqueeze(0))
        w = model.mapping(torch.randn(1, 512), model.t)
        with torch.no_grad():
            pyr, _ = model.bank(w)
            a = model.edit_forward(bundle, w)
            b = model.edit_forward(bundle, w, bank_pyramid=pyr)
        assert torch.equal(a, b)
