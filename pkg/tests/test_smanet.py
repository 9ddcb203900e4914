import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import tiny_spec
from weakseg.smanet import (
    AttentionGate,
    Checkpoint,
    DecoderStage,
    MultiscaleAttentionPyramid,
    NetworkSpec,
    PyramidPooling,
    SpecError,
    attention_forward,
    block_census,
    build_network,
    count_parameters,
    decoder_forward,
    load_checkpoint,
    multiscale_attention_pyramid,
    save_checkpoint,
)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.mark.parametrize("variant", ["psp_baseline", "psp_double_decoder", "smanet"])
@pytest.mark.parametrize("stride", [8, 16])
@pytest.mark.parametrize("hw", [(48, 48), (64, 96), (57, 71)])
def test_tiny_shapes(variant, stride, hw):
    model = build_network(tiny_spec(variant, output_stride=stride, psp_bins=(1, 2, 3))).eval()
    with torch.no_grad():
        out = model(torch.randn(2, 3, *hw))
    assert out.shape == (2, 2, *hw)


def test_census():
    census = {v: block_census(build_network(tiny_spec(v)))
              for v in ("psp_baseline", "psp_double_decoder", "smanet")}
    assert census["psp_baseline"] == dict(encoder=True, psp_head=True, attention=False, decoder=False)
    assert census["psp_double_decoder"] == dict(encoder=True, psp_head=True, attention=False, decoder=True)
    assert census["smanet"] == dict(encoder=True, psp_head=True, attention=True, decoder=True)


def test_variant_nesting():
    # psp_double_decoder is smanet minus the attention gate: same parameter
    # names everywhere else (the decoder input width differs, so shapes may not)
    dd = dict(build_network(tiny_spec("psp_double_decoder")).named_parameters())
    sm = dict(build_network(tiny_spec("smanet")).named_parameters())
    assert set(dd) == {k for k in sm if not k.startswith("attention.")}


def test_parameter_ordering_full_width():
    counts = [count_parameters(build_network(NetworkSpec(variant=v)))
              for v in ("psp_baseline", "psp_double_decoder", "smanet")]
    assert counts[0] < counts[1] < counts[2]


@pytest.mark.parametrize("bad", [
    dict(variant="unet"), dict(num_classes=3), dict(output_stride=4),
    dict(dilation_rates=(2, 1)), dict(dilation_rates=(1, 1)), dict(layers=(1, 1, 1)),
    dict(psp_bins=()), dict(reduced_channels=0),
])
def test_spec_validation(bad):
    with pytest.raises(SpecError):
        NetworkSpec(**bad)


def test_spec_aliases_and_round_trip():
    spec = NetworkSpec(variant="psp-dd", dilation_rates=[1, 3])
    assert spec.variant == "psp_double_decoder"
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(SpecError, match="unknown"):
        NetworkSpec.from_dict({"varient": "smanet"})


class TestAttention:
    def make(self, bins=(1, 2, 3, 6), rates=(1, 2, 4)):
        return AttentionGate(8, 6, 5, rates, bins).eval()

    def test_maps_and_gating(self):
        gate = self.make()
        x = torch.randn(3, 8, 12, 12)
        with torch.no_grad():
            maps, attended = attention_forward(gate, x)
            assert maps.shape == (3, 2, 12, 12) and (maps >= 0).all()
            assert torch.allclose(maps.sum(1), torch.ones(3, 12, 12), atol=1e-6)
            assert torch.allclose(attended, gate.reduce(x) * maps[:, 1:2])

    def test_constant_input_constant_maps(self):
        gate = self.make(bins=(1,))
        with torch.no_grad():
            maps, _ = attention_forward(gate, torch.full((1, 8, 48, 48), 0.7))
        # global pooling keeps the map translation invariant away from padding
        interior = maps[:, :, 14:-14, 14:-14]
        assert torch.allclose(interior, interior[:, :, :1, :1].expand_as(interior), atol=1e-6)

    def test_pyramid_channels(self):
        pyr = MultiscaleAttentionPyramid(4, 6, rates=(1, 2, 4), bins=(1, 2))
        out = multiscale_attention_pyramid(pyr, torch.randn(1, 4, 9, 9))
        assert out.shape[1] == 3 * pyr.branch_out == pyr.out_channels
        assert out.shape[-2:] == (9, 9)

    def test_rate_one_is_plain_conv(self):
        pyr = MultiscaleAttentionPyramid(4, 6, rates=(1, 2)).eval()
        conv = pyr.branches[0][0][0]
        x = torch.randn(1, 4, 10, 10)
        assert torch.allclose(conv(x), F.conv2d(x, conv.weight, padding=1))

    def test_footprint_grows_with_rate(self):
        pyr = MultiscaleAttentionPyramid(2, 2, rates=(1, 2, 4), bins=(1,)).eval()
        spans = []
        for branch in pyr.branches:
            x = torch.randn(1, 2, 21, 21, requires_grad=True)
            # pre-activation response of the dilated conv at the centre pixel
            branch[0][0](x)[0, :, 10, 10].sum().backward()
            cols = torch.nonzero(x.grad.abs().sum((0, 1, 2)) > 0)
            spans.append(int(cols.max() - cols.min()) + 1)
        assert spans == [3, 5, 9]

    def test_bin_too_large(self):
        with pytest.raises(ValueError, match="bin"):
            PyramidPooling(4, bins=(1, 6))(torch.randn(1, 4, 5, 5))


class TestDecoder:
    def test_resolution_mismatch(self):
        stage = DecoderStage(4, 3, 2, 4)
        with pytest.raises(ValueError, match="cannot join"):
            stage(torch.randn(1, 4, 8, 8), torch.randn(1, 3, 40, 40))
        with pytest.raises(ValueError):
            stage(torch.randn(1, 4, 8, 8), torch.randn(1, 3, 4, 4))

    def test_stride_arithmetic(self):
        model = build_network(tiny_spec("smanet")).eval()
        sizes = []
        hooks = [m.register_forward_hook(lambda m, i, o: sizes.append(tuple((o[0] if isinstance(o, tuple) else o).shape[-2:])))
                 for m in (model.attention, model.decoder.stage1, model.decoder.stage2)]
        with torch.no_grad():
            out = model(torch.randn(1, 3, 64, 64))
        for h in hooks:
            h.remove()
        assert sizes == [(8, 8), (16, 16), (32, 32)]
        assert out.shape == (1, 2, 64, 64)

    def test_decoder_forward_matches_model(self):
        model = build_network(tiny_spec("smanet")).eval()
        x = torch.randn(1, 3, 64, 80)
        with torch.no_grad():
            feats = model.encoder(x)
            _, attended = attention_forward(model.attention, model.head(feats.encoder_out))
            out = decoder_forward(model.decoder, model.classifier, attended,
                                  feats.conv_2, feats.conv_3, x.shape[-2:])
            assert torch.equal(out, model(x))


def test_deterministic_forward():
    torch.use_deterministic_algorithms(True)
    try:
        model = build_network(tiny_spec()).eval()
        x = torch.randn(2, 3, 48, 48)
        with torch.no_grad():
            assert torch.equal(model(x), model(x))
    finally:
        torch.use_deterministic_algorithms(False)


def test_checkpoint_reload_bit_exact(tmp_path):
    model = build_network(tiny_spec()).eval()
    spec = model.spec
    save_checkpoint(Checkpoint(spec, model.state_dict(), step=7, config_digest="abc"), tmp_path / "m.pt")
    ckpt = load_checkpoint(tmp_path / "m.pt")
    assert ckpt.spec == spec and ckpt.step == 7 and ckpt.config_digest == "abc"
    x = torch.randn(1, 3, 48, 48)
    with torch.no_grad():
        assert torch.equal(ckpt.build()(x), model(x))


def test_encoder_weights(tmp_path):
    donor = build_network(tiny_spec())
    state = dict(donor.encoder.state_dict())
    state["fc.weight"] = torch.zeros(10, 4)
    torch.save(state, tmp_path / "resnet.pth")
    model = build_network(tiny_spec(), encoder_weights=str(tmp_path / "resnet.pth"))
    for k, v in donor.encoder.state_dict().items():
        assert torch.equal(model.encoder.state_dict()[k], v)
    torch.save({"nothing": torch.zeros(1)}, tmp_path / "empty.pth")
    with pytest.raises(SpecError):
        build_network(tiny_spec(), encoder_weights=str(tmp_path / "empty.pth"))


def test_normalization_of_uint8_images():
    from weakseg.smanet import normalize_image
    t = normalize_image(np.zeros((4, 5, 3), np.uint8))
    assert t.shape == (1, 3, 4, 5) and t.dtype == torch.float32
