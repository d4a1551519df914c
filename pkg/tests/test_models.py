import pytest
import torch

from mitodetect.models import SegModelConfig, VitConfig, build_seg_model, build_toy_vit


def n_params(model):
    return sum(p.numel() for p in model.parameters())


def gate_params(c, reduction):
    hidden = max(1, c // reduction)
    channel = c * hidden + hidden + hidden * c + c
    spatial = 2 * 7 * 7 + 1
    return channel + spatial


def test_seg_output_shape_and_bias_prior():
    model = build_seg_model(SegModelConfig(encoder_channels=[8, 16, 32, 64], input_size=128))
    model.eval()
    with torch.no_grad():
        out = model(torch.randn(2, 3, 128, 128))
    assert out.shape == (2, 1, 128, 128)
    assert model.head.bias.item() == -3.0


def test_attention_parameter_count_matches_shape_oracle():
    ch = [16, 32, 64, 128]
    with_gate = build_seg_model(SegModelConfig(encoder_channels=ch, attention=True))
    without = build_seg_model(SegModelConfig(encoder_channels=ch, attention=False))
    # concatenated widths: upsampled half + skip at each decoder level
    cats = [ch[i] // 2 + ch[i - 1] for i in range(len(ch) - 1, 0, -1)]
    assert n_params(with_gate) - n_params(without) == sum(gate_params(c, 4) for c in cats)


def test_seg_same_seed_same_weights():
    cfg = SegModelConfig(encoder_channels=[8, 16, 32], input_size=64, seed=3)
    a, b = build_seg_model(cfg), build_seg_model(cfg)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = build_seg_model(SegModelConfig(encoder_channels=[8, 16, 32], input_size=64, seed=4))
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_seg_build_does_not_disturb_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    build_seg_model(SegModelConfig(encoder_channels=[8, 16, 32], input_size=64))
    assert torch.equal(torch.rand(1), expected)


def test_seg_rejects_indivisible_input():
    model = build_seg_model(SegModelConfig(encoder_channels=[8, 16, 32], input_size=64))
    with pytest.raises(ValueError, match="divisible"):
        model(torch.zeros(1, 3, 66, 64))


@pytest.mark.parametrize(
    "kwargs",
    [{"encoder_channels": [8, 16]}, {"encoder_channels": [8, 0, 16]}, {"input_size": 100}],
)
def test_seg_config_validation(kwargs):
    with pytest.raises(ValueError):
        SegModelConfig(**kwargs)


def test_vit_tokens_and_output():
    cfg = VitConfig(image_size=64, patch_size=8, depth=2, heads=4, dim=64)
    model = build_toy_vit(cfg)
    x = torch.randn(2, 3, 64, 64)
    assert model.tokens(x).shape == (2, 65, 64)
    assert model(x).shape == (2, 1)
    names = {n.rsplit(".", 1)[-1] for n, _ in model.named_modules()}
    assert {"qkv", "proj", "fc1", "fc2", "head"} <= names


def test_vit_same_seed_same_output():
    cfg = VitConfig(image_size=32, patch_size=8, depth=1, heads=2, dim=32, seed=7)
    x = torch.randn(1, 3, 32, 32)
    a, b = build_toy_vit(cfg).eval(), build_toy_vit(cfg).eval()
    with torch.no_grad():
        assert torch.equal(a(x), b(x))


@pytest.mark.parametrize(
    "kwargs", [{"image_size": 60, "patch_size": 16}, {"dim": 190, "heads": 4}, {"head_outputs": 2}]
)
def test_vit_config_validation(kwargs):
    with pytest.raises(ValueError):
        VitConfig(**kwargs)
