import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from compdiff.encoders import ForegroundEmbeddings
from compdiff.errors import ConfigError, GeometryError, ShapeError
from compdiff.generator import (
    ALL_INDICATORS,
    Ablation,
    BoundingBox,
    FeatureModulation,
    GeneratorConfig,
    GlobalFusion,
    Indicator,
    LocalEnhancement,
    UNet,
    assemble_input,
    count_parameters,
    feature_modulation,
    global_fusion,
    local_enhancement,
    parameter_census,
    roi_align,
    unet_forward,
)
from compdiff.model import tiny_config
from compdiff.numerics import Rng, group_norm

from .oracles import roi_align_oracle


def _randomize(module, seed=0, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * scale)
    return module


# ---------------------------------------------------------------------------
# Indicator / box
# ---------------------------------------------------------------------------


def test_indicator_states():
    assert [S.task for S in ALL_INDICATORS] == ["blend", "harmonize", "view", "compose"]
    assert Indicator.parse("1,0") == Indicator(1, 0)
    with pytest.raises(ConfigError):
        Indicator(2, 0)
    with pytest.raises(ConfigError):
        Indicator.parse("1")


def test_box_validation():
    with pytest.raises(GeometryError):
        BoundingBox(0.5, 0.1, 0.4, 0.9)
    with pytest.raises(GeometryError):
        BoundingBox(-0.1, 0.1, 0.4, 0.9)
    assert BoundingBox.parse("0,0,1,1").area == 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 0.99), st.floats(0, 0.99), st.floats(0.001, 1), st.floats(0.001, 1), st.integers(1, 64))
def test_box_pixels_nonempty_and_inside(x0, y0, dx, dy, n):
    box = BoundingBox(x0, y0, min(1.0, x0 + dx), min(1.0, y0 + dy))
    r0, r1, c0, c1 = box.to_pixels(n, n)
    assert 0 <= r0 < r1 <= n and 0 <= c0 < c1 <= n


# ---------------------------------------------------------------------------
# assemble_input
# ---------------------------------------------------------------------------


def test_assemble_input_channels():
    inp = assemble_input(torch.randn(4, 16, 16), torch.randn(4, 16, 16), BoundingBox(0.1, 0.2, 0.5, 0.7),
                         Indicator(1, 0))
    x = inp.stacked()
    assert tuple(x.shape) == (11, 16, 16)
    assert torch.equal(x[9], torch.ones(16, 16))
    assert torch.equal(x[10], torch.zeros(16, 16))
    assert set(x[8].unique().tolist()) <= {0.0, 1.0}


def test_assemble_input_full_box_mask():
    inp = assemble_input(torch.zeros(4, 8, 8), torch.zeros(4, 8, 8), BoundingBox(0, 0, 1, 1), Indicator(0, 0))
    assert torch.equal(inp.mask_ds, torch.ones(1, 8, 8))


def test_assemble_input_mask_matches_pixel_centres():
    box = BoundingBox(0.3, 0.1, 0.62, 0.9)
    inp = assemble_input(torch.zeros(4, 16, 16), torch.zeros(4, 16, 16), box, Indicator(0, 1))
    centres = (np.arange(16) + 0.5) / 16
    ref = np.outer((centres >= 0.1) & (centres < 0.9), (centres >= 0.3) & (centres < 0.62))
    assert np.array_equal(inp.mask_ds[0].numpy() > 0, ref)


def test_assemble_input_extent_mismatch():
    with pytest.raises(ShapeError):
        assemble_input(torch.zeros(4, 8, 8), torch.zeros(4, 8, 4), BoundingBox(0, 0, 1, 1), Indicator(0, 0))


# ---------------------------------------------------------------------------
# roi_align
# ---------------------------------------------------------------------------


def test_roi_align_identity():
    m = torch.randn(3, 6, 6)
    out = roi_align(m, BoundingBox(0, 0, 1, 1), 6)
    assert torch.allclose(out, m, atol=1e-12, rtol=0)


def test_roi_align_constant():
    out = roi_align(torch.full((2, 5, 7), -0.75), BoundingBox(0.1, 0.3, 0.8, 0.5), 3)
    assert torch.equal(out, torch.full((2, 3, 3), -0.75))


def test_roi_align_reference_case():
    m = np.random.default_rng(0).standard_normal((2, 8, 8))
    box = (0.25, 0.25, 0.75, 0.75)
    out = roi_align(torch.from_numpy(m), BoundingBox(*box), 4).numpy()
    np.testing.assert_allclose(out, roi_align_oracle(m, box, 4), rtol=0, atol=1e-12)


def test_roi_align_degenerate_box():
    class Flat:
        x0, y0, x1, y1 = 0.5, 0.2, 0.5, 0.6

    with pytest.raises(GeometryError):
        roi_align(torch.zeros(1, 4, 4), Flat(), 2)


# ---------------------------------------------------------------------------
# feature modulation
# ---------------------------------------------------------------------------


def _fm_inputs(seed=0, c=4, p=3, n_p=5, d_l=6):
    g = torch.Generator().manual_seed(seed)
    ft = torch.randn(c, p, p, generator=g)
    attn = torch.softmax(torch.randn(p * p, n_p, generator=g), -1)
    local = torch.randn(n_p, d_l, generator=g)
    return ft, attn, local


def test_modulation_gamma_one_beta_zero_is_norm():
    ft, attn, local = _fm_inputs()
    fm = FeatureModulation(4, 6, 2)
    with torch.no_grad():
        fm.conv_gamma.weight.zero_()
        fm.conv_gamma.bias.fill_(1.0)
        fm.conv_beta.weight.zero_()
        fm.conv_beta.bias.zero_()
    out = feature_modulation(fm, ft, attn, local)
    assert torch.allclose(out, group_norm(ft[None], 2)[0], atol=1e-12, rtol=0)


def test_modulation_gamma_zero_gives_beta_bias():
    ft, attn, local = _fm_inputs(1)
    fm = FeatureModulation(4, 6, 2)
    b = torch.tensor([0.5, -1.0, 2.0, 3.5])
    with torch.no_grad():
        fm.conv_gamma.weight.zero_()
        fm.conv_gamma.bias.zero_()
        fm.conv_beta.weight.zero_()
        fm.conv_beta.bias.copy_(b)
    out = feature_modulation(fm, ft, attn, local)
    assert torch.allclose(out, b[:, None, None].expand_as(out), atol=1e-12, rtol=0)


def test_modulation_compositional_oracle():
    ft, attn, local = _fm_inputs(2)
    fm = _randomize(FeatureModulation(4, 6, 2), 5)
    out = feature_modulation(fm, ft, attn, local)
    aligned = (attn.numpy() @ local.numpy()).T.reshape(6, 3, 3)
    from .oracles import naive_conv2d

    gam = naive_conv2d(aligned[None], fm.conv_gamma.weight.detach().numpy(), fm.conv_gamma.bias.detach().numpy(), 1, 1)[0]
    bet = naive_conv2d(aligned[None], fm.conv_beta.weight.detach().numpy(), fm.conv_beta.bias.detach().numpy(), 1, 1)[0]
    x = ft.numpy().reshape(2, -1)
    norm = ((x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5)).reshape(4, 3, 3)
    np.testing.assert_allclose(out.detach().numpy(), norm * gam + bet, atol=1e-12, rtol=0)


# ---------------------------------------------------------------------------
# local enhancement
# ---------------------------------------------------------------------------


def _le(modulation=True, seed=0, c=8, d_l=6, p=4):
    return _randomize(LocalEnhancement(c, d_l, p, 4, modulation), seed)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 0.8), st.floats(0, 0.8), st.floats(0.05, 1), st.floats(0.05, 1))
def test_local_enhancement_outside_box_unchanged(seed, x0, y0, dx, dy):
    box = BoundingBox(x0, y0, min(1.0, x0 + dx), min(1.0, y0 + dy))
    g = torch.Generator().manual_seed(seed)
    fmap = torch.randn(8, 8, 8, generator=g)
    local = torch.randn(5, 6, generator=g)
    out, attn = local_enhancement(_le(seed=seed % 7), fmap, local, Indicator(seed % 2, (seed // 2) % 2), box)
    inside = box.mask(8, 8)[0].bool()
    assert torch.equal(out[:, ~inside], fmap[:, ~inside])
    assert tuple(attn.shape) == (16, 5)
    assert torch.all((attn.sum(-1) - 1).abs() <= 1e-9)


def test_local_enhancement_adds_inside_box():
    box = BoundingBox(0.25, 0.25, 0.75, 0.75)
    fmap = torch.randn(8, 8, 8)
    out, _ = local_enhancement(_le(), fmap, torch.randn(5, 6), Indicator(1, 1), box)
    assert not torch.equal(out[:, 2:6, 2:6], fmap[:, 2:6, 2:6])


def test_local_enhancement_zero_init_is_noop():
    le = LocalEnhancement(8, 6, 4, 4)
    fmap = torch.randn(8, 8, 8)
    out, _ = local_enhancement(le, fmap, torch.randn(5, 6), Indicator(0, 0), BoundingBox(0.1, 0.1, 0.9, 0.9))
    assert torch.equal(out, fmap)


def test_without_modulation_equals_skipping_it():
    le = _le(modulation=True, seed=3)
    bare = LocalEnhancement(8, 6, 4, 4, modulation=False)
    bare.load_state_dict({k: v for k, v in le.state_dict().items() if not k.startswith("modulation.")})
    fmap, local = torch.randn(8, 8, 8), torch.randn(5, 6)
    box = BoundingBox(0.2, 0.1, 0.9, 0.6)
    a, _ = local_enhancement(le, fmap, local, Indicator(1, 0), box, with_modulation=False)
    b, _ = local_enhancement(bare, fmap, local, Indicator(1, 0), box)
    assert torch.equal(a, b)
    c, _ = local_enhancement(le, fmap, local, Indicator(1, 0), box)
    assert not torch.equal(a, c)


# ---------------------------------------------------------------------------
# global fusion
# ---------------------------------------------------------------------------


def test_global_fusion_identity_at_init():
    gf = GlobalFusion(8, 5)
    tok = torch.randn(12, 8)
    assert torch.equal(global_fusion(gf, tok, torch.randn(5)), tok)


def test_global_fusion_context_length_one_and_null_substitution():
    gf = _randomize(GlobalFusion(8, 5), 1)
    tok = torch.randn(12, 8)
    null = torch.randn(5)
    _, w = gf.attn(gf.norm(tok[None]), null.reshape(1, 1, 5))
    assert tuple(w.shape) == (1, 12, 1)
    emb = ForegroundEmbeddings(torch.randn(1, 5), torch.randn(1, 3, 4))
    dropped = emb.with_null(null, torch.tensor([True]))
    assert torch.equal(gf(tok[None], dropped.context())[0], global_fusion(gf, tok, null))


# ---------------------------------------------------------------------------
# U-Net
# ---------------------------------------------------------------------------


def _unet_case(ablation, seed=0):
    cfg = tiny_config(ablation)
    unet = _randomize(UNet(cfg.generator), seed, 0.2)
    g = torch.Generator().manual_seed(seed + 1)
    z = torch.randn(2, 4, 8, 8, generator=g)
    bg = torch.randn(2, 4, 8, 8, generator=g)
    boxes = [BoundingBox(0.25, 0.25, 0.75, 0.75), BoundingBox(0.0, 0.5, 0.5, 1.0)]
    inp = assemble_input(z, bg, boxes, [Indicator(1, 0), Indicator(0, 1)], torch.tensor([10, 500]))
    n_tok = 1 + 16 if Ablation(ablation).all_tokens else 1
    tokens = torch.randn(2, n_tok, 32, generator=g) if n_tok > 1 else None
    emb = ForegroundEmbeddings(torch.randn(2, 32, generator=g), torch.randn(2, 16, 32, generator=g), tokens=tokens)
    return unet, inp, emb, boxes


@pytest.mark.parametrize("ablation", [a.value for a in Ablation])
def test_unet_output_shape(ablation):
    unet, inp, emb, boxes = _unet_case(ablation)
    out = unet_forward(unet, inp, emb, boxes)
    assert tuple(out.shape) == (2, 4, 8, 8)


def test_unet_unbatched_input():
    unet, inp, emb, boxes = _unet_case("full")
    single = assemble_input(inp.z_t[0], inp.bg_latent[0], boxes[0], Indicator(1, 0), 10)
    one = ForegroundEmbeddings(emb.global_embedding[0], emb.local_embeddings[0], torch.tensor(False))
    out = unet_forward(unet, single, one, boxes[0])
    assert tuple(out.shape) == (4, 8, 8)
    batched = unet_forward(unet, inp, emb, boxes)
    assert torch.allclose(out, batched[0], atol=1e-12)


def test_global_only_class_ignores_local_embeddings():
    unet, inp, emb, boxes = _unet_case("global_only_class")
    a = unet_forward(unet, inp, emb, boxes)
    emb2 = ForegroundEmbeddings(emb.global_embedding, emb.local_embeddings + torch.randn_like(emb.local_embeddings))
    assert torch.equal(a, unet_forward(unet, inp, emb2, boxes))


def test_full_model_depends_on_local_embeddings():
    unet, inp, emb, boxes = _unet_case("full")
    a = unet_forward(unet, inp, emb, boxes)
    emb2 = ForegroundEmbeddings(emb.global_embedding, emb.local_embeddings + torch.randn_like(emb.local_embeddings))
    b = unet_forward(unet, inp, emb2, boxes)
    m = inp.mask_ds.bool().expand_as(a)
    assert not torch.equal(a[m], b[m])


def test_indicator_changes_output():
    unet, inp, emb, boxes = _unet_case("full")
    a = unet_forward(unet, inp, emb, boxes)
    inp2 = assemble_input(inp.z_t, inp.bg_latent, boxes, [Indicator(0, 0), Indicator(1, 1)], inp.t)
    assert torch.linalg.vector_norm(a - unet_forward(unet, inp2, emb, boxes)) > 0


def test_fresh_unet_predicts_zero():
    cfg = tiny_config()
    unet = UNet(cfg.generator)
    _, inp, emb, boxes = _unet_case("full")
    assert torch.equal(unet_forward(unet, inp, emb, boxes), torch.zeros(2, 4, 8, 8))


# ---------------------------------------------------------------------------
# parameter census
# ---------------------------------------------------------------------------


def test_ablation_lattice_strictly_nested():
    base = tiny_config().generator
    counts = {a: count_parameters(GeneratorConfig.from_dict({**base.to_dict(), "ablation": a.value})) for a in Ablation}
    assert counts[Ablation.GLOBAL_CLASS] < counts[Ablation.LE_NO_FM] < counts[Ablation.FULL]
    assert counts[Ablation.GLOBAL_CLASS] == counts[Ablation.AUG] == counts[Ablation.GLOBAL_ALL_TOKENS]


def test_zero_depth_config_has_only_stem_and_head():
    cfg = GeneratorConfig(latent_size=8, channel_multipliers=(), attention_resolutions=(), le_resolutions=())
    census = parameter_census(UNet(cfg))
    assert set(census) == {"time_embed", "conv_in", "norm_out", "conv_out"}


def test_census_matches_checkpoint_tensors(tmp_path):
    from compdiff.model import CompositionModel, load_checkpoint, save_checkpoint
    from compdiff.numerics import load_tensor_map

    model = CompositionModel(tiny_config())
    save_checkpoint(model, tmp_path)
    tensors = load_tensor_map(tmp_path / "weights.cctm")
    total = sum(v.numel() for k, v in tensors.items() if k.startswith("model.unet."))
    assert total == count_parameters(model.cfg.generator) == sum(parameter_census(model.unet).values())
    assert isinstance(load_checkpoint(tmp_path), CompositionModel)


def _conv_params(cfg, backbone_only=False):
    unet = UNet(cfg)
    total = 0
    for n, p in unet.named_parameters():
        if not (n.endswith("weight") and p.dim() == 4) or n in ("conv_in.weight", "conv_out.weight"):
            continue
        if backbone_only and ".le." in n:
            continue
        total += p.numel()
    return total


def test_doubling_base_channels_quadruples_conv_weights():
    small = GeneratorConfig(latent_size=8, base_channels=16, norm_groups=4, attention_resolutions=(8, 4),
                            le_resolutions=(8, 4), p=4)
    big = GeneratorConfig.from_dict({**small.to_dict(), "base_channels": 32})
    # resblock / transformer / resampling convs have both sides proportional to base_channels
    assert _conv_params(big, True) == 4 * _conv_params(small, True)
    # LE convs read a fixed local-embedding width, so the whole-model ratio sits a bit under 4
    assert 2.5 < _conv_params(big) / _conv_params(small) <= 4.0


def test_generator_config_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(le_resolutions=(4,))
    with pytest.raises(ConfigError):
        GeneratorConfig(p=1)
    with pytest.raises(ConfigError):
        GeneratorConfig(cfg_drop_prob=1.5)
    cfg = GeneratorConfig(ablation="+LE_no_FM")
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg
