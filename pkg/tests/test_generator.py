import pytest
import torch

from glyphforge.checkpoint import load_checkpoint, save_checkpoint
from glyphforge.dit import ModelConfig
from glyphforge.encoders import EncoderConfig
from glyphforge.generator import GeneratorConfig, GlyphGenerator, toy_config
from glyphforge.glyph_synth import StyleSpec, render_glyph
from glyphforge.tvae import DecoderConfig


def tiny_config():
    return toy_config(dim=16, heads=2, fusion_depth=1, single_depth=1, resolution=16, mllm_dim=8)


def test_toy_config_consistent():
    cfg = toy_config()
    assert cfg.model.latent_side == cfg.vae.latent_side == 4
    assert cfg.encoder.resolution // cfg.encoder.patch == 4
    assert GeneratorConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_config_mismatches_rejected():
    vae = DecoderConfig(resolution=32)
    with pytest.raises(ValueError):
        GeneratorConfig(ModelConfig(latent_side=2), EncoderConfig(), vae)
    with pytest.raises(ValueError):
        GeneratorConfig(ModelConfig(latent_channels=3), EncoderConfig(), vae)
    with pytest.raises(ValueError):
        GeneratorConfig(ModelConfig(), EncoderConfig(patch=4), vae)
    with pytest.raises(ValueError):
        GeneratorConfig(ModelConfig(dim=64, cond_dim=64), EncoderConfig(), vae)


def test_forward_path_shapes():
    torch.manual_seed(0)
    cfg = tiny_config()
    model = GlyphGenerator(cfg)
    side, ch = cfg.vae.latent_side, cfg.vae.latent_channels
    glyphs = [render_glyph(i, StyleSpec(), 16) for i in range(3)]
    c = model.embed_content_glyphs(glyphs[:2])
    s = model.embed_style_glyphs(glyphs[2:])
    x = torch.randn(1, 2, ch, side, side)
    v = model.velocity(x, torch.tensor([0.3]), c, s)
    assert v.shape == x.shape
    assert model.decode(x).shape == (1, 2, 4, 16, 16)


def test_lora_enable_once():
    model = GlyphGenerator(tiny_config())
    names = model.enable_lora(4)
    assert len(names) > 0 and model.lora_parameters()
    with pytest.raises(RuntimeError):
        model.enable_lora(4)


def test_save_load_roundtrip(tmp_path):
    torch.manual_seed(0)
    model = GlyphGenerator(tiny_config())
    model.enable_lora(2)
    model.supports_uncond.fill_(True)
    path = model.save(tmp_path / "m.pt", {"stage": "1"})
    loaded = GlyphGenerator.load(path)
    for (na, a), (nb, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert na == nb and torch.equal(a, b)
    assert bool(loaded.supports_uncond)
    assert load_checkpoint(path)["meta"] == {"stage": "1"}


def test_checkpoint_format_errors(tmp_path):
    p = tmp_path / "bad.pt"
    torch.save({"format": "other"}, p)
    with pytest.raises(ValueError):
        load_checkpoint(p)
    save_checkpoint(p, {"w": torch.ones(2)}, {})
    payload = torch.load(p, weights_only=True)
    payload["version"] = 99
    torch.save(payload, p)
    with pytest.raises(ValueError):
        load_checkpoint(p)
