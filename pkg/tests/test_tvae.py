import pytest
import torch

from glyphforge.errors import ContractError
from glyphforge.glyph_synth import make_style_bank, render_glyph
from glyphforge.encoders import glyphs_to_tensor
from glyphforge.nn_common import parameter_checksum
from glyphforge.objectives import RandomConvPerceptual
from glyphforge.tvae import (
    DecoderConfig,
    TransparencyVAE,
    blend_tensor,
    train_transparency_decoder,
    tvae_train_step,
    warmup_autoencoder,
)

SMALL = DecoderConfig(resolution=16, latent_channels=4, up_channels=(16, 8), encoder_channels=(8, 16))


def _rgba(n=8, res=16):
    styles = make_style_bank(2, seed=0)
    return glyphs_to_tensor([render_glyph(i % 10, styles[i % 2], res) for i in range(n)])


def test_config_geometry_and_validation():
    assert SMALL.factor == 4 and SMALL.latent_side == 4
    with pytest.raises(ValueError):
        DecoderConfig(up_channels=())
    with pytest.raises(ValueError):
        DecoderConfig(up_channels=(8, 8), encoder_channels=(8,))


def test_shapes_and_alpha_range():
    torch.manual_seed(0)
    vae = TransparencyVAE(SMALL)
    x = _rgba(3)
    z = vae.encode(blend_tensor(x))
    assert z.shape == (3, 4, 4, 4)
    out = vae.decode_rgba(torch.randn(5, 4, 4, 4) * 10)
    assert out.shape == (5, 4, 16, 16)
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        vae.encode(x)
    with pytest.raises(ValueError):
        vae.decode_rgba(torch.zeros(1, 4, 2, 2))


def test_blend_tensor():
    x = torch.zeros(1, 4, 2, 2)
    x[:, 0] = 1.0
    x[:, 3] = 0.5
    out = blend_tensor(x, 0.5)
    assert torch.allclose(out[:, 0], torch.full((1, 2, 2), 0.75))
    assert torch.allclose(out[:, 1], torch.full((1, 2, 2), 0.25))


def test_alpha_taps_do_not_change_rgb():
    torch.manual_seed(1)
    vae = TransparencyVAE(SMALL)
    z = torch.randn(2, 4, 4, 4)
    full = vae.decoder(z)
    assert torch.equal(full[:, :3], vae.decoder(z, with_alpha=False))


def test_decoder_step_requires_frozen_encoder():
    vae = TransparencyVAE(SMALL)
    opt = torch.optim.Adam(vae.decoder.parameters())
    with pytest.raises(ContractError):
        tvae_train_step(vae, _rgba(2), opt, RandomConvPerceptual(4))


def test_training_reduces_loss_and_keeps_encoder_bitwise():
    torch.manual_seed(0)
    vae = TransparencyVAE(SMALL)
    data = _rgba(8)
    warm = warmup_autoencoder(vae, data, steps=60, batch_size=8)
    assert warm.losses[-1] < warm.losses[0]
    enc_sum = parameter_checksum(vae.encoder)
    log = train_transparency_decoder(vae, data, steps=60, batch_size=8)
    assert log.losses[-1] < log.losses[0]
    assert parameter_checksum(vae.encoder) == enc_sum
    assert vae.encoder_frozen


def test_calibration_standardizes_latents():
    torch.manual_seed(0)
    vae = TransparencyVAE(SMALL)
    blended = blend_tensor(_rgba(8))
    vae.calibrate(blended)
    with torch.no_grad():
        z = vae.encode(blended)
    assert abs(float(z.mean())) < 1e-5
    assert abs(float(z.std()) - 1.0) < 1e-4
