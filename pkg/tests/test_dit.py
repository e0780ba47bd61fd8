import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from glyphforge.dit import (
    CONTENT,
    NOISY,
    STYLE,
    GlyphDiT,
    ModelConfig,
    apply_rope3d,
    attach_lora,
    build_3d_grid,
    default_rope_split,
    dit_forward,
    rope_angles,
)
from glyphforge.errors import ContractError
from glyphforge.nn_common import LoRALinear, RMSNorm, parameter_checksum, timestep_features
from helpers import grad_rel_error

D = torch.float64
SPLIT = (4, 4, 8)


def _tiny_cfg(**kw):
    base = dict(dim=32, heads=2, fusion_depth=1, single_depth=1, latent_side=2, latent_channels=3)
    base.update(kw)
    return ModelConfig(**base)


def _inputs(cfg, b=2, n=2, q=3, dtype=D, seed=0):
    g = torch.Generator().manual_seed(seed)
    s, c = cfg.latent_side, cfg.latent_channels
    x = torch.randn(b, n, c, s, s, generator=g, dtype=dtype)
    content = torch.randn(b, n, s * s, cfg.cond_dim, generator=g, dtype=dtype)
    style = torch.randn(b, q, cfg.cond_dim, generator=g, dtype=dtype)
    t = torch.rand(b, generator=g, dtype=dtype)
    return x, t, content, style


def _randomize(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.2)
    return model


def test_default_split_and_validation():
    for hd in (8, 16, 32, 64):
        split = default_rope_split(hd)
        assert sum(split) == hd and all(v % 2 == 0 and v > 0 for v in split)
    with pytest.raises(ValueError):
        default_rope_split(7)
    with pytest.raises(ValueError):
        ModelConfig(dim=32, heads=2, rope_dim_split=(4, 4, 4))
    with pytest.raises(ValueError):
        ModelConfig(dim=30, heads=4)


def test_grid_layout():
    g = build_3d_grid(2, 2)
    assert g.tolist() == [
        [0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1],
        [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1],
    ]
    with pytest.raises(ValueError):
        build_3d_grid(0, 2)


def test_rope_zero_coordinates_identity():
    v = torch.randn(5, 2, 16, dtype=D)
    out = apply_rope3d(v, torch.zeros(5, 3, dtype=torch.long), SPLIT)
    assert torch.equal(out, v)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_rope_preserves_norm(seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(4, 2, 16, generator=g, dtype=D)
    coords = torch.randint(-20, 20, (4, 3), generator=g)
    out = apply_rope3d(v, coords, SPLIT)
    assert torch.allclose(out.norm(dim=-1), v.norm(dim=-1), rtol=0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_rope_relative_position(seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(1, 1, 16, generator=g, dtype=D)
    k = torch.randn(1, 1, 16, generator=g, dtype=D)
    p = torch.randint(-10, 10, (1, 3), generator=g)
    pk = torch.randint(-10, 10, (1, 3), generator=g)
    delta = torch.randint(-10, 10, (1, 3), generator=g)
    a = (apply_rope3d(q, p, SPLIT) * apply_rope3d(k, pk, SPLIT)).sum()
    b = (apply_rope3d(q, p + delta, SPLIT) * apply_rope3d(k, pk + delta, SPLIT)).sum()
    assert abs(float(a - b)) <= 1e-6


def test_rope_angle_bands():
    # a shift along one axis moves only that axis' band
    ang0 = rope_angles(torch.tensor([[0, 0, 0]]), SPLIT)
    ang1 = rope_angles(torch.tensor([[0, 3, 0]]), SPLIT)
    diff = (ang1 - ang0)[0]
    assert torch.all(diff[:2] == 0) and torch.all(diff[4:] == 0) and torch.all(diff[2:4] != 0)
    with pytest.raises(ValueError):
        apply_rope3d(torch.randn(2, 1, 16), torch.zeros(3, 3, dtype=torch.long), SPLIT)


def test_timestep_features_and_rmsnorm():
    f = timestep_features(torch.tensor([0.0], dtype=D), 8)
    assert torch.equal(f, torch.tensor([[1, 1, 1, 1, 0, 0, 0, 0]], dtype=D))
    x = torch.randn(3, 16, dtype=D)
    y = RMSNorm(16).double()(x)
    assert torch.allclose(y.pow(2).mean(-1), torch.ones(3, dtype=D), atol=1e-5)


def test_output_shape_and_zero_init():
    cfg = _tiny_cfg()
    model = GlyphDiT(cfg).double()
    x, t, content, style = _inputs(cfg)
    v = model(x, t, content, style)
    assert v.shape == x.shape
    # the output head starts at zero
    assert torch.equal(v, torch.zeros_like(v))


def test_sequence_tags_and_unconditional():
    cfg = _tiny_cfg()
    model = GlyphDiT(cfg).double()
    x, t, content, style = _inputs(cfg, n=3, q=5)
    seq = model.build_sequence(x, content, style)
    assert int(seq.mask(NOISY).sum()) == 12 and int(seq.mask(CONTENT).sum()) == 12
    assert int(seq.mask(STYLE).sum()) == 5 and not seq.unconditional
    seq = model.build_sequence(x, content, None)
    assert seq.unconditional and int(seq.mask(STYLE).sum()) == 0
    _randomize(model)
    assert model(x, t, content, None).shape == x.shape


def test_contract_errors():
    cfg = _tiny_cfg()
    model = GlyphDiT(cfg).double()
    x, t, content, style = _inputs(cfg)
    with pytest.raises(ContractError):
        model(x, t, content[:, :1], style)
    with pytest.raises(ContractError):
        model(x, t, content[:, :, :3], style)
    with pytest.raises(ContractError):
        model(x[:, :, :2], t, content, style)
    with pytest.raises(ContractError):
        model(x, t, content, style[:1])
    with pytest.raises(ValueError):
        model(x, torch.tensor([1.5, 0.2], dtype=D), content, style)


def test_glyph_order_equivariance_of_batch():
    cfg = _tiny_cfg()
    model = _randomize(GlyphDiT(cfg).double(), seed=2)
    x, t, content, style = _inputs(cfg, b=2)
    full = model(x, t, content, style)
    one = model(x[1:], t[1:], content[1:], style[1:])
    assert torch.allclose(full[1:], one, atol=1e-12)


def test_dit_forward_gradient():
    cfg = _tiny_cfg(dim=16, heads=2, latent_side=2, latent_channels=2)
    model = _randomize(GlyphDiT(cfg).double(), seed=1)
    x, t, content, style = _inputs(cfg, b=1, n=1, q=2)
    head = torch.randn_like(x)

    def scalar(xx):
        return (dit_forward(model, xx, t, content, style) * head).sum()

    assert grad_rel_error(scalar, x) < 1e-4


def test_lora_wraps_attention_and_starts_identical():
    cfg = _tiny_cfg()
    model = _randomize(GlyphDiT(cfg).double(), seed=3)
    x, t, content, style = _inputs(cfg)
    before = model(x, t, content, style)
    names = attach_lora(model, rank=4)
    assert names and all(n.split(".")[-1] in ("to_q", "to_k", "to_v", "to_out") for n in names)
    model.double()
    assert torch.allclose(model(x, t, content, style), before, atol=1e-12)


def test_lora_merge_matches():
    base = torch.nn.Linear(6, 5).double()
    lora = LoRALinear(base, rank=2)
    with torch.no_grad():
        lora.lora_b.normal_()
    x = torch.randn(3, 6, dtype=D)
    assert torch.allclose(lora(x), lora.merged()(x), atol=1e-12)
    assert not base.weight.requires_grad


def test_parameter_checksum_detects_change():
    m = torch.nn.Linear(3, 3)
    a = parameter_checksum(m)
    w = parameter_checksum(m, ["weight"])
    assert a == parameter_checksum(m)
    with torch.no_grad():
        m.bias[0] += 1e-7
    assert parameter_checksum(m) != a
    assert parameter_checksum(m, ["weight"]) == w


def test_config_roundtrip():
    cfg = _tiny_cfg(cond_dim=24)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
