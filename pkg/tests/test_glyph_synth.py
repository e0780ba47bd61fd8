import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glyphforge.errors import DatasetLoadError, DomainError
from glyphforge.glyph_synth import (
    NEUTRAL_STYLE,
    PerturbationConfig,
    RGBAGlyph,
    StyleSpec,
    blend_alpha,
    compose_triplet,
    default_charset,
    generate_samples,
    load_shard,
    load_shard_styles,
    make_style_bank,
    perturb_style_refs,
    render_glyph,
    write_shard,
)


def test_render_is_deterministic():
    a = render_glyph(0, StyleSpec(), 32)
    b = render_glyph(0, StyleSpec(), 32)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.pixels.shape == (32, 32, 4)


def test_thicker_stroke_covers_more_pixels():
    thin = render_glyph(0, StyleSpec(stroke_width=0.08), 32)
    thick = render_glyph(0, StyleSpec(stroke_width=0.16), 32)
    assert (thick.alpha > 0.5).sum() > (thin.alpha > 0.5).sum()


def test_fill_color_under_stroke():
    g = render_glyph(0, StyleSpec(fill_color=(1.0, 0.0, 0.0)), 32)
    solid = g.alpha > 0.9
    assert solid.any()
    assert np.allclose(g.rgb[solid], [1.0, 0.0, 0.0], atol=0.05)


def test_render_errors():
    with pytest.raises(DomainError):
        render_glyph(10_000, StyleSpec(), 32)
    with pytest.raises(ValueError):
        render_glyph(0, StyleSpec(), 4)


def test_style_spec_validation():
    with pytest.raises(ValueError):
        StyleSpec(stroke_width=0.0)
    with pytest.raises(ValueError):
        StyleSpec(slant=0.8)
    s = StyleSpec(style_id=3, family=2, slant=0.1, texture_id=1)
    assert StyleSpec.from_dict(s.to_dict()) == s


def test_glyph_invariants():
    with pytest.raises(ValueError):
        RGBAGlyph(np.full((8, 8, 4), 1.5), 0, 0)
    with pytest.raises(ValueError):
        RGBAGlyph(np.zeros((8, 8, 3)), 0, 0)


def test_compose_triplet_structure_and_determinism():
    style = make_style_bank(1, seed=3)[0]
    t1 = compose_triplet([3, 7], style, 2, rng_seed=0)
    t2 = compose_triplet([3, 7], style, 2, rng_seed=0)
    assert len(t1.content_refs) == 2 and len(t1.style_refs) == 2
    assert all(g.style_id == style.style_id for g in t1.ground_truth)
    assert all(c.style_id == NEUTRAL_STYLE.style_id for c in t1.content_refs)
    for a, b in zip(t1.ground_truth + t1.style_refs, t2.ground_truth + t2.style_refs):
        assert np.array_equal(a.pixels, b.pixels)


def test_style_refs_disjoint_from_content():
    style = make_style_bank(1)[0]
    t = compose_triplet([3], style, 4, rng_seed=1)
    assert 3 not in [g.char_id for g in t.style_refs]
    with pytest.raises(ValueError):
        compose_triplet([], style, 2, 0)
    with pytest.raises(ValueError):
        compose_triplet([1], style, 0, 0)


def test_triplet_rerender_matches_ground_truth():
    style = make_style_bank(2, seed=5)[1]
    t = compose_triplet([1, 2, 9], style, 2, rng_seed=4)
    for c, g in zip(t.content_refs, t.ground_truth):
        assert np.array_equal(render_glyph(c.char_id, style, 32).pixels, g.pixels)


def test_perturb_zero_probability_is_identity():
    glyphs = [render_glyph(i, make_style_bank(1)[0], 32) for i in range(3)]
    out = perturb_style_refs(glyphs, PerturbationConfig(per_op_probability=0.0), rng_seed=9)
    for a, b in zip(glyphs, out):
        assert np.array_equal(a.pixels, b.pixels)


def test_perturb_noise_changes_and_clamps():
    g = render_glyph(0, StyleSpec(fill_color=(0.5, 0.5, 0.5)), 32)
    cfg = PerturbationConfig(noise_std_range=(0.1, 0.1), per_op_probability=1.0, ops=("noise",))
    out = perturb_style_refs([g], cfg, 0)[0]
    assert np.abs(out.pixels - g.pixels).mean() > 0
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1


def _tv(img):
    return np.abs(np.diff(img, axis=0)).sum() + np.abs(np.diff(img, axis=1)).sum()


def test_blur_reduces_total_variation():
    # a textured fill gives the RGB channels structure for the blur to smooth
    g = render_glyph(5, StyleSpec(fill_color=(0.9, 0.1, 0.3), texture_id=2), 32)
    cfg = PerturbationConfig(blur_sigma_range=(2.0, 2.0), per_op_probability=1.0, ops=("blur",))
    out = perturb_style_refs([g], cfg, 0)[0]
    assert _tv(out.rgb) < _tv(g.rgb)


def test_perturbation_config_validation():
    with pytest.raises(ValueError):
        PerturbationConfig(blur_sigma_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        PerturbationConfig(downsample_factors=(0,))
    with pytest.raises(ValueError):
        PerturbationConfig(per_op_probability=1.5)
    with pytest.raises(ValueError):
        PerturbationConfig(ops=("smear",))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), p=st.floats(0, 1), char=st.integers(0, 63))
def test_perturbation_preserves_shape_and_range(seed, p, char):
    g = render_glyph(char, make_style_bank(1, seed=seed % 7)[0], 16)
    out = perturb_style_refs([g], PerturbationConfig(per_op_probability=p), seed)[0]
    assert out.pixels.shape == g.pixels.shape
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1


def test_blend_alpha_cases():
    px = np.zeros((2, 2, 4))
    px[..., :3] = (0.8, 0.2, 0.0)
    px[..., 3] = 0.5
    g = RGBAGlyph(px, 0, 0)
    assert np.allclose(blend_alpha(g, 0.0), [0.4, 0.1, 0.0])
    opaque = RGBAGlyph(np.concatenate([np.full((2, 2, 3), 0.3), np.ones((2, 2, 1))], -1), 0, 0)
    assert np.array_equal(blend_alpha(opaque, 0.5), opaque.rgb)
    clear = RGBAGlyph(np.zeros((2, 2, 4)), 0, 0)
    assert np.array_equal(blend_alpha(clear, 0.5), np.full((2, 2, 3), 0.5))
    with pytest.raises(ValueError):
        blend_alpha(g, 1.5)


@settings(max_examples=25, deadline=None)
@given(char=st.integers(0, 63), seed=st.integers(0, 1000))
def test_strict_blend_is_premultiplied_rgb(char, seed):
    g = render_glyph(char, make_style_bank(1, seed=seed)[0], 16)
    assert np.array_equal(blend_alpha(g, 0.0), g.alpha[..., None] * g.rgb)


def test_charset_registry():
    cs = default_charset()
    assert len(cs) == 64
    assert cs.encode("Ab1") == [cs.id_of("A"), cs.id_of("b"), cs.id_of("1")]
    with pytest.raises(DomainError):
        cs.encode("~")


def test_shard_roundtrip(tmp_path):
    samples, styles = generate_samples(6, resolution=16, seed=2, num_styles=3)
    write_shard(samples, tmp_path, styles)
    loaded = load_shard(tmp_path)
    assert [s.sample_id for s in loaded] == [s.sample_id for s in samples]
    for a, b in zip(samples, loaded):
        assert a.triplet.char_ids == b.triplet.char_ids
        assert a.split == b.split
        assert np.allclose(a.triplet.ground_truth[0].pixels, b.triplet.ground_truth[0].pixels, atol=1e-6)
    assert load_shard_styles(tmp_path) == styles


def test_shard_schema_mismatch(tmp_path):
    samples, styles = generate_samples(2, resolution=16, seed=0)
    write_shard(samples, tmp_path, styles)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["schema_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetLoadError):
        load_shard(tmp_path)
    with pytest.raises(DatasetLoadError):
        load_shard(tmp_path / "missing")
