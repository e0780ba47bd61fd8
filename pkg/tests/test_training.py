import math

import numpy as np
import pytest
import torch

from glyphforge.encoders import StubMLLM
from glyphforge.errors import ConfigurationError, DatasetLoadError, PreconditionError
from glyphforge.generator import GlyphGenerator, toy_config
from glyphforge.glyph_synth import compose_triplet, make_style_bank
from glyphforge.nn_common import parameter_checksum
from glyphforge.pipelines.training import (
    PairBuildLog,
    StageConfig,
    TripletBank,
    adapter_names,
    alignment_items,
    build_preference_pairs,
    condition_for_triplet,
    evaluate_alignment,
    evaluate_stage1,
    make_preference_items,
    non_resampler_names,
    preference_margin,
    stage1_parameters,
    train_stage1,
    train_stage2,
    train_stage3_dpo,
    train_stage3_sft,
)

RES = 16


def _model(seed=0):
    torch.manual_seed(seed)
    return GlyphGenerator(toy_config(dim=16, heads=2, fusion_depth=1, single_depth=1, resolution=RES, mllm_dim=8))


def _triplets(n_styles=2, chars=3):
    styles = make_style_bank(n_styles, seed=0)
    return [compose_triplet([c], s, 2, rng_seed=10 * s.style_id + c, resolution=RES)
            for s in styles for c in range(chars)]


@pytest.fixture(scope="module")
def stage1_model():
    model = _model()
    bank = TripletBank(_triplets())
    # an uncalibrated VAE is fine for plumbing checks
    train_stage1(model, bank, StageConfig(stage="1", steps=5, batch_size=4))
    return model


def test_stage_config_validation():
    with pytest.raises(ConfigurationError):
        StageConfig(stage="4")
    with pytest.raises(ConfigurationError):
        StageConfig(stage="1", cond_dropout=1.5)
    with pytest.raises(ConfigurationError):
        StageConfig(stage="3-dpo", k_candidates=1)
    with pytest.raises(ConfigurationError):
        StageConfig(lr_schedule="step")
    with pytest.raises(ConfigurationError):
        train_stage1(_model(), TripletBank(_triplets(1, 1)), StageConfig(stage="2"))


def test_bank_buckets_and_errors():
    trips = _triplets() + [compose_triplet([1, 2], make_style_bank(1)[0], 3, 0, resolution=RES)]
    bank = TripletBank(trips)
    assert bank.keys == [(1, 2), (2, 3)]
    assert len(bank) == 7
    assert bank.all_targets().shape == (8, 4, RES, RES)
    with pytest.raises(DatasetLoadError):
        TripletBank([])


def test_stage1_is_deterministic_and_learns():
    bank = TripletBank(_triplets())
    a, b = _model(), _model()
    ca = train_stage1(a, bank, StageConfig(stage="1", steps=40, batch_size=6, lr=3e-3))
    cb = train_stage1(b, bank, StageConfig(stage="1", steps=40, batch_size=6, lr=3e-3))
    assert ca.losses == cb.losses
    assert parameter_checksum(a) == parameter_checksum(b)
    assert np.mean(ca.losses[-10:]) < np.mean(ca.losses[:10])
    assert bool(a.supports_uncond)


def test_stage1_leaves_vae_untouched():
    model = _model()
    before = parameter_checksum(model.vae)
    train_stage1(model, TripletBank(_triplets()), StageConfig(stage="1", steps=3, batch_size=4))
    assert parameter_checksum(model.vae) == before
    names = {id(p) for p in stage1_parameters(model)}
    assert not any(id(p) in names for p in model.vae.parameters())


def test_full_dropout_never_uses_style():
    model = _model()
    calls = []
    orig = model.velocity

    def spy(x, t, c, s=None):
        calls.append(s is None)
        return orig(x, t, c, s)

    model.velocity = spy
    train_stage1(model, TripletBank(_triplets()), StageConfig(stage="1", steps=6, batch_size=4, cond_dropout=1.0))
    assert calls and all(calls)
    calls.clear()
    model2 = _model()
    orig2 = model2.velocity
    model2.velocity = lambda x, t, c, s=None: (calls.append(s is None), orig2(x, t, c, s))[1]
    train_stage1(model2, TripletBank(_triplets()), StageConfig(stage="1", steps=6, batch_size=4, cond_dropout=0.0))
    assert not any(calls) and not bool(model2.supports_uncond)


def test_evaluate_stage1_fixed_noise(stage1_model):
    bank = TripletBank(_triplets())
    assert evaluate_stage1(stage1_model, bank, seed=1) == evaluate_stage1(stage1_model, bank, seed=1)


def test_stage2_only_moves_resampler(stage1_model, tmp_path):
    path = stage1_model.save(tmp_path / "s1.pt")
    mllm = StubMLLM(hidden_dim=8)
    items = alignment_items(_triplets(), stage1_model)
    model = GlyphGenerator.load(path)
    frozen = parameter_checksum(model, non_resampler_names(model))
    before = evaluate_alignment(model, items, mllm)
    model, curve = train_stage2(path, items, StageConfig(stage="2", steps=60, batch_size=6, lr=1e-2), mllm)
    assert parameter_checksum(model, non_resampler_names(model)) == frozen
    assert evaluate_alignment(model, items, mllm) < before
    assert len(curve.losses) == 60


def test_stage2_preconditions(tmp_path):
    with pytest.raises(PreconditionError):
        train_stage2(tmp_path / "missing.pt", [1], StageConfig(stage="2"), StubMLLM(8))
    with pytest.raises(DatasetLoadError):
        train_stage2(_model(), [], StageConfig(stage="2"), StubMLLM(8))


def test_condition_for_triplet_covers_swatch():
    t = _triplets(1, 1)[0]
    cond = condition_for_triplet(t)
    h, w = cond.background.shape[:2]
    assert (h, w) == (RES, 2 * RES)
    assert cond.bbox.as_list() == [0, 0, w, h]


def _stage3(seed=0):
    model = _model(seed)
    trips = _triplets()
    mllm = StubMLLM(hidden_dim=8)
    items = make_preference_items(trips, [condition_for_triplet(t) for t in trips], model, mllm)
    return model, items


def test_sft_only_moves_adapters():
    model, items = _stage3()
    train_stage3_sft(model, items, StageConfig(stage="3-sft", steps=1, adapter_rank=2))
    names = adapter_names(model)
    assert names
    others = [n for n, _ in model.named_parameters() if n not in names]
    before = parameter_checksum(model, others)
    curve = train_stage3_sft(model, items, StageConfig(stage="3-sft", steps=10, batch_size=3, lr=1e-2, adapter_rank=2))
    assert parameter_checksum(model, others) == before
    assert all(math.isfinite(v) for v in curve.losses)


def test_pairs_and_dpo_first_loss_is_ln2():
    model, items = _stage3()
    train_stage3_sft(model, items, StageConfig(stage="3-sft", steps=2, adapter_rank=2))
    report = PairBuildLog()
    pairs = build_preference_pairs(model, items, k=3, sampler_steps=2, seed=0, report=report)
    assert pairs and all(p.win_score >= p.lose_score for p in pairs)
    assert build_preference_pairs(model, items, 3, 2, seed=0)[0].win.equal(pairs[0].win)
    curve = train_stage3_dpo(model, items, pairs, StageConfig(stage="3-dpo", steps=3, batch_size=4, lr=1e-3))
    assert abs(curve.losses[0] - math.log(2)) < 1e-6
    assert math.isfinite(preference_margin(model, items, pairs, repeats=1))


def test_scorer_failures_are_logged_and_skipped():
    model, items = _stage3()
    calls = {"n": 0}

    def flaky(cand, ref):
        calls["n"] += 1
        if calls["n"] % 2:
            raise RuntimeError("scorer down")
        return -float(np.mean((cand - ref) ** 2))

    report = PairBuildLog()
    pairs = build_preference_pairs(model, items[:2], k=4, sampler_steps=1, seed=0, scorer=flaky, report=report)
    assert len(pairs) == 2
    assert sum(1 for r in report.skipped if r["candidate"] is not None) == 4

    report = PairBuildLog()
    none = build_preference_pairs(model, items[:1], k=2, sampler_steps=1, seed=0,
                                  scorer=lambda a, b: float("nan"), report=report)
    assert none == [] and report.skipped[-1]["candidate"] is None


def test_dpo_preconditions():
    model, items = _stage3()
    with pytest.raises(DatasetLoadError):
        train_stage3_dpo(model, items, [], StageConfig(stage="3-dpo"))
    fake = build_preference_pairs(model, items[:1], 2, 1, 0)
    with pytest.raises(PreconditionError):
        train_stage3_dpo(model, items, fake, StageConfig(stage="3-dpo"))


def test_reference_margin_is_zero_for_identical_models():
    import copy

    model, items = _stage3()
    train_stage3_sft(model, items, StageConfig(stage="3-sft", steps=2, adapter_rank=2))
    pairs = build_preference_pairs(model, items, k=2, sampler_steps=1, seed=0)
    assert preference_margin(model, items, pairs, repeats=2, reference=copy.deepcopy(model)) == 0.0
