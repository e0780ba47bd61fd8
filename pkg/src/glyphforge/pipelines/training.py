"""The three training stages on top of a GlyphGenerator.

Stage 1 trains the DiT and both glyph encoders with the rectified-flow loss.
Stage 2 trains only the perceiver resampler so condition embeddings land on
the frozen style embeddings. Stage 3 first fine-tunes low-rank adapters on the
condition path (SFT) and then runs flow-DPO against a frozen copy of the SFT
model using win/lose pairs ranked by a scorer.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..errors import ConfigurationError, ContractError, DatasetLoadError, PreconditionError
from ..generator import GlyphGenerator
from ..glyph_synth import GlyphTriplet, ShardSample, blend_alpha
from ..layout import BBox
from ..encoders import ConditionInput, MLLMClient
from ..nn_common import parameter_checksum
from ..objectives import align_loss, dpo_loss, dpo_weight, per_sample_mse, rf_loss, rf_make_sample
from ..tvae import blend_tensor, train_transparency_decoder, warmup_autoencoder
from .sampling import Conditions, SamplerConfig, sample_rf

log = logging.getLogger(__name__)

STAGES = ("1", "2", "3-sft", "3-dpo")
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class StageConfig:
    stage: str = "1"
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    seed: int = 0
    cond_dropout: float = 0.1
    k_candidates: int = 4
    scorer: str = "neg-mse"
    candidate_steps: int = 8
    adapter_rank: int = 8
    dpo_beta: float = 500.0
    dpo_weighting: str = "constant"
    grad_clip: float = 1.0

    def __post_init__(self):
        self.stage = str(self.stage)
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.stage == "1" and not 0.0 <= self.cond_dropout <= 1.0:
            raise ConfigurationError("cond_dropout must lie in [0, 1]")
        if self.stage == "3-dpo" and self.k_candidates < 2:
            raise ConfigurationError("DPO needs at least two candidates per prompt")
        if self.stage.startswith("3") and self.adapter_rank < 1:
            raise ConfigurationError("adapter_rank must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossCurve:
    losses: list[float] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss"])
            for i, v in enumerate(self.losses):
                w.writerow([i, repr(v)])
        return path

    @property
    def final(self) -> float:
        return self.losses[-1] if self.losses else math.nan


def _optimizer(params, cfg: StageConfig):
    opt = torch.optim.Adam(params, lr=cfg.lr)
    if cfg.lr_schedule == "cosine" and cfg.steps > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
    return opt, sched


def _step(opt, sched, loss, params, clip: float) -> None:
    opt.zero_grad()
    loss.backward()
    if clip > 0:
        torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()
    sched.step()


# ---------------------------------------------------------------------------
# data


def _stack(glyphs, dtype) -> torch.Tensor:
    arr = np.stack([g.pixels for g in glyphs]).transpose(0, 3, 1, 2)
    return torch.as_tensor(np.ascontiguousarray(arr), dtype=dtype)


@dataclass
class TripletBucket:
    content: torch.Tensor  # (N, n, 4, H, W)
    style: torch.Tensor  # (N, m, 4, H, W)
    target: torch.Tensor  # (N, n, 4, H, W)
    latents: torch.Tensor | None = None  # (N, n, c, s, s)

    def __len__(self) -> int:
        return self.content.shape[0]

    def take(self, idx: torch.Tensor) -> "TripletBucket":
        lat = self.latents[idx] if self.latents is not None else None
        return TripletBucket(self.content[idx], self.style[idx], self.target[idx], lat)


class TripletBank:
    """Triplets grouped by (glyph count, reference count) so each batch stacks cleanly."""

    def __init__(self, triplets: Sequence[GlyphTriplet], dtype=torch.float32):
        if not triplets:
            raise DatasetLoadError("dataset is empty")
        groups: dict[tuple[int, int], list[GlyphTriplet]] = {}
        res = triplets[0].ground_truth[0].resolution
        for t in triplets:
            if t.ground_truth[0].resolution != res:
                raise DatasetLoadError("all glyphs in a dataset must share one resolution")
            groups.setdefault((len(t.ground_truth), len(t.style_refs)), []).append(t)
        self.resolution = res
        self.keys = sorted(groups)
        self.buckets = {
            k: TripletBucket(
                torch.stack([_stack(t.content_refs, dtype) for t in g]),
                torch.stack([_stack(t.style_refs, dtype) for t in g]),
                torch.stack([_stack(t.ground_truth, dtype) for t in g]),
            )
            for k, g in ((k, groups[k]) for k in self.keys)
        }
        self.weights = np.array([len(self.buckets[k]) for k in self.keys], dtype=np.float64)
        self.weights /= self.weights.sum()

    @classmethod
    def from_samples(cls, samples: Sequence[ShardSample], split: str | None = "train", dtype=torch.float32):
        chosen = [s.triplet for s in samples if split is None or s.split == split]
        return cls(chosen, dtype)

    def __len__(self) -> int:
        return sum(len(b) for b in self.buckets.values())

    def all_targets(self) -> torch.Tensor:
        """Every ground-truth glyph flattened to (M, 4, H, W)."""
        return torch.cat([b.target.flatten(0, 1) for b in self.buckets.values()])

    @torch.no_grad()
    def attach_latents(self, model: GlyphGenerator) -> None:
        for b in self.buckets.values():
            flat = b.target.flatten(0, 1)
            z = model.vae.encode(blend_tensor(flat, model.vae.background))
            b.latents = z.view(*b.target.shape[:2], *z.shape[1:])

    def sample(self, batch_size: int, gen: torch.Generator) -> TripletBucket:
        u = float(torch.rand((), generator=gen, dtype=torch.float64))
        k = self.keys[min(int(np.searchsorted(np.cumsum(self.weights), u, side="right")), len(self.keys) - 1)]
        bucket = self.buckets[k]
        idx = torch.randint(len(bucket), (min(batch_size, len(bucket)),), generator=gen)
        return bucket.take(idx)


# ---------------------------------------------------------------------------
# transparency VAE preparation


def prepare_vae(model: GlyphGenerator, bank: TripletBank, warmup_steps: int = 800, decoder_steps: int = 1500,
                lr: float = 2e-3, seed: int = 0) -> tuple[list[float], list[float]]:
    """RGB warm-up of the autoencoder, then transparency-decoder training with the encoder frozen."""
    rgba = torch.unique(bank.all_targets(), dim=0)
    warm = warmup_autoencoder(model.vae, rgba, steps=warmup_steps, lr=lr, seed=seed)
    dec = train_transparency_decoder(model.vae, rgba, steps=decoder_steps, lr=lr, seed=seed)
    return warm.losses, dec.losses


# ---------------------------------------------------------------------------
# stage 1


def stage1_parameters(model: GlyphGenerator) -> list[torch.nn.Parameter]:
    return (
        list(model.dit.parameters())
        + list(model.content_encoder.parameters())
        + list(model.style_encoder.parameters())
    )


def stage1_loss(model: GlyphGenerator, batch: TripletBucket, gen: torch.Generator, drop_style: bool) -> torch.Tensor:
    x1 = batch.latents
    b = x1.shape[0]
    x0 = torch.randn(x1.shape, generator=gen, dtype=x1.dtype)
    t = torch.rand((b,), generator=gen, dtype=x1.dtype)
    sample = rf_make_sample(x0, x1, t)
    content = model.embed_content(batch.content)
    style = None if drop_style else model.embed_style(batch.style)
    return rf_loss(model.velocity(sample.x_t, t, content, style), sample)


def train_stage1(model: GlyphGenerator, bank: TripletBank, cfg: StageConfig,
                 callback: Callable[[int, float], None] | None = None) -> LossCurve:
    if cfg.stage != "1":
        raise ConfigurationError(f"train_stage1 got a stage {cfg.stage} config")
    if model.vae.latent_scale.item() == 1.0 and model.vae.latent_shift.item() == 0.0:
        log.warning("VAE latents are not calibrated; was prepare_vae run?")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    bank.attach_latents(model)
    params = stage1_parameters(model)
    opt, sched = _optimizer(params, cfg)
    model.train()
    curve = LossCurve()
    for step in range(cfg.steps):
        batch = bank.sample(cfg.batch_size, gen)
        drop = bool(torch.rand((), generator=gen) < cfg.cond_dropout)
        loss = stage1_loss(model, batch, gen, drop)
        _step(opt, sched, loss, params, cfg.grad_clip)
        curve.losses.append(float(loss.detach()))
        if callback is not None:
            callback(step, curve.losses[-1])
    model.eval()
    if cfg.cond_dropout > 0:
        model.supports_uncond.fill_(True)
    return curve


@torch.no_grad()
def evaluate_stage1(model: GlyphGenerator, bank: TripletBank, seed: int = 0, repeats: int = 4) -> float:
    """Mean rectified-flow loss over the whole bank with fixed noise and times."""
    gen = torch.Generator().manual_seed(seed)
    if any(b.latents is None for b in bank.buckets.values()):
        bank.attach_latents(model)
    total, count = 0.0, 0
    for _ in range(repeats):
        for b in bank.buckets.values():
            loss = stage1_loss(model, b, gen, drop_style=False)
            total += float(loss) * len(b)
            count += len(b)
    return total / count


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class AlignmentItem:
    condition: ConditionInput
    style_refs: torch.Tensor  # (m, 4, H, W) references whose style the condition should reproduce


def _resolve_checkpoint(model_or_path) -> GlyphGenerator:
    if isinstance(model_or_path, GlyphGenerator):
        return model_or_path
    path = Path(model_or_path) if model_or_path is not None else None
    if path is None or not path.exists():
        raise PreconditionError(f"stage-1 checkpoint not found: {model_or_path}")
    return GlyphGenerator.load(path)


def non_resampler_names(model: GlyphGenerator) -> list[str]:
    return [n for n, _ in model.named_parameters() if not n.startswith("condition_encoder.")]


def train_stage2(stage1, items: Sequence[AlignmentItem], cfg: StageConfig, mllm: MLLMClient,
                 callback: Callable[[int, float], None] | None = None) -> tuple[GlyphGenerator, LossCurve]:
    if cfg.stage != "2":
        raise ConfigurationError(f"train_stage2 got a stage {cfg.stage} config")
    model = _resolve_checkpoint(stage1)
    if not items:
        raise DatasetLoadError("alignment dataset is empty")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    enc = model.condition_encoder
    model.requires_grad_(False)
    enc.resampler.requires_grad_(True)
    model.eval()
    with torch.no_grad():
        tokens = [enc.mllm_tokens(it.condition, mllm) for it in items]
        targets = torch.cat([model.embed_style(it.style_refs[None].to(model.dtype)) for it in items])
    params = list(enc.resampler.parameters())
    opt, sched = _optimizer(params, cfg)
    curve = LossCurve()
    for step in range(cfg.steps):
        idx = torch.randint(len(items), (min(cfg.batch_size, len(items)),), generator=gen).tolist()
        pred = enc([tokens[i] for i in idx])
        loss = align_loss(pred, targets[idx])
        _step(opt, sched, loss, params, cfg.grad_clip)
        curve.losses.append(float(loss.detach()))
        if callback is not None:
            callback(step, curve.losses[-1])
    model.requires_grad_(True)
    return model, curve


@torch.no_grad()
def evaluate_alignment(model: GlyphGenerator, items: Sequence[AlignmentItem], mllm: MLLMClient) -> float:
    enc = model.condition_encoder
    pred = enc([enc.mllm_tokens(it.condition, mllm) for it in items])
    targets = torch.cat([model.embed_style(it.style_refs[None].to(model.dtype)) for it in items])
    return float(align_loss(pred, targets))


# ---------------------------------------------------------------------------
# stage 3


@dataclass
class PreferenceItem:
    """One Stage-3 prompt: glyph content and condition tokens plus the triplet it came from."""

    content: torch.Tensor  # (n, 4, H, W)
    style: torch.Tensor  # (m, 4, H, W)
    target: torch.Tensor  # (n, 4, H, W)
    tokens: torch.Tensor  # (k, mllm_dim)


def make_preference_items(triplets: Sequence[GlyphTriplet], conditions: Sequence[ConditionInput],
                          model: GlyphGenerator, mllm: MLLMClient) -> list[PreferenceItem]:
    if len(triplets) != len(conditions):
        raise ValueError("one condition per triplet is required")
    enc = model.condition_encoder
    dtype = model.dtype
    return [
        PreferenceItem(_stack(t.content_refs, dtype), _stack(t.style_refs, dtype), _stack(t.ground_truth, dtype),
                       enc.mllm_tokens(c, mllm))
        for t, c in zip(triplets, conditions)
    ]


def condition_embedding(model: GlyphGenerator, items: Sequence[PreferenceItem]) -> torch.Tensor:
    return model.condition_encoder([it.tokens for it in items])


def adapter_names(model: GlyphGenerator) -> list[str]:
    return [n for n, _ in model.named_parameters() if "lora_" in n]


def _ensure_adapters(model: GlyphGenerator, rank: int) -> None:
    if not adapter_names(model):
        model.enable_lora(rank)


def _group_items(items: Sequence[PreferenceItem]) -> list[list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i, it in enumerate(items):
        groups.setdefault((it.content.shape[0], it.style.shape[0]), []).append(i)
    return list(groups.values())


def train_stage3_sft(model: GlyphGenerator, items: Sequence[PreferenceItem], cfg: StageConfig,
                     callback: Callable[[int, float], None] | None = None) -> LossCurve:
    """Adapter-only fine-tuning of the condition-driven generator on ground-truth glyphs."""
    if cfg.stage != "3-sft":
        raise ConfigurationError(f"train_stage3_sft got a stage {cfg.stage} config")
    if not items:
        raise DatasetLoadError("stage-3 dataset is empty")
    _ensure_adapters(model, cfg.adapter_rank)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model.requires_grad_(False)
    params = model.lora_parameters()
    for p in params:
        p.requires_grad_(True)
    latents = _item_latents(model, items)
    groups = _group_items(items)
    opt, sched = _optimizer(params, cfg)
    curve = LossCurve()
    model.train()
    for step in range(cfg.steps):
        g = groups[int(torch.randint(len(groups), (1,), generator=gen))]
        pick = [g[i] for i in torch.randint(len(g), (min(cfg.batch_size, len(g)),), generator=gen).tolist()]
        batch = [items[i] for i in pick]
        x1 = torch.stack([latents[i] for i in pick])
        x0 = torch.randn(x1.shape, generator=gen, dtype=x1.dtype)
        t = torch.rand((x1.shape[0],), generator=gen, dtype=x1.dtype)
        sample = rf_make_sample(x0, x1, t)
        with torch.no_grad():
            content = model.embed_content(torch.stack([it.content for it in batch]))
            cond = condition_embedding(model, batch)
        loss = rf_loss(model.velocity(sample.x_t, t, content, cond), sample)
        _step(opt, sched, loss, params, cfg.grad_clip)
        curve.losses.append(float(loss.detach()))
        if callback is not None:
            callback(step, curve.losses[-1])
    model.eval()
    model.requires_grad_(True)
    return curve


@torch.no_grad()
def _item_latents(model: GlyphGenerator, items: Sequence[PreferenceItem]) -> list[torch.Tensor]:
    return [model.vae.encode(blend_tensor(it.target, model.vae.background)) for it in items]


@dataclass
class PreferencePair:
    item: int
    win: torch.Tensor  # (n, c, s, s) latents
    lose: torch.Tensor
    win_score: float
    lose_score: float


def neg_mse_scorer(candidate: np.ndarray, reference: np.ndarray) -> float:
    """Higher is better: negative per-pixel RGBA MSE to the ground truth."""
    return -float(np.mean((np.asarray(candidate) - np.asarray(reference)) ** 2))


SCORERS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {"neg-mse": neg_mse_scorer}


@dataclass
class PairBuildLog:
    skipped: list[dict] = field(default_factory=list)


@torch.no_grad()
def build_preference_pairs(model: GlyphGenerator, items: Sequence[PreferenceItem], k: int, sampler_steps: int,
                           seed: int, scorer: Callable[[np.ndarray, np.ndarray], float] = neg_mse_scorer,
                           report: PairBuildLog | None = None) -> list[PreferencePair]:
    """Samples k candidates per item with the condition path, ranks them, keeps (best, worst)."""
    pairs = []
    for i, it in enumerate(items):
        content = model.embed_content(it.content[None])
        cond = condition_embedding(model, [it])
        cands, scores = [], []
        for j in range(k):
            z = sample_rf(model, Conditions(content, cond), SamplerConfig(sampler_steps, 1.0, seed * 100_003 + i * 101 + j))
            rgba = model.decode(z)[0]
            try:
                s = float(scorer(rgba.numpy(), it.target.numpy()))
                if not math.isfinite(s):
                    raise ValueError(f"non-finite score {s}")
            except Exception as e:
                if report is not None:
                    report.skipped.append({"item": i, "candidate": j, "error": str(e)})
                log.warning("scorer failed on item %d candidate %d: %s", i, j, e)
                continue
            cands.append(z[0])
            scores.append(s)
        if len(cands) < 2:
            if report is not None:
                report.skipped.append({"item": i, "candidate": None, "error": "fewer than two scored candidates"})
            continue
        order = np.argsort(scores, kind="stable")
        lo, hi = int(order[0]), int(order[-1])
        if scores[hi] == scores[lo]:
            continue
        pairs.append(PreferencePair(i, cands[hi], cands[lo], scores[hi], scores[lo]))
    return pairs


def _pair_errors(model: GlyphGenerator, items, pairs: Sequence[PreferencePair], x0, t):
    batch = [items[p.item] for p in pairs]
    content = model.embed_content(torch.stack([it.content for it in batch]))
    cond = condition_embedding(model, batch)
    errs = []
    for x1 in (torch.stack([p.win for p in pairs]), torch.stack([p.lose for p in pairs])):
        s = rf_make_sample(x0, x1, t)
        errs.append(per_sample_mse(model.velocity(s.x_t, t, content, cond), s.v_t))
    return errs[0], errs[1]


def train_stage3_dpo(model: GlyphGenerator, items: Sequence[PreferenceItem], pairs: Sequence[PreferencePair],
                     cfg: StageConfig, reference: GlyphGenerator | None = None,
                     callback: Callable[[int, float], None] | None = None) -> LossCurve:
    """Flow-DPO on adapter parameters; the reference is a frozen copy of the SFT model."""
    if cfg.stage != "3-dpo":
        raise ConfigurationError(f"train_stage3_dpo got a stage {cfg.stage} config")
    if not pairs:
        raise DatasetLoadError("no preference pairs to train on")
    if not adapter_names(model):
        raise PreconditionError("DPO starts from an SFT model with adapters attached")
    if reference is None:
        reference = copy.deepcopy(model)
    reference.eval().requires_grad_(False)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model.requires_grad_(False)
    params = model.lora_parameters()
    for p in params:
        p.requires_grad_(True)
    opt, sched = _optimizer(params, cfg)
    groups: dict[tuple, list[int]] = {}
    for j, p in enumerate(pairs):
        groups.setdefault(tuple(p.win.shape), []).append(j)
    keys = sorted(groups)
    curve = LossCurve()
    for step in range(cfg.steps):
        g = groups[keys[int(torch.randint(len(keys), (1,), generator=gen))]]
        pick = [pairs[g[i]] for i in torch.randint(len(g), (min(cfg.batch_size, len(g)),), generator=gen).tolist()]
        shape = (len(pick),) + tuple(pick[0].win.shape)
        x0 = torch.randn(shape, generator=gen, dtype=model.dtype)
        # win and lose share the noise and the time within each pair
        t = torch.rand((len(pick),), generator=gen, dtype=model.dtype)
        e_w, e_l = _pair_errors(model, items, pick, x0, t)
        with torch.no_grad():
            r_w, r_l = _pair_errors(reference, items, pick, x0, t)
        w_t = dpo_weight(cfg.dpo_weighting, t, beta=cfg.dpo_beta)
        loss = dpo_loss((e_w, e_l), (r_w, r_l), w_t)
        _step(opt, sched, loss, params, cfg.grad_clip)
        curve.losses.append(float(loss.detach()))
        if callback is not None:
            callback(step, curve.losses[-1])
    model.eval()
    model.requires_grad_(True)
    return curve


@torch.no_grad()
def preference_margin(model: GlyphGenerator, items: Sequence[PreferenceItem], pairs: Sequence[PreferencePair],
                      seed: int = 0, repeats: int = 8, reference: GlyphGenerator | None = None) -> float:
    """Mean (lose-error - win-error) over pairs with fixed noise and times; positive favours winners.

    With a ``reference`` the reference's own margin is subtracted per draw, which
    is exactly zero when the model still equals the reference.
    """
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for _ in range(repeats):
        for p in pairs:
            x0 = torch.randn((1,) + tuple(p.win.shape), generator=gen, dtype=model.dtype)
            t = torch.rand((1,), generator=gen, dtype=model.dtype)
            e_w, e_l = _pair_errors(model, items, [p], x0, t)
            margin = float((e_l - e_w).sum())
            if reference is not None:
                r_w, r_l = _pair_errors(reference, items, [p], x0, t)
                margin -= float((r_l - r_w).sum())
            total += margin
            count += 1
    return total / max(count, 1)


def check_frozen(before: str, model: GlyphGenerator, names: list[str]) -> None:
    if parameter_checksum(model, names) != before:
        raise ContractError("parameters outside the trainable set changed")


# ---------------------------------------------------------------------------
# synthetic condition inputs


def style_swatch(triplet: GlyphTriplet, background: float = 0.5) -> np.ndarray:
    """The triplet's style references blended over gray and tiled left to right: (H, m*H, 3)."""
    return np.concatenate([blend_alpha(g, background) for g in triplet.style_refs], axis=1)


def condition_for_triplet(triplet: GlyphTriplet, caption: str = "a design with stylized lettering",
                          charset=None) -> ConditionInput:
    """Synthetic multi-modal condition: the swatch acts as the design background, the bbox covers it."""
    from ..glyph_synth import default_charset

    cs = charset or default_charset()
    swatch = style_swatch(triplet)
    h, w = swatch.shape[:2]
    text = "".join(cs.chars[c] for c in triplet.char_ids)
    return ConditionInput(swatch, caption, text, BBox(0, 0, w, h))


def alignment_items(triplets: Sequence[GlyphTriplet], model: GlyphGenerator) -> list[AlignmentItem]:
    return [AlignmentItem(condition_for_triplet(t), _stack(t.style_refs, model.dtype)) for t in triplets]
