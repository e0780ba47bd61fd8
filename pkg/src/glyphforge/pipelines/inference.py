"""Editing, layout-driven generation and text-to-design inference pipelines.

Images are float arrays in [0, 1] with shape (H, W, 3); foregrounds are
(H, W, 4) RGBA. Every pixel outside the glyph boxes (and, for editing, the
inpainted region) is copied from the input untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from ..encoders import CONDITION_PROMPT, ConditionInput, MLLMClient, encode_condition
from ..errors import PipelineError
from ..generator import GlyphGenerator
from ..glyph_synth import NEUTRAL_STYLE, CharacterSet, default_charset, render_glyph
from ..layout import BBox, Layout, LayoutItem, LayoutTask, Planner, plan_coarse, plan_fine
from .clients import CallRecorder, GradientT2I, Inpainter, MedianInpainter, TextToImage
from .sampling import Conditions, SamplerConfig, sample_rf


def alpha_over(background: np.ndarray, foreground: np.ndarray) -> np.ndarray:
    """Standard "over" operator of an RGBA foreground onto an opaque RGB background."""
    bg = np.asarray(background, dtype=np.float64)
    fg = np.asarray(foreground, dtype=np.float64)
    if fg.shape[:2] != bg.shape[:2] or fg.shape[-1] != 4 or bg.shape[-1] != 3:
        raise ValueError(f"cannot composite {fg.shape} over {bg.shape}")
    a = fg[..., 3:4]
    out = bg.copy()
    # only touch pixels with coverage so uncovered pixels stay bitwise identical
    m = a[..., 0] > 0
    out[m] = a[m] * fg[m, :3] + (1.0 - a[m]) * bg[m]
    return out


def merge_over(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """RGBA-over-RGBA (non-premultiplied): the single layer equivalent to ``lower`` then ``upper``."""
    lo = np.asarray(lower, dtype=np.float64)
    up = np.asarray(upper, dtype=np.float64)
    a_u, a_l = up[..., 3:4], lo[..., 3:4]
    a = a_u + a_l * (1.0 - a_u)
    premult = up[..., :3] * a_u + lo[..., :3] * a_l * (1.0 - a_u)
    rgb = np.divide(premult, a, out=np.zeros_like(premult), where=a > 0)
    return np.concatenate([rgb, a], axis=-1)


def resize_rgba(glyph: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of an (h, w, 4) float RGBA array, channel by channel."""
    chans = [
        np.asarray(Image.fromarray(np.ascontiguousarray(glyph[..., c], dtype=np.float32), mode="F")
                   .resize((width, height), Image.BILINEAR), dtype=np.float64)
        for c in range(glyph.shape[-1])
    ]
    return np.clip(np.stack(chans, -1), 0.0, 1.0)


def paste_glyphs(canvas_hw: tuple[int, int], glyphs: Sequence[np.ndarray], boxes: Sequence[BBox],
                 foreground: np.ndarray | None = None) -> np.ndarray:
    """Places resized RGBA glyphs into their boxes on an (H, W, 4) layer, merging in order."""
    h, w = canvas_hw
    fg = np.zeros((h, w, 4)) if foreground is None else foreground.copy()
    for g, b in zip(glyphs, boxes):
        if not b.within_canvas(w, h):
            raise ValueError(f"glyph box {b.as_list()} leaves the {w}x{h} canvas")
        tile = resize_rgba(g, b.width, b.height)
        region = fg[b.top:b.bottom, b.left:b.right]
        fg[b.top:b.bottom, b.left:b.right] = merge_over(region, tile)
    return fg


# ---------------------------------------------------------------------------
# glyph rendering backends


class GlyphRenderer:
    """Turns (characters, style tokens, seed) into RGBA glyphs with a trained generator."""

    def __init__(self, model: GlyphGenerator, sampler: SamplerConfig = SamplerConfig(16, 1.0, 0),
                 charset: CharacterSet | None = None):
        self.model = model.eval()
        self.sampler = sampler
        self.charset = charset or default_charset()
        self.resolution = model.cfg.encoder.resolution

    def char_ids(self, text: str) -> list[int]:
        return self.charset.encode(text.replace(" ", ""))

    @torch.no_grad()
    def style_from_crop(self, crop: np.ndarray) -> torch.Tensor:
        """An opaque image crop used as a single style reference; returns (q, d)."""
        rgba = np.concatenate([resize_rgba(np.concatenate([crop, np.ones(crop.shape[:2] + (1,))], -1),
                                           self.resolution, self.resolution)[..., :3],
                               np.ones((self.resolution, self.resolution, 1))], -1)
        x = torch.as_tensor(rgba.transpose(2, 0, 1)[None, None].copy(), dtype=self.model.dtype)
        return self.model.embed_style(x)[0]

    @torch.no_grad()
    def style_from_condition(self, inp: ConditionInput, mllm: MLLMClient) -> torch.Tensor:
        return encode_condition(inp, mllm, self.model.condition_encoder)

    @torch.no_grad()
    def render(self, char_ids: Sequence[int], style: torch.Tensor, seed: int) -> list[np.ndarray]:
        content = [render_glyph(c, NEUTRAL_STYLE, self.resolution).pixels for c in char_ids]
        x = torch.as_tensor(np.stack(content).transpose(0, 3, 1, 2)[None].copy(), dtype=self.model.dtype)
        cond = Conditions(self.model.embed_content(x), style[None])
        sampler = SamplerConfig(self.sampler.steps, self.sampler.cfg_scale, seed)
        rgba = self.model.decode(sample_rf(self.model, cond, sampler))[0]
        return [g.permute(1, 2, 0).double().numpy() for g in rgba]


class BlankRenderer(GlyphRenderer):
    """Degenerate backend whose glyphs have zero alpha everywhere."""

    def render(self, char_ids, style, seed):
        return [np.zeros((self.resolution, self.resolution, 4)) for _ in char_ids]


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class TextItem:
    text: str
    bbox: BBox | None = None


@dataclass
class DesignCase:
    background: np.ndarray
    caption: str
    items: list[TextItem]
    style_region: BBox | None = None

    def __post_init__(self):
        h, w = self.background.shape[:2]
        for it in self.items:
            if it.bbox is not None and not it.bbox.within_canvas(w, h):
                raise ValueError(f"item box {it.bbox.as_list()} lies outside the {w}x{h} image")
        if self.style_region is not None and not self.style_region.within_canvas(w, h):
            raise ValueError("style region lies outside the image")


@dataclass
class PipelineResult:
    image: np.ndarray  # (H, W, 3)
    foreground: np.ndarray  # (H, W, 4)
    lines: Layout
    glyphs: list[Layout]
    calls: list[dict] = field(default_factory=list)
    background: np.ndarray | None = None

    def glyph_boxes(self) -> list[BBox]:
        return [b for lay in self.glyphs for b in lay.boxes]

    def report(self) -> dict:
        return {
            "size": list(self.image.shape[:2][::-1]),
            "lines": [{"label": it.label, "bbox": it.bbox.as_list()} for it in self.lines.items],
            "glyphs": [[{"label": it.label, "bbox": it.bbox.as_list()} for it in lay.items] for lay in self.glyphs],
            "calls": self.calls,
        }


class _Stages:
    """Runs named pipeline steps and re-raises failures with the step name attached."""

    def __call__(self, stage: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PipelineError:
            raise
        except Exception as e:
            raise PipelineError(f"{type(e).__name__}: {e}", stage) from e


def _check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ValueError("image values must be finite and lie in [0, 1]")
    return img


def _glyph_labels(text: str) -> list[str]:
    return [c for c in text if c != " "]


def edit_pipeline(image: np.ndarray, region: BBox, new_text: str, renderer: GlyphRenderer,
                  planner: Planner, inpainter: Inpainter | None = None, seed: int = 0,
                  recorder: CallRecorder | None = None) -> PipelineResult:
    """Replaces the text inside ``region`` with ``new_text`` in the style found there."""
    img = _check_image(image)
    h, w = img.shape[:2]
    if not region.within_canvas(w, h):
        raise ValueError(f"region {region.as_list()} lies outside the {w}x{h} image")
    labels = _glyph_labels(new_text)
    if not labels:
        raise ValueError("new_text must contain at least one glyph")
    recorder = recorder or CallRecorder()
    inpainter = recorder.wrap("inpainter", inpainter or MedianInpainter())
    planner = recorder.wrap("planner", planner)
    run = _Stages()

    crop = img[region.top:region.bottom, region.left:region.right]
    style = run("style", renderer.style_from_crop, crop)
    clean = run("inpaint", inpainter.inpaint, img, region)
    lines = Layout([LayoutItem(new_text, region)], (w, h))
    glyph_layout = run("plan", plan_fine, region, len(labels), planner, labels, (w, h))
    chars = run("content", renderer.char_ids, new_text)
    glyphs = run("generate", renderer.render, chars, style, seed)
    fg = run("composite", paste_glyphs, (h, w), glyphs, glyph_layout.boxes)
    out = run("composite", alpha_over, clean, fg)
    return PipelineResult(out, fg, lines, [glyph_layout], [r.to_dict() for r in recorder.records], clean)


def generate_pipeline(background: np.ndarray, caption: str, items: Sequence[TextItem], renderer: GlyphRenderer,
                      planner: Planner, mllm: MLLMClient, seed: int = 0,
                      recorder: CallRecorder | None = None) -> PipelineResult:
    """Coarse plan, per-line fine plan, condition-encoded generation, compositing in item order."""
    bg = _check_image(background)
    h, w = bg.shape[:2]
    if not items:
        raise ValueError("at least one text item is required")
    recorder = recorder or CallRecorder()
    planner = recorder.wrap("planner", planner)
    mllm = recorder.wrap("mllm", mllm)
    run = _Stages()

    texts = [it.text for it in items]
    if all(it.bbox is not None for it in items):
        lines = Layout([LayoutItem(it.text, it.bbox) for it in items], (w, h))
    else:
        lines = run("plan", plan_coarse, LayoutTask((w, h), texts, caption, "coarse"), planner)
        lines = Layout([LayoutItem(it.text, it.bbox if it.bbox is not None else ln.bbox)
                        for it, ln in zip(items, lines.items)], (w, h))
    fg = np.zeros((h, w, 4))
    glyph_layouts = []
    for i, line in enumerate(lines.items):
        labels = _glyph_labels(line.label)
        if not labels:
            raise PipelineError(f"item {i} has no glyphs", "plan")
        glyph_layout = run("plan", plan_fine, line.bbox, len(labels), planner, labels, (w, h))
        inp = run("condition", ConditionInput, bg, caption, line.label, line.bbox)
        style = run("condition", renderer.style_from_condition, inp, mllm)
        chars = run("content", renderer.char_ids, line.label)
        glyphs = run("generate", renderer.render, chars, style, seed * 1000 + i)
        fg = run("composite", paste_glyphs, (h, w), glyphs, glyph_layout.boxes, fg)
        glyph_layouts.append(glyph_layout)
    out = run("composite", alpha_over, bg, fg)
    return PipelineResult(out, fg, lines, glyph_layouts, [r.to_dict() for r in recorder.records], bg)


def t2d_pipeline(prompt: str, items: Sequence[TextItem], renderer: GlyphRenderer, planner: Planner,
                 mllm: MLLMClient, t2i: TextToImage | None = None, size: tuple[int, int] = (128, 128),
                 seed: int = 0, recorder: CallRecorder | None = None) -> PipelineResult:
    """Background from a text-to-image client, then generate_pipeline with the prompt as caption."""
    recorder = recorder or CallRecorder()
    t2i = recorder.wrap("t2i", t2i or GradientT2I())
    bg = _Stages()("t2i", t2i.generate, prompt, size, seed)
    return generate_pipeline(bg, prompt, items, renderer, planner, mllm, seed=seed, recorder=recorder)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


__all__ = [
    "CONDITION_PROMPT",
    "BlankRenderer",
    "DesignCase",
    "GlyphRenderer",
    "PipelineResult",
    "TextItem",
    "alpha_over",
    "edit_pipeline",
    "generate_pipeline",
    "merge_over",
    "paste_glyphs",
    "resize_rgba",
    "save_png",
    "t2d_pipeline",
    "to_uint8",
]
