"""Glyph content/style encoders, the normalized projector, and the multi-modal condition path.

The trunks are small patch transformers trained from scratch; anything mapping
(N, 4, H, W) glyph tensors to (N, p, d) tokens can be plugged in instead.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import TransportError
from .glyph_synth import RGBAGlyph
from .layout import BBox
from .nn_common import FeedForward, RMSNorm, attention, merge_heads, split_heads


def glyphs_to_tensor(glyphs: Sequence[RGBAGlyph], dtype=torch.float32) -> torch.Tensor:
    """Stacks glyphs into (N, 4, H, W)."""
    if not glyphs:
        raise ValueError("glyph list must not be empty")
    shapes = {g.pixels.shape for g in glyphs}
    if len(shapes) != 1:
        raise ValueError(f"mixed glyph resolutions {sorted(shapes)}")
    arr = np.stack([g.pixels for g in glyphs]).transpose(0, 3, 1, 2)
    return torch.as_tensor(arr, dtype=dtype)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, zero_out: bool = False):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.q_norm = RMSNorm(dim // heads)
        self.k_norm = RMSNorm(dim // heads)
        self.to_out = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, xq: torch.Tensor, xkv: torch.Tensor | None = None) -> torch.Tensor:
        xkv = xq if xkv is None else xkv
        q = self.q_norm(split_heads(self.to_q(xq), self.heads))
        k = self.k_norm(split_heads(self.to_k(xkv), self.heads))
        v = split_heads(self.to_v(xkv), self.heads)
        return self.to_out(merge_heads(attention(q, k, v)))


class TransformerBlock(nn.Module):
    """Pre-RMSNorm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = RMSNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = RMSNorm(dim)
        self.ffn = FeedForward(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class PatchTrunk(nn.Module):
    def __init__(self, dim: int, resolution: int, patch: int, depth: int = 2, heads: int = 4, in_channels: int = 4):
        super().__init__()
        if resolution % patch:
            raise ValueError("resolution must be divisible by patch size")
        self.resolution = resolution
        self.num_patches = (resolution // patch) ** 2
        self.embed = nn.Conv2d(in_channels, dim, patch, stride=patch)
        self.pos = nn.Parameter(torch.randn(self.num_patches, dim) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(depth))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValueError(f"expected {self.resolution}px glyphs, got {tuple(x.shape[-2:])}")
        # centre pixel values so empty glyph regions are not all-positive
        h = self.embed(x * 2 - 1).flatten(2).transpose(1, 2) + self.pos
        for blk in self.blocks:
            h = blk(h)
        return h


def unit_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


class NormalizedProjector(nn.Module):
    """Normalized transformer blocks followed by a linear map onto the unit sphere."""

    def __init__(self, dim: int, depth: int = 1, heads: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(depth))
        self.norm = RMSNorm(dim)
        self.out = nn.Linear(dim, dim)
        # a non-zero bias keeps the output direction defined for all-zero inputs
        nn.init.normal_(self.out.bias, std=0.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x)
        return unit_normalize(self.out(self.norm(x)))


def project_normalized(projector: NormalizedProjector, features: torch.Tensor) -> torch.Tensor:
    return projector(features)


@dataclass
class EncoderConfig:
    dim: int = 128
    resolution: int = 32
    patch: int = 8
    depth: int = 2
    heads: int = 4
    num_style_tokens: int = 8
    projector_depth: int = 1


class ContentEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = PatchTrunk(cfg.dim, cfg.resolution, cfg.patch, cfg.depth, cfg.heads)
        self.projector = NormalizedProjector(cfg.dim, cfg.projector_depth, cfg.heads)

    def forward(self, glyphs: torch.Tensor) -> torch.Tensor:
        """(B, n, 4, H, W) -> (B, n, p, d)."""
        b, n = glyphs.shape[:2]
        tokens = self.projector(self.trunk(glyphs.flatten(0, 1)))
        return tokens.view(b, n, *tokens.shape[1:])


class StyleEncoder(nn.Module):
    """Per-reference trunk, attention pooling to q tokens, mean over references, projection."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = PatchTrunk(cfg.dim, cfg.resolution, cfg.patch, cfg.depth, cfg.heads)
        self.pool_queries = nn.Parameter(torch.randn(cfg.num_style_tokens, cfg.dim) * 0.02)
        self.pool = SelfAttention(cfg.dim, cfg.heads)
        self.projector = NormalizedProjector(cfg.dim, cfg.projector_depth, cfg.heads)

    def per_reference(self, refs: torch.Tensor) -> torch.Tensor:
        """(B, m, 4, H, W) -> (B, m, q, d) pooled, unprojected tokens."""
        b, m = refs.shape[:2]
        h = self.trunk(refs.flatten(0, 1))
        q = self.pool_queries.expand(h.shape[0], -1, -1)
        pooled = q + self.pool(q, h)
        return pooled.view(b, m, *pooled.shape[1:])

    def forward(self, refs: torch.Tensor) -> torch.Tensor:
        """(B, m, 4, H, W) -> (B, q, d) on the unit sphere."""
        if refs.shape[1] == 0:
            raise ValueError("style encoder needs at least one reference")
        return self.projector(self.per_reference(refs).mean(1))


def encode_content(glyphs: Sequence[RGBAGlyph], encoder: ContentEncoder) -> torch.Tensor:
    x = glyphs_to_tensor(glyphs, next(encoder.parameters()).dtype)
    return encoder(x[None])[0]


def encode_style(refs: Sequence[RGBAGlyph], encoder: StyleEncoder) -> torch.Tensor:
    if not refs:
        raise ValueError("style references must not be empty")
    x = glyphs_to_tensor(refs, next(encoder.parameters()).dtype)
    return encoder(x[None])[0]


# ---------------------------------------------------------------------------
# perceiver resampler


class ResamplerLayer(nn.Module):
    def __init__(self, dim: int, heads: int, zero_init: bool):
        super().__init__()
        self.norm_q = RMSNorm(dim)
        self.norm_kv = RMSNorm(dim)
        self.attn = SelfAttention(dim, heads, zero_out=zero_init)
        self.norm_ff = RMSNorm(dim)
        self.ffn = FeedForward(dim, 2, zero_out=zero_init)

    def forward(self, q: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        kv = torch.cat([q, m], dim=1)
        q = self.attn(self.norm_q(q), self.norm_kv(kv)) + q
        return self.ffn(self.norm_ff(q)) + q


class PerceiverResampler(nn.Module):
    """Learned queries cross-attend over ``[queries, tokens]``; output length is fixed."""

    def __init__(self, dim: int, num_queries: int = 8, input_dim: int | None = None, depth: int = 1,
                 heads: int = 4, zero_init: bool = False):
        super().__init__()
        self.dim = dim
        self.input_dim = input_dim or dim
        self.queries = nn.Parameter(torch.randn(num_queries, dim) * 0.5)
        self.proj_in = nn.Linear(self.input_dim, dim) if self.input_dim != dim else nn.Identity()
        self.layers = nn.ModuleList(ResamplerLayer(dim, heads, zero_init) for _ in range(depth))

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, k, input_dim) -> (B, l, dim); k may be 0."""
        if tokens.shape[-1] != self.input_dim:
            raise ValueError(f"token width {tokens.shape[-1]} != resampler input width {self.input_dim}")
        m = self.proj_in(tokens)
        q = self.queries.expand(tokens.shape[0], -1, -1)
        for layer in self.layers:
            q = layer(q, m)
        return q


def resample(resampler: PerceiverResampler, mllm_tokens: torch.Tensor) -> torch.Tensor:
    batched = mllm_tokens.ndim == 3
    x = mllm_tokens if batched else mllm_tokens[None]
    out = resampler(x.to(resampler.queries.dtype))
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# multi-modal condition

CONDITION_PROMPT = (
    "<image>You are given the background of a graphic design. "
    "Caption: {caption} "
    "Text to render: {target_text} "
    "Bounding box [left, top, right, bottom]: {bbox} "
    "Describe the typography style that suits this text at this position."
)


@dataclass
class ConditionInput:
    background: np.ndarray  # (H, W, 3) in [0, 1]
    caption: str
    target_text: str
    bbox: BBox

    def __post_init__(self):
        h, w = self.background.shape[:2]
        if not self.bbox.within_canvas(w, h):
            raise ValueError(f"bbox {self.bbox.as_list()} lies outside the {w}x{h} background")

    def prompt(self, template: str = CONDITION_PROMPT) -> str:
        return template.format(caption=self.caption, target_text=self.target_text, bbox=self.bbox.as_list())


class MLLMClient(Protocol):
    hidden_dim: int

    def hidden_states(self, image: np.ndarray, prompt: str) -> np.ndarray: ...


def image_digest(image: np.ndarray) -> bytes:
    q = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    return hashlib.sha256(q.tobytes() + str(q.shape).encode()).digest()


class StubMLLM:
    """Deterministic stand-in: token count and values are seeded by a hash of (image, prompt)."""

    def __init__(self, hidden_dim: int = 64, min_tokens: int = 6, max_tokens: int = 24):
        self.hidden_dim = hidden_dim
        self.min_tokens = min_tokens
        self.max_tokens = max_tokens
        self.calls = 0

    def hidden_states(self, image, prompt):
        self.calls += 1
        digest = hashlib.sha256(image_digest(image) + prompt.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        k = int(rng.integers(self.min_tokens, self.max_tokens + 1))
        return rng.standard_normal((k, self.hidden_dim))


class FailingMLLM:
    def __init__(self, hidden_dim: int = 64):
        self.hidden_dim = hidden_dim

    def hidden_states(self, image, prompt):
        raise TransportError("MLLM endpoint unreachable", attempts=1)


class ConditionEncoder(nn.Module):
    """Frozen MLLM (external) + trainable resampler, output on the unit sphere."""

    def __init__(self, resampler: PerceiverResampler, template: str = CONDITION_PROMPT):
        super().__init__()
        self.resampler = resampler
        self.template = template

    def forward(self, mllm_tokens: Sequence[torch.Tensor] | torch.Tensor) -> torch.Tensor:
        if torch.is_tensor(mllm_tokens) and mllm_tokens.ndim == 3:
            return unit_normalize(self.resampler(mllm_tokens))
        outs = [self.resampler(t[None].to(self.resampler.queries.dtype)) for t in mllm_tokens]
        return unit_normalize(torch.cat(outs, 0))

    def mllm_tokens(self, inp: ConditionInput, mllm: MLLMClient) -> torch.Tensor:
        try:
            hs = mllm.hidden_states(inp.background, inp.prompt(self.template))
        except TransportError:
            raise
        except Exception as e:
            raise TransportError(f"MLLM client failed: {e}", attempts=1) from e
        return torch.as_tensor(np.asarray(hs), dtype=self.resampler.queries.dtype)


def encode_condition(inp: ConditionInput, mllm: MLLMClient, encoder: ConditionEncoder) -> torch.Tensor:
    """(q, d) condition embedding, drop-in compatible with a style embedding."""
    return encoder([encoder.mllm_tokens(inp, mllm)])[0]
