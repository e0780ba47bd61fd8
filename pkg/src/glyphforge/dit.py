"""Diffusion transformer over glyph latents with 3D rotary positions.

Sequence layout is ``[noisy latents | content tokens | style-or-condition tokens]``.
Fusion blocks update only the noisy tokens (queries) while attending over the
whole sequence; single blocks update every token with parallel attention/FFN.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError
from .nn_common import FeedForward, RMSNorm, TimestepEmbedder, attention, merge_heads

NOISY, CONTENT, STYLE = 0, 1, 2


def default_rope_split(head_dim: int) -> tuple[int, int, int]:
    if head_dim % 2:
        raise ValueError("head_dim must be even for rotary embeddings")
    a = 2 * max(1, round(head_dim / 6))
    rest = head_dim - 2 * a
    if rest < 2:
        a = (head_dim // 3) // 2 * 2
        rest = head_dim - 2 * a
    return (a, a, rest)


@dataclass
class ModelConfig:
    dim: int = 128
    heads: int = 4
    fusion_depth: int = 4
    single_depth: int = 2
    latent_side: int = 4
    latent_channels: int = 8
    rope_dim_split: tuple[int, int, int] | None = None
    rope_theta: float = 100.0
    mlp_ratio: int = 4
    cond_dim: int | None = None  # encoder token width; defaults to dim

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.fusion_depth < 1 or self.single_depth < 1:
            raise ValueError("fusion_depth and single_depth must be >= 1")
        if self.rope_dim_split is None:
            self.rope_dim_split = default_rope_split(self.head_dim)
        self.rope_dim_split = tuple(int(v) for v in self.rope_dim_split)
        _check_split(self.rope_dim_split, self.head_dim)
        if self.cond_dim is None:
            self.cond_dim = self.dim

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rope_dim_split"] = list(self.rope_dim_split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _check_split(split, head_dim: int) -> None:
    if len(split) != 3 or any(s <= 0 or s % 2 for s in split) or sum(split) != head_dim:
        raise ValueError(f"rope split {tuple(split)} must be three positive even ints summing to {head_dim}")


# ---------------------------------------------------------------------------
# positions


def build_3d_grid(num_glyphs: int, latent_side: int) -> torch.Tensor:
    """(idx, x, y) per latent cell, row-major within each glyph, glyphs in order."""
    if num_glyphs < 1 or latent_side < 1:
        raise ValueError("num_glyphs and latent_side must be >= 1")
    idx = torch.arange(num_glyphs).repeat_interleave(latent_side * latent_side)
    x = torch.arange(latent_side).repeat_interleave(latent_side).repeat(num_glyphs)
    y = torch.arange(latent_side).repeat(latent_side * num_glyphs)
    return torch.stack([idx, x, y], dim=1)


def rope_angles(coords: torch.Tensor, split, theta: float = 100.0, dtype=torch.float64) -> torch.Tensor:
    """(K, head_dim/2) rotation angles, one RoPE band per coordinate axis."""
    parts = []
    for axis, d in enumerate(split):
        inv = 1.0 / theta ** (torch.arange(0, d, 2, dtype=dtype) / d)
        parts.append(coords[:, axis].to(dtype)[:, None] * inv[None])
    return torch.cat(parts, dim=1)


def rotate(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotates adjacent pairs of the last dim of ``x`` (..., K, D) by ``angles`` (K, D/2)."""
    cos = angles.cos().to(x.dtype)
    sin = angles.sin().to(x.dtype)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = torch.stack([xe * cos - xo * sin, xe * sin + xo * cos], dim=-1)
    return out.flatten(-2)


def apply_rope3d(vectors: torch.Tensor, coords: torch.Tensor, split, theta: float = 100.0) -> torch.Tensor:
    """Rotary embedding for (..., K, heads, head_dim) vectors at (K, 3) coordinates."""
    head_dim = vectors.shape[-1]
    _check_split(tuple(split), head_dim)
    if coords.shape != (vectors.shape[-3], 3):
        raise ValueError(f"coords shape {tuple(coords.shape)} does not match {vectors.shape[-3]} tokens")
    ang = rope_angles(coords, split, theta)  # (K, D/2)
    return rotate(vectors, ang[:, None, :])


# ---------------------------------------------------------------------------
# sequence


@dataclass
class LatentTokenSeq:
    tokens: torch.Tensor  # (B, K, dim)
    coords: torch.Tensor  # (K, 3) long
    type_tags: torch.Tensor  # (K,) long in {NOISY, CONTENT, STYLE}
    unconditional: bool = False

    def mask(self, tag: int) -> torch.Tensor:
        return self.type_tags == tag

    def replace(self, tokens: torch.Tensor) -> "LatentTokenSeq":
        return LatentTokenSeq(tokens, self.coords, self.type_tags, self.unconditional)


class TimestepEmbedding(TimestepEmbedder):
    pass


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class _QKV(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        hd = dim // heads
        self.q_norm = RMSNorm(hd)
        self.k_norm = RMSNorm(hd)

    def project(self, x, lin, norm=None):
        b, n, d = x.shape
        y = lin(x).view(b, n, self.heads, d // self.heads)
        return norm(y) if norm is not None else y

    def attend(self, xq, xkv, angles_q, angles_k):
        q = rotate(self.project(xq, self.to_q, self.q_norm), angles_q[:, None, :])
        k = rotate(self.project(xkv, self.to_k, self.k_norm), angles_k[:, None, :])
        v = self.project(xkv, self.to_v)
        out = attention(q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2))
        return merge_heads(out)


class FusionBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.norm1 = RMSNorm(d, affine=False)
        self.norm2 = RMSNorm(d, affine=False)
        self.modulation = nn.Linear(d, 4 * d)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)
        self.attn = _QKV(d, cfg.heads)
        # not zero-initialized: the tanh gate already starts the branch at zero
        self.to_out = nn.Linear(d, d)
        self.gate = nn.Parameter(torch.zeros(1))
        self.ffn = FeedForward(d, cfg.mlp_ratio, zero_out=True)

    def forward(self, seq: LatentTokenSeq, t_emb: torch.Tensor, angles: torch.Tensor) -> LatentTokenSeq:
        noisy = seq.mask(NOISY)
        if not noisy.any() or not seq.mask(CONTENT).any():
            raise ContractError("fusion block needs noisy and content tokens")
        if not seq.mask(STYLE).any() and not seq.unconditional:
            raise ContractError("fusion block needs style/condition tokens (or an unconditional sequence)")
        x = seq.tokens
        s1, c1, s2, c2 = self.modulation(F.silu(t_emb)).chunk(4, dim=-1)
        h = _modulate(self.norm1(x), s1, c1)
        xn = x[:, noisy]
        attn_out = self.to_out(self.attn.attend(h[:, noisy], h, angles[noisy], angles))
        xn = xn + torch.tanh(self.gate) * attn_out
        xn = xn + self.ffn(_modulate(self.norm2(xn), s2, c2))
        out = x.clone()
        out[:, noisy] = xn
        return seq.replace(out)


class SingleBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.norm = RMSNorm(d, affine=False)
        self.modulation = nn.Linear(d, 2 * d)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)
        self.attn = _QKV(d, cfg.heads)
        self.mlp_in = nn.Linear(d, d * cfg.mlp_ratio)
        self.proj = nn.Linear(d + d * cfg.mlp_ratio, d)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, seq: LatentTokenSeq, t_emb: torch.Tensor, angles: torch.Tensor) -> LatentTokenSeq:
        x = seq.tokens
        shift, scale = self.modulation(F.silu(t_emb)).chunk(2, dim=-1)
        h = _modulate(self.norm(x), shift, scale)
        a = self.attn.attend(h, h, angles, angles)
        m = F.gelu(self.mlp_in(h))
        return seq.replace(x + self.proj(torch.cat([a, m], dim=-1)))


class GlyphDiT(nn.Module):
    """Velocity predictor ``v(x_t, t, content, style_or_condition)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.x_in = nn.Linear(cfg.latent_channels, d)
        self.content_in = nn.Linear(cfg.cond_dim, d)
        self.style_in = nn.Linear(cfg.cond_dim, d)
        self.type_emb = nn.Parameter(torch.randn(3, d) * 0.02)
        self.t_embedder = TimestepEmbedding(d)
        self.fusion = nn.ModuleList(FusionBlock(cfg) for _ in range(cfg.fusion_depth))
        self.single = nn.ModuleList(SingleBlock(cfg) for _ in range(cfg.single_depth))
        self.final_norm = RMSNorm(d, affine=False)
        self.final_mod = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, cfg.latent_channels)
        for lin in (self.final_mod, self.out):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def build_sequence(self, x_t, content_emb, style_emb) -> LatentTokenSeq:
        b, n, c, s, _ = x_t.shape
        if s != self.cfg.latent_side or c != self.cfg.latent_channels:
            raise ContractError(f"latents {tuple(x_t.shape)} do not match config")
        if content_emb.shape[:2] != (b, n):
            raise ContractError(
                f"content blocks {tuple(content_emb.shape[:2])} do not match latent glyphs {(b, n)}"
            )
        p = content_emb.shape[2]
        if p != s * s:
            raise ContractError(f"content tokens per glyph ({p}) must equal latent_side^2 ({s * s})")
        noisy = self.x_in(x_t.permute(0, 1, 3, 4, 2).reshape(b, n * s * s, c)) + self.type_emb[NOISY]
        content = self.content_in(content_emb.reshape(b, n * p, -1)) + self.type_emb[CONTENT]
        grid = build_3d_grid(n, s).to(x_t.device)
        parts, coords, tags = [noisy, content], [grid, grid], [NOISY, CONTENT]
        q = 0
        if style_emb is not None:
            if style_emb.shape[0] != b:
                raise ContractError("style batch does not match latents")
            q = style_emb.shape[1]
            parts.append(self.style_in(style_emb) + self.type_emb[STYLE])
            coords.append(torch.zeros(q, 3, dtype=torch.long, device=x_t.device))
        type_tags = torch.cat(
            [
                torch.full((n * s * s,), NOISY),
                torch.full((n * p,), CONTENT),
                torch.full((q,), STYLE),
            ]
        ).to(x_t.device)
        return LatentTokenSeq(torch.cat(parts, 1), torch.cat(coords, 0), type_tags, style_emb is None)

    def forward(self, x_t, t, content_emb, style_emb=None):
        """x_t (B, n, c, s, s); t (B,); content_emb (B, n, s*s, d); style_emb (B, q, d) or None."""
        b, n, c, s, _ = x_t.shape
        seq = self.build_sequence(x_t, content_emb, style_emb)
        t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).expand(b)
        t_emb = self.t_embedder(t)
        angles = rope_angles(seq.coords, self.cfg.rope_dim_split, self.cfg.rope_theta)
        for blk in self.fusion:
            seq = blk(seq, t_emb, angles)
        for blk in self.single:
            seq = blk(seq, t_emb, angles)
        h = seq.tokens[:, seq.mask(NOISY)]
        shift, scale = self.final_mod(F.silu(t_emb)).chunk(2, dim=-1)
        v = self.out(_modulate(self.final_norm(h), shift, scale))
        return v.reshape(b, n, s, s, c).permute(0, 1, 4, 2, 3)


def fusion_block_forward(block: FusionBlock, seq: LatentTokenSeq, t_emb: torch.Tensor, theta: float = 100.0):
    angles = rope_angles(seq.coords, block.cfg.rope_dim_split, theta)
    return block(seq, t_emb, angles)


def single_block_forward(block: SingleBlock, seq: LatentTokenSeq, t_emb: torch.Tensor, split, theta: float = 100.0):
    angles = rope_angles(seq.coords, split, theta)
    return block(seq, t_emb, angles)


def dit_forward(model: GlyphDiT, x_t, t, content_emb, style_or_cond_emb=None):
    return model(x_t, t, content_emb, style_or_cond_emb)


def attach_lora(model: nn.Module, rank: int = 8) -> list[str]:
    """Wraps every attention projection (q, k, v, out) in a LoRA adapter; returns wrapped names."""
    from .nn_common import LoRALinear

    wrapped = []
    for name, module in list(model.named_modules()):
        for attr in ("to_q", "to_k", "to_v", "to_out"):
            lin = getattr(module, attr, None)
            if isinstance(lin, nn.Linear):
                setattr(module, attr, LoRALinear(lin, rank))
                wrapped.append(f"{name}.{attr}" if name else attr)
    return wrapped
