"""The full glyph generator: encoders, condition resampler, DiT backbone and transparency VAE."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .dit import GlyphDiT, ModelConfig, attach_lora
from .encoders import (
    ConditionEncoder,
    ContentEncoder,
    EncoderConfig,
    PerceiverResampler,
    StyleEncoder,
    glyphs_to_tensor,
)
from .glyph_synth import RGBAGlyph
from .tvae import DecoderConfig, TransparencyVAE


@dataclass
class GeneratorConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    vae: DecoderConfig = field(default_factory=DecoderConfig)
    mllm_dim: int = 64
    resampler_depth: int = 1
    lora_rank: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.vae, dict):
            self.vae = DecoderConfig(**self.vae)
        if self.model.latent_side != self.vae.latent_side:
            raise ValueError("DiT latent_side must match the VAE latent side")
        if self.model.latent_channels != self.vae.latent_channels:
            raise ValueError("DiT latent_channels must match the VAE latent channels")
        if self.encoder.resolution // self.encoder.patch != self.model.latent_side:
            raise ValueError("content patches per side must equal latent_side")
        if self.encoder.dim != self.model.cond_dim:
            raise ValueError("encoder width must equal the DiT condition width")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "encoder": asdict(self.encoder),
            "vae": self.vae.to_dict(),
            "mllm_dim": self.mllm_dim,
            "resampler_depth": self.resampler_depth,
            "lora_rank": self.lora_rank,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


def toy_config(dim: int = 64, heads: int = 4, fusion_depth: int = 2, single_depth: int = 2,
               resolution: int = 32, mllm_dim: int = 32) -> GeneratorConfig:
    vae = DecoderConfig(resolution=resolution)
    s = vae.latent_side
    return GeneratorConfig(
        model=ModelConfig(dim=dim, heads=heads, fusion_depth=fusion_depth, single_depth=single_depth,
                          latent_side=s, latent_channels=vae.latent_channels),
        encoder=EncoderConfig(dim=dim, resolution=resolution, patch=resolution // s, depth=1, heads=heads),
        vae=vae,
        mllm_dim=mllm_dim,
    )


class GlyphGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.dit = GlyphDiT(cfg.model)
        self.content_encoder = ContentEncoder(cfg.encoder)
        self.style_encoder = StyleEncoder(cfg.encoder)
        self.condition_encoder = ConditionEncoder(
            PerceiverResampler(cfg.encoder.dim, cfg.encoder.num_style_tokens, cfg.mllm_dim,
                               depth=cfg.resampler_depth, heads=cfg.encoder.heads)
        )
        self.vae = TransparencyVAE(cfg.vae)
        # set once Stage 1 has trained with condition dropout
        self.register_buffer("supports_uncond", torch.tensor(False))
        if cfg.lora_rank:
            attach_lora(self.dit, cfg.lora_rank)

    # -- embeddings --------------------------------------------------------

    def embed_content(self, glyphs: torch.Tensor) -> torch.Tensor:
        return self.content_encoder(glyphs)

    def embed_style(self, refs: torch.Tensor) -> torch.Tensor:
        return self.style_encoder(refs)

    def embed_content_glyphs(self, glyphs: Sequence[RGBAGlyph]) -> torch.Tensor:
        return self.embed_content(glyphs_to_tensor(glyphs, self.dtype)[None])

    def embed_style_glyphs(self, refs: Sequence[RGBAGlyph]) -> torch.Tensor:
        return self.embed_style(glyphs_to_tensor(refs, self.dtype)[None])

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def velocity(self, x_t, t, content_emb, style_emb=None):
        return self.dit(x_t, t, content_emb, style_emb)

    # -- latents ----------------------------------------------------------

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        """(B, n, c, s, s) -> (B, n, 4, H, W) RGBA."""
        b, n = latents.shape[:2]
        out = self.vae.decode_rgba(latents.flatten(0, 1))
        return out.view(b, n, *out.shape[1:])

    # -- adapters and persistence ------------------------------------------

    def enable_lora(self, rank: int = 8) -> list[str]:
        if self.cfg.lora_rank:
            raise RuntimeError("LoRA adapters are already attached")
        self.cfg.lora_rank = rank
        return attach_lora(self.dit, rank)

    def lora_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if "lora_" in n]

    def save(self, path: str | Path, meta: dict | None = None) -> Path:
        return save_checkpoint(path, self.state_dict(), self.cfg.to_dict(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "GlyphGenerator":
        payload = load_checkpoint(path)
        model = cls(GeneratorConfig.from_dict(payload["config"]))
        model.load_state_dict(payload["tensors"])
        return model
