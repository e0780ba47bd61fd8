"""Latent autoencoder with an RGBA transparency decoder.

The encoder sees alpha-blended RGB glyphs and is frozen after an RGB warm-up.
The decoder keeps an RGB backbone and adds alpha taps after the middle block
and after every up block; the taps are upsampled to full resolution,
concatenated and mapped to one sigmoid alpha channel.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError
from .objectives import RandomConvPerceptual, mse, vae_loss


@dataclass
class DecoderConfig:
    resolution: int = 32
    latent_channels: int = 8
    up_channels: tuple[int, ...] = (32, 24, 16)
    alpha_tap_channels: int = 4
    encoder_channels: tuple[int, ...] = (16, 24, 32)
    groups: int = 4

    def __post_init__(self):
        if not self.up_channels:
            raise ValueError("up_channels must not be empty")
        if len(self.encoder_channels) != len(self.up_channels):
            raise ValueError("encoder and decoder need the same number of resolution levels")
        self.up_channels = tuple(self.up_channels)
        self.encoder_channels = tuple(self.encoder_channels)

    @property
    def factor(self) -> int:
        return 2 ** len(self.up_channels)

    @property
    def latent_side(self) -> int:
        return self.resolution // self.factor

    def to_dict(self) -> dict:
        d = asdict(self)
        d["up_channels"] = list(self.up_channels)
        d["encoder_channels"] = list(self.encoder_channels)
        return d


def _norm(ch: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__()
        self.n1 = _norm(cin, groups)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.n2 = _norm(cout, groups)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.c1(F.silu(self.n1(x)))
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


class SpatialAttention(nn.Module):
    def __init__(self, ch: int, groups: int):
        super().__init__()
        self.norm = _norm(ch, groups)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.out = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).flatten(2).chunk(3, dim=1)
        attn = torch.einsum("bci,bcj->bij", q, k) / c**0.5
        o = torch.einsum("bij,bcj->bci", attn.softmax(-1), v).view(b, c, h, w)
        return x + self.out(o)


class GlyphEncoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.encoder_channels
        self.conv_in = nn.Conv2d(3, chs[0], 3, padding=1)
        blocks = []
        cin = chs[0]
        for c in chs:
            blocks += [ResBlock(cin, c, cfg.groups), nn.Conv2d(c, c, 3, stride=2, padding=1)]
            cin = c
        self.down = nn.Sequential(*blocks)
        self.mid = nn.Sequential(ResBlock(cin, cin, cfg.groups), SpatialAttention(cin, cfg.groups))
        self.out = nn.Sequential(_norm(cin, cfg.groups), nn.SiLU(), nn.Conv2d(cin, cfg.latent_channels, 3, padding=1))

    def forward(self, rgb: torch.Tensor) -> torch.Tensor:
        return self.out(self.mid(self.down(self.conv_in(rgb * 2 - 1))))


class TransparencyDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, zero_alpha_head: bool = False):
        super().__init__()
        self.cfg = cfg
        chs = cfg.up_channels
        self.conv_in = nn.Conv2d(cfg.latent_channels, chs[0], 3, padding=1)
        self.mid = nn.Sequential(
            ResBlock(chs[0], chs[0], cfg.groups),
            SpatialAttention(chs[0], cfg.groups),
            ResBlock(chs[0], chs[0], cfg.groups),
        )
        self.up = nn.ModuleList()
        cin = chs[0]
        for c in chs:
            self.up.append(
                nn.Sequential(ResBlock(cin, c, cfg.groups), nn.Upsample(scale_factor=2, mode="nearest"),
                              nn.Conv2d(c, c, 3, padding=1))
            )
            cin = c
        self.rgb_out = nn.Sequential(_norm(cin, cfg.groups), nn.SiLU(), nn.Conv2d(cin, 3, 3, padding=1))
        tap = cfg.alpha_tap_channels
        self.alpha_taps = nn.ModuleList([nn.Conv2d(chs[0], tap, 3, padding=1)] + [nn.Conv2d(c, tap, 3, padding=1) for c in chs])
        self.alpha_head = nn.Conv2d(tap * (len(chs) + 1), 1, 3, padding=1)
        if zero_alpha_head:
            nn.init.zeros_(self.alpha_head.weight)
            nn.init.zeros_(self.alpha_head.bias)

    def rgb_parameters(self):
        tap_ids = {id(p) for p in self.alpha_taps.parameters()} | {id(p) for p in self.alpha_head.parameters()}
        return [p for p in self.parameters() if id(p) not in tap_ids]

    def forward(self, z: torch.Tensor, with_alpha: bool = True) -> torch.Tensor:
        res = self.cfg.resolution
        h = self.mid(self.conv_in(z))
        # taps read backbone features and only write to the alpha branch
        taps = [self.alpha_taps[0](h)] if with_alpha else []
        for i, blk in enumerate(self.up):
            h = blk(h)
            if with_alpha:
                taps.append(self.alpha_taps[i + 1](h))
        rgb = torch.sigmoid(self.rgb_out(h))
        if not with_alpha:
            return rgb
        feats = torch.cat([F.interpolate(t, size=(res, res), mode="nearest") for t in taps], dim=1)
        alpha = torch.sigmoid(self.alpha_head(F.silu(feats)))
        return torch.cat([rgb, alpha], dim=1)


class TransparencyVAE(nn.Module):
    def __init__(self, cfg: DecoderConfig = DecoderConfig(), zero_alpha_head: bool = False):
        super().__init__()
        self.cfg = cfg
        self.encoder = GlyphEncoder(cfg)
        self.decoder = TransparencyDecoder(cfg, zero_alpha_head)
        # latents are standardized with statistics collected after warm-up
        self.register_buffer("latent_shift", torch.zeros(1))
        self.register_buffer("latent_scale", torch.ones(1))
        self.background = 0.5

    @property
    def encoder_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.encoder.parameters())

    def freeze_encoder(self) -> None:
        self.encoder.requires_grad_(False)
        self.encoder.eval()

    def encode(self, rgb: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) blended RGB -> (B, c, s, s) standardized latent."""
        if rgb.shape[-1] != self.cfg.resolution or rgb.shape[-2] != self.cfg.resolution or rgb.shape[1] != 3:
            raise ValueError(f"expected (B, 3, {self.cfg.resolution}, {self.cfg.resolution}) input, got {tuple(rgb.shape)}")
        return (self.encoder(rgb) - self.latent_shift) / self.latent_scale

    def decode_rgba(self, z: torch.Tensor) -> torch.Tensor:
        s, c = self.cfg.latent_side, self.cfg.latent_channels
        if z.shape[1:] != (c, s, s):
            raise ValueError(f"latent shape {tuple(z.shape[1:])} != {(c, s, s)}")
        return self.decoder(z * self.latent_scale + self.latent_shift)

    @torch.no_grad()
    def calibrate(self, rgb: torch.Tensor) -> None:
        raw = self.encoder(rgb)
        self.latent_shift.fill_(float(raw.mean()))
        self.latent_scale.fill_(float(raw.std().clamp_min(1e-6)))


def blend_tensor(rgba: torch.Tensor, background: float = 0.5) -> torch.Tensor:
    """Batched alpha blend of (B, 4, H, W) over a uniform gray."""
    a = rgba[:, 3:4]
    return a * rgba[:, :3] + (1 - a) * background


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)


def warmup_autoencoder(vae: TransparencyVAE, rgba: torch.Tensor, steps: int = 1500, lr: float = 2e-3,
                       batch_size: int = 32, seed: int = 0) -> TrainLog:
    """Plain RGB autoencoding of blended glyphs; trains the encoder and the decoder's RGB path."""
    gen = torch.Generator().manual_seed(seed)
    params = list(vae.encoder.parameters()) + vae.decoder.rgb_parameters()
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    blended = blend_tensor(rgba, vae.background)
    log = TrainLog()
    for _ in range(steps):
        idx = torch.randint(len(rgba), (min(batch_size, len(rgba)),), generator=gen)
        x = blended[idx]
        # during warm-up the RGB path reconstructs the blended image itself
        loss = mse(vae.decoder(vae.encoder(x), with_alpha=False), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        log.losses.append(float(loss.detach()))
    vae.calibrate(blended)
    return log


def tvae_train_step(vae: TransparencyVAE, batch: torch.Tensor, opt: torch.optim.Optimizer,
                    perceptual: nn.Module, lambda_lpips: float = 0.1) -> float:
    """One decoder update on a (B, 4, H, W) RGBA batch with the encoder frozen."""
    if not vae.encoder_frozen:
        raise ContractError("the VAE encoder must be frozen before transparency-decoder training")
    with torch.no_grad():
        z = vae.encode(blend_tensor(batch, vae.background))
    decoded = vae.decode_rgba(z)
    loss = vae_loss(decoded, batch, perceptual, lambda_lpips)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def train_transparency_decoder(vae: TransparencyVAE, rgba: torch.Tensor, steps: int = 2000, lr: float = 2e-3,
                               batch_size: int = 32, lambda_lpips: float = 0.1, seed: int = 0,
                               perceptual: nn.Module | None = None) -> TrainLog:
    vae.freeze_encoder()
    perceptual = perceptual or RandomConvPerceptual(4, seed=seed).to(rgba.dtype)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(vae.decoder.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    log = TrainLog()
    for _ in range(steps):
        idx = torch.randint(len(rgba), (min(batch_size, len(rgba)),), generator=gen)
        log.losses.append(tvae_train_step(vae, rgba[idx], opt, perceptual, lambda_lpips))
        sched.step()
    return log
