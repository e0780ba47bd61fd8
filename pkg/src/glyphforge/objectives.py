"""Training objectives: rectified flow, alignment, flow-DPO, transparency VAE and segmentation losses.

All squared-error terms are mean-reduced so loss scales do not depend on resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
PRED_CLIP_EPS = 1e-6
DICE_EPS = 1e-8
LPIPS_WEIGHT = 0.1
DPO_BETA = 500.0


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass
class RFSample:
    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor  # scalar or broadcastable per-sample times
    x_t: torch.Tensor
    v_t: torch.Tensor


def _expand_t(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def rf_make_sample(x0: torch.Tensor, x1: torch.Tensor, t) -> RFSample:
    _check_same_shape(x0, x1, "rf_make_sample")
    t = torch.as_tensor(t, dtype=x0.dtype, device=x0.device)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    tb = _expand_t(t, x0)
    x_t = tb * x1 + (1 - tb) * x0
    return RFSample(x0=x0, x1=x1, t=t, x_t=x_t, v_t=x1 - x0)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same_shape(a, b, "mse")
    return ((a - b) ** 2).mean()


def per_sample_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared error reduced over all but the leading (batch) dimension."""
    _check_same_shape(a, b, "per_sample_mse")
    return ((a - b) ** 2).flatten(1).mean(1)


def rf_loss(v_pred: torch.Tensor, sample: RFSample) -> torch.Tensor:
    return mse(v_pred, sample.v_t)


def align_loss(projected: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return mse(projected, target)


# ---------------------------------------------------------------------------
# preference optimization


def _w_constant(t: torch.Tensor, beta: float = DPO_BETA) -> torch.Tensor:
    return torch.full_like(t, beta)


def _w_snr(t: torch.Tensor, beta: float = DPO_BETA, cap: float = 1e3) -> torch.Tensor:
    # 1/(t(1-t)) grows without bound at the endpoints, hence the cap
    w = 1.0 / (t * (1.0 - t)).clamp_min(1.0 / cap)
    return beta * w / 4.0  # equals beta at t = 0.5


WEIGHT_FNS: dict[str, Callable[..., torch.Tensor]] = {
    "constant": _w_constant,
    "snr": _w_snr,
}


def dpo_weight(weight_fn_id: str, t, beta: float = DPO_BETA) -> torch.Tensor:
    try:
        fn = WEIGHT_FNS[weight_fn_id]
    except KeyError:
        raise ValueError(f"unknown weighting {weight_fn_id!r}; choose from {sorted(WEIGHT_FNS)}") from None
    return fn(torch.as_tensor(t, dtype=torch.float64 if not torch.is_tensor(t) else t.dtype), beta=beta)


def dpo_loss(policy_errors, ref_errors, w_t) -> torch.Tensor:
    """Preference loss on squared velocity errors.

    ``policy_errors = (e_w, e_l)`` and ``ref_errors = (ê_w, ê_l)`` may be scalars or
    per-pair tensors; the mean over pairs is returned. Evaluated as
    ``softplus(w_t * ((e_w - ê_w) - (e_l - ê_l)))``, which is ``-log σ(-w_t * (...))``.
    """
    e_w, e_l = (torch.as_tensor(e, dtype=torch.float64) if not torch.is_tensor(e) else e for e in policy_errors)
    r_w, r_l = (torch.as_tensor(e, dtype=e_w.dtype) if not torch.is_tensor(e) else e for e in ref_errors)
    w_t = torch.as_tensor(w_t, dtype=e_w.dtype) if not torch.is_tensor(w_t) else w_t
    if torch.any(w_t <= 0):
        raise ValueError("W(t) must be positive")
    for e in (e_w, e_l, r_w, r_l):
        if torch.any(e < 0):
            raise ValueError("squared errors must be non-negative")
    margin = (e_w - r_w) - (e_l - r_l)
    return F.softplus(w_t * margin).mean()


# ---------------------------------------------------------------------------
# transparency VAE


class RandomConvPerceptual(nn.Module):
    """Fixed, seeded random conv feature stack used as the perceptual model.

    Stands in for a pretrained perceptual network; any module mapping
    (B, C, H, W) images to a feature tensor (or list of tensors) can be used instead.
    """

    def __init__(self, in_channels: int = 4, widths=(8, 16), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c = in_channels
        for w in widths:
            conv = nn.Conv2d(c, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / math.sqrt(c * 9))
                conv.bias.zero_()
            layers.append(conv)
            c = w
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.layers:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def perceptual_distance(perceptual: nn.Module, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    fa, fb = perceptual(a), perceptual(b)
    if torch.is_tensor(fa):
        fa, fb = [fa], [fb]
    return sum(((x - y) ** 2).mean() for x, y in zip(fa, fb))


def vae_loss(
    decoded: torch.Tensor,
    gt: torch.Tensor,
    perceptual: nn.Module,
    lambda_lpips: float = LPIPS_WEIGHT,
    return_parts: bool = False,
):
    """``L_mse + lambda_lpips * L_lpips`` on (B, 4, H, W) RGBA tensors."""
    _check_same_shape(decoded, gt, "vae_loss")
    if lambda_lpips < 0:
        raise ValueError("lambda_lpips must be >= 0")
    l_mse = mse(decoded, gt)
    l_lp = perceptual_distance(perceptual, decoded, gt) if lambda_lpips > 0 else torch.zeros_like(l_mse)
    total = l_mse + lambda_lpips * l_lp
    if return_parts:
        return total, {"mse": l_mse.detach(), "lpips": l_lp.detach()}
    return total


# ---------------------------------------------------------------------------
# alpha segmentation


@dataclass
class SegPrediction:
    pred_alpha: torch.Tensor
    gt_alpha: torch.Tensor

    def __post_init__(self):
        _check_same_shape(self.pred_alpha, self.gt_alpha, "SegPrediction")
        self.pred_alpha = self.pred_alpha.clamp(0.0, 1.0)
        self.gt_alpha = self.gt_alpha.clamp(0.0, 1.0)


def focal_loss(seg: SegPrediction, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    if alpha <= 0 or gamma < 0:
        raise ValueError("focal loss needs alpha > 0 and gamma >= 0")
    pred = seg.pred_alpha.clamp(PRED_CLIP_EPS, 1.0 - PRED_CLIP_EPS)
    p_t = torch.where(seg.gt_alpha > 0, pred, 1.0 - pred)
    return -(alpha * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_loss(seg: SegPrediction) -> torch.Tensor:
    inter = (seg.pred_alpha * seg.gt_alpha).sum()
    denom = seg.pred_alpha.sum() + seg.gt_alpha.sum()
    return 1.0 - 2.0 * inter / (denom + DICE_EPS)


def seg_loss_total(
    seg: SegPrediction,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
    lambda_focal: float = 1.0,
    lambda_dice: float = 1.0,
    return_parts: bool = False,
):
    if lambda_focal < 0 or lambda_dice < 0:
        raise ValueError("loss weights must be non-negative")
    parts = {
        "mse": mse(seg.pred_alpha, seg.gt_alpha),
        "focal": focal_loss(seg, alpha, gamma),
        "dice": dice_loss(seg),
    }
    total = parts["mse"] + lambda_focal * parts["focal"] + lambda_dice * parts["dice"]
    if return_parts:
        return total, parts
    return total
