"""3D residual attention U-Net predicting v from ([x_t, condition], t)."""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import GuidanceConfig, cfg_merge
from .errors import IndivisibleSpatialDims, ShapeMismatch


@dataclasses.dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 16
    channel_mults: Tuple[int, ...] = (1, 2, 4)
    attn_at_bottleneck: bool = True
    time_embed_dim: int = 64
    in_channels: int = 2
    out_channels: int = 1
    norm_groups: int = 8

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.channel_mults) - 1)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, channels), channels)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int, groups: int):
        super().__init__()
        self.norm1 = _norm(c_in, groups)
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = _norm(c_out, groups)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv3d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Single-head self-attention over all voxels."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = _norm(channels, groups)
        self.qkv = nn.Conv3d(channels, 3 * channels, 1)
        self.proj = nn.Conv3d(channels, channels, 1)

    def forward(self, x):
        b, c = x.shape[:2]
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, -1).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(x.shape)
        return x + self.proj(out)


class Denoiser3D(nn.Module):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        g = cfg.norm_groups
        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, cfg.time_embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
        )
        self.inp = nn.Conv3d(cfg.in_channels, chans[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        c_prev = chans[0]
        for i, c in enumerate(chans):
            self.down.append(ResBlock(c_prev, c, cfg.time_embed_dim, g))
            c_prev = c
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv3d(c, c, 3, stride=2, padding=1))

        self.mid1 = ResBlock(c_prev, c_prev, cfg.time_embed_dim, g)
        self.attn = AttentionBlock(c_prev, g) if cfg.attn_at_bottleneck else nn.Identity()
        self.mid2 = ResBlock(c_prev, c_prev, cfg.time_embed_dim, g)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, c in reversed(list(enumerate(chans))):
            self.up.append(ResBlock(c_prev + c, c, cfg.time_embed_dim, g))
            c_prev = c
            if i > 0:
                self.upsample.append(nn.Conv3d(c, chans[i - 1], 3, padding=1))
                c_prev = chans[i - 1]

        self.out_norm = _norm(chans[0], g)
        self.out = nn.Conv3d(chans[0], cfg.out_channels, 3, padding=1)

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t) -> torch.Tensor:
        if x_t.shape != cond.shape:
            raise ShapeMismatch(f"x_t {tuple(x_t.shape)} and condition {tuple(cond.shape)} differ")
        if any(s % self.cfg.divisor for s in x_t.shape[2:]):
            raise IndivisibleSpatialDims(f"spatial dims {tuple(x_t.shape[2:])} not divisible by {self.cfg.divisor}")
        if not isinstance(t, torch.Tensor):
            t = torch.full((x_t.shape[0],), int(t))
        t = t.reshape(-1).expand(x_t.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(x_t.dtype))

        h = self.inp(torch.cat([x_t, cond], dim=1))
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid2(self.attn(self.mid1(h, temb)), temb)
        for i, block in enumerate(self.up):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if i < len(self.upsample):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[i](h)
        return self.out(F.silu(self.out_norm(h)))


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclasses.dataclass
class ConditionBatch:
    """Tensors of shape (B, 1, H, W, D); ``t`` and ``cond_mask`` are length-B vectors."""

    x_t: torch.Tensor
    cond: torch.Tensor
    t: torch.Tensor
    cond_mask: Optional[torch.Tensor] = None

    def __post_init__(self):
        b = self.x_t.shape[0]
        if self.cond_mask is None:
            self.cond_mask = torch.ones(b, dtype=torch.bool)
        if not (self.cond.shape[0] == self.t.shape[0] == self.cond_mask.shape[0] == b):
            raise ShapeMismatch("batch dimensions of x_t, cond, t and cond_mask differ")

    def effective_cond(self) -> torch.Tensor:
        mask = self.cond_mask.reshape(-1, *([1] * (self.cond.ndim - 1)))
        return torch.where(mask, self.cond, torch.zeros_like(self.cond))


def apply_cond_dropout(batch: ConditionBatch, p: float, rng: Optional[torch.Generator] = None) -> ConditionBatch:
    """Drop each sample's condition independently with probability ``p``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"cond_drop_prob must be in [0, 1), got {p}")
    keep = torch.rand(batch.x_t.shape[0], generator=rng) >= p
    dropped = ConditionBatch(batch.x_t, batch.cond, batch.t, batch.cond_mask & keep)
    dropped.cond = dropped.effective_cond()
    return dropped


def predict_v(model: nn.Module, batch: ConditionBatch) -> torch.Tensor:
    return model(batch.x_t, batch.effective_cond(), batch.t)


@torch.no_grad()
def guided_predict(model: nn.Module, x_t: torch.Tensor, cond: torch.Tensor, t, g: GuidanceConfig) -> torch.Tensor:
    """CFG prediction: one conditional and one null-condition pass, merged.

    With weight 1 the unconditional pass is skipped (the merge is exact there).
    """
    if x_t.shape != cond.shape:
        raise ShapeMismatch(f"x_t {tuple(x_t.shape)} and condition {tuple(cond.shape)} differ")
    if not isinstance(t, torch.Tensor):
        t = torch.full((x_t.shape[0],), int(t))
    y_c = model(x_t, cond, t) if g.weight != 0 else None
    if g.weight == 1:
        return y_c
    y_uc = model(x_t, torch.zeros_like(cond), t)
    if y_c is None:
        return y_uc
    return cfg_merge(y_c, y_uc, g.weight)


def save_denoiser(path, model: Denoiser3D, **extra):
    return save_checkpoint(path, "denoiser", dataclasses.asdict(model.cfg), model.state_dict(), **extra)


def load_denoiser(path) -> Tuple[Denoiser3D, dict]:
    payload = load_checkpoint(path, "denoiser")
    model = Denoiser3D(DenoiserConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
