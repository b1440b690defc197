"""3D VGG-like feature extractor, perceptual losses and sampling start-step selection."""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import diffusion as dm
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import EmptyPairs, IndivisibleSpatialDims, InsufficientData
from .volume import VolumeGrid

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class PerceptualConfig:
    layer_weights: Tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    lambda_p: float = 0.25
    snr_weighting: bool = True
    snr_kind: str = "alpha_bar"
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.lambda_p < 0 or any(w < 0 for w in self.layer_weights):
            raise ValueError("lambda_p and layer weights must be non-negative")
        if self.lambda_p > 0 and not any(w > 0 for w in self.layer_weights):
            raise ValueError("at least one layer weight must be positive when lambda_p > 0")


class FeatureExtractor(nn.Module):
    """Stack of (conv-norm-act) x2 + 2x average-pool stages, plus a linear head used only for pretraining."""

    def __init__(self, channels: Sequence[int] = (8, 16, 32), n_classes: int = 2, groups: int = 4):
        super().__init__()
        if len(channels) < 3:
            raise ValueError("the extractor needs at least 3 stages")
        self.channels = tuple(int(c) for c in channels)
        self.n_classes = n_classes
        self.trained_on = "untrained"
        self.cv_folds = 0
        self.fold_accuracies: List[float] = []
        stages = []
        c_in = 1
        for c in self.channels:
            g = math.gcd(groups, c)
            stages.append(nn.Sequential(
                nn.Conv3d(c_in, c, 3, padding=1), nn.GroupNorm(g, c), nn.SiLU(),
                nn.Conv3d(c, c, 3, padding=1), nn.GroupNorm(g, c), nn.SiLU(),
                nn.AvgPool3d(2),
            ))
            c_in = c
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(c_in, n_classes)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        div = 2 ** self.n_stages
        if any(s % div for s in x.shape[2:]):
            raise IndivisibleSpatialDims(f"spatial dims {tuple(x.shape[2:])} not divisible by {div}")
        x = x.to(self.head.weight.dtype)
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # max pooling keeps small focal lesions from being averaged away
        return self.head(self.features(x)[-1].amax(dim=(2, 3, 4)))


def _as_batch(v) -> torch.Tensor:
    if isinstance(v, VolumeGrid):
        v = v.data
    t = torch.as_tensor(np.asarray(v) if not isinstance(v, torch.Tensor) else v)
    if t.ndim == 3:
        t = t[None, None]
    elif t.ndim == 4:
        t = t[:, None]
    return t


@torch.no_grad()
def extract_features(fe: FeatureExtractor, v) -> List[torch.Tensor]:
    """Per-stage feature maps of one volume or a batch (no autograd graph)."""
    return fe.features(_as_batch(v))


def _fold_indices(n: int, folds: int, seed: int) -> List[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def train_extractor(
    volumes: Sequence[np.ndarray],
    labels: Sequence[int],
    folds: int = 5,
    seed: int = 0,
    *,
    channels: Sequence[int] = (8, 16, 32),
    epochs: int = 60,
    batch_size: int = 8,
    lr: float = 2e-3,
    trained_on: str = "phantom-HF",
) -> FeatureExtractor:
    """K-fold cross-validated lesion-class pretraining; returns the best fold's network.

    ``volumes`` are normalized 3D arrays. The optimizer is Adam with a linearly
    decaying learning rate.
    """
    if folds < 2:
        raise InsufficientData("cross-validation needs at least 2 folds")
    n = len(volumes)
    if n < 2 * folds:
        raise InsufficientData(f"{n} volumes are not enough for {folds}-fold cross-validation")
    classes = sorted(set(int(l) for l in labels))
    if len(classes) < 2:
        raise InsufficientData("at least two classes are needed")
    y_all = torch.tensor([classes.index(int(l)) for l in labels])
    x_all = torch.stack([_as_batch(v)[0] for v in volumes])

    best: Optional[FeatureExtractor] = None
    best_acc = -1.0
    accs = []
    for k, val_idx in enumerate(_fold_indices(n, folds, seed)):
        train_idx = np.setdiff1d(np.arange(n), val_idx)
        torch.manual_seed(seed * 1000 + k)
        gen = torch.Generator().manual_seed(seed * 1000 + k)
        model = FeatureExtractor(channels, n_classes=len(classes))
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        steps_per_epoch = math.ceil(len(train_idx) / batch_size)
        total = epochs * steps_per_epoch
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 1.0 - s / total)
        model.train()
        for _ in range(epochs):
            order = torch.from_numpy(train_idx)[torch.randperm(len(train_idx), generator=gen)]
            for i in range(0, len(order), batch_size):
                idx = order[i:i + batch_size]
                loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
        model.eval()
        with torch.no_grad():
            pred = model(x_all[torch.from_numpy(val_idx)]).argmax(dim=1)
        acc = float((pred == y_all[torch.from_numpy(val_idx)]).float().mean())
        accs.append(acc)
        log.info("extractor fold %d/%d: val accuracy %.3f", k + 1, folds, acc)
        if acc > best_acc:
            best, best_acc = model, acc

    best.trained_on = trained_on
    best.cv_folds = folds
    best.fold_accuracies = accs
    for p in best.parameters():
        p.requires_grad_(False)
    return best.eval()


def _smooth_l1_stack(fa: List[torch.Tensor], fb: List[torch.Tensor], cfg: PerceptualConfig) -> torch.Tensor:
    if len(cfg.layer_weights) != len(fa):
        raise ValueError(f"{len(cfg.layer_weights)} layer weights for {len(fa)} stages")
    total = fa[0].new_zeros(())
    for w, a, b in zip(cfg.layer_weights, fa, fb):
        if w:
            total = total + w * F.smooth_l1_loss(a, b, beta=cfg.smooth_l1_beta)
    return total


def perceptual_loss(fe: FeatureExtractor, x_hat, x_ref, cfg: PerceptualConfig = PerceptualConfig()) -> torch.Tensor:
    """Weighted sum over stages of the mean SmoothL1 distance between feature maps."""
    return _smooth_l1_stack(fe.features(_as_batch(x_hat)), fe.features(_as_batch(x_ref)), cfg)


@dataclasses.dataclass
class LossParts:
    mse: torch.Tensor
    perceptual: torch.Tensor
    snr_weight: float
    lambda_p: float
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "mse": float(self.mse.detach()),
            "perceptual": float(self.perceptual.detach()),
            "snr_weight": self.snr_weight,
            "total": float(self.total.detach()),
        }


def total_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    x0_hat: torch.Tensor,
    x0: torch.Tensor,
    t: int,
    sch: dm.NoiseSchedule,
    cfg: PerceptualConfig,
    fe: Optional[FeatureExtractor] = None,
) -> LossParts:
    """Mean squared prediction error plus lambda_p * w_snr(t) * perceptual term."""
    mse = F.mse_loss(pred, target)
    if cfg.lambda_p == 0:
        perc = mse.new_zeros(())
    else:
        if fe is None:
            raise ValueError("a feature extractor is required when lambda_p > 0")
        perc = perceptual_loss(fe, x0_hat, x0, cfg)
    w = dm.snr_weight(int(t), sch, cfg.snr_kind) if cfg.snr_weighting else 1.0
    total = mse + (cfg.lambda_p * w) * perc
    return LossParts(mse=mse, perceptual=perc, snr_weight=w, lambda_p=cfg.lambda_p, total=total)


def _unit(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (torch.sqrt((f * f).sum(dim=1, keepdim=True)) + eps)


@torch.no_grad()
def perceptual_distance(fe: FeatureExtractor, a, b) -> float:
    """LPIPS-style distance: channel-normalized features, squared difference summed
    over channels, averaged over voxels, then over stages."""
    fa = fe.features(_as_batch(a))
    fb = fe.features(_as_batch(b))
    per_stage = [((_unit(x) - _unit(y)) ** 2).sum(dim=1).mean() for x, y in zip(fa, fb)]
    return float(torch.stack(per_stage).mean())


@dataclasses.dataclass
class KSelection:
    k: int
    tau: float
    curve: np.ndarray  # mean distance for t = 1..T
    per_subject_curves: np.ndarray  # (n_pairs, T)
    per_subject_k: List[int]
    reached: bool


def _first_below(curve: np.ndarray, tau: float) -> Tuple[int, bool]:
    hits = np.nonzero(curve <= tau)[0]
    if len(hits) == 0:
        return len(curve), False
    return int(hits[0]) + 1, True


@torch.no_grad()
def distance_curve(fe: FeatureExtractor, ulf: np.ndarray, hf: np.ndarray, sch: dm.NoiseSchedule,
                   eps: np.ndarray, steps: Optional[Sequence[int]] = None) -> np.ndarray:
    steps = range(1, sch.T + 1) if steps is None else steps
    out = []
    for t in steps:
        out.append(perceptual_distance(fe, dm.q_sample(ulf, t, eps, sch), dm.q_sample(hf, t, eps, sch)))
    return np.asarray(out)


def select_k(
    fe: FeatureExtractor,
    paired: Sequence[Tuple[np.ndarray, np.ndarray]],
    sch: dm.NoiseSchedule,
    tau: Optional[float] = None,
    seed: int = 0,
    tau_rel: float = 0.05,
) -> KSelection:
    """Smallest step t where noised uLF and HF are perceptually within ``tau``.

    Each pair shares one noise draw between its uLF and HF volume. ``tau``
    defaults to ``tau_rel`` times the mean distance at t = 1.
    """
    if len(paired) == 0:
        raise EmptyPairs("select_k needs at least one (uLF, HF) pair")
    rng = np.random.default_rng(seed)
    curves = []
    for ulf, hf in paired:
        ulf = np.asarray(ulf.data if isinstance(ulf, VolumeGrid) else ulf, dtype=np.float32)
        hf = np.asarray(hf.data if isinstance(hf, VolumeGrid) else hf, dtype=np.float32)
        eps = rng.standard_normal(ulf.shape).astype(np.float32)
        curves.append(distance_curve(fe, ulf, hf, sch, eps))
    per_subject = np.stack(curves)
    curve = per_subject.mean(axis=0)
    if tau is None:
        tau = tau_rel * float(curve[0])
    k, reached = _first_below(curve, tau)
    if not reached:
        log.warning("perceptual distance never fell below tau=%.3g; using K = T = %d", tau, sch.T)
    per_k = [_first_below(c, tau)[0] for c in per_subject]
    return KSelection(k=k, tau=float(tau), curve=curve, per_subject_curves=per_subject,
                      per_subject_k=per_k, reached=reached)


def save_extractor(path, fe: FeatureExtractor):
    config = {"channels": list(fe.channels), "n_classes": fe.n_classes}
    return save_checkpoint(path, "extractor", config, fe.state_dict(), trained_on=fe.trained_on,
                           cv_folds=fe.cv_folds, fold_accuracies=list(fe.fold_accuracies))


def load_extractor(path) -> FeatureExtractor:
    payload = load_checkpoint(path, "extractor")
    cfg = payload["config"]
    fe = FeatureExtractor(cfg["channels"], n_classes=cfg["n_classes"])
    fe.load_state_dict(payload["state_dict"])
    fe.trained_on = payload.get("trained_on", "unknown")
    fe.cv_folds = payload.get("cv_folds", 0)
    fe.fold_accuracies = payload.get("fold_accuracies", [])
    for p in fe.parameters():
        p.requires_grad_(False)
    return fe.eval()
