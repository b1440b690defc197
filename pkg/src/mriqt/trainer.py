"""Training loop: v-prediction MSE plus SNR-weighted perceptual alignment."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch

from . import diffusion as dm
from .denoiser import ConditionBatch, Denoiser3D, DenoiserConfig, apply_cond_dropout, predict_v
from .errors import CorruptHeader, StepOutOfRange
from .perceptual import FeatureExtractor, LossParts, PerceptualConfig, total_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "t", "lr", "mse", "perceptual", "total", "wallclock"]


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    warmup_steps: int = 150
    peak_lr: float = 5e-4
    weight_decay: float = 2e-5
    batch_size: int = 4
    T: int = 200
    schedule: str = "COSINE"
    prediction: str = "v"
    lambda_p: float = 0.25
    snr_kind: str = "alpha_bar"
    cond_drop_prob: float = 0.1
    guidance_weight: float = 2.0
    seed: int = 0
    base_channels: int = 16
    channel_mults: Tuple[int, ...] = (1, 2, 4)
    checkpoint_every: int = 0
    # "steps" (default) or "epochs": how the step budget is counted
    step_unit: str = "steps"

    def __post_init__(self):
        if not self.warmup_steps < self.steps:
            raise ValueError("warmup_steps must be smaller than steps")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        dm.Prediction(self.prediction)
        dm.ScheduleKind(self.schedule)
        if self.step_unit not in ("steps", "epochs"):
            raise ValueError("step_unit must be 'steps' or 'epochs'")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(steps=30000, warmup_steps=1500, peak_lr=2e-5, weight_decay=2e-5, T=1000)
        base.update(overrides)
        return cls(**base)

    def perceptual(self) -> PerceptualConfig:
        return PerceptualConfig(lambda_p=self.lambda_p, snr_kind=self.snr_kind)

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(base_channels=self.base_channels, channel_mults=tuple(self.channel_mults))

    def schedule_obj(self) -> dm.NoiseSchedule:
        return dm.make_schedule(self.schedule, self.T)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, cls=TrainConfig, **overrides):
    """Parse ``key = value`` lines ('#' starts a comment). Unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CorruptHeader(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise CorruptHeader(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(getattr(defaults, key), value)
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(fields)
    if unknown:
        raise CorruptHeader(f"unknown config keys {sorted(unknown)}")
    return cls(**values)


def _coerce(default, value: str):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise CorruptHeader(f"not a boolean: {value!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.split(","))
    try:
        return type(default)(value)
    except ValueError as exc:
        raise CorruptHeader(f"cannot parse {value!r} as {type(default).__name__}") from exc


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine annealing to 0."""
    if not 0 <= step < cfg.steps:
        raise StepOutOfRange(f"step {step} outside [0, {cfg.steps})")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.peak_lr, weight_decay=cfg.weight_decay)


def train_step(
    model: torch.nn.Module,
    hf: torch.Tensor,
    ulf: torch.Tensor,
    sch: dm.NoiseSchedule,
    cfg: TrainConfig,
    optimizer: torch.optim.Optimizer,
    gen: torch.Generator,
    fe: Optional[FeatureExtractor] = None,
) -> Tuple[int, LossParts]:
    """One optimizer update on a (B, 1, H, W, D) batch of normalized HF and simulated-uLF volumes.

    A single step t is drawn for the whole batch.
    """
    model.train()
    b = hf.shape[0]
    t = int(torch.randint(1, sch.T + 1, (1,), generator=gen))
    eps = torch.randn(hf.shape, generator=gen, dtype=hf.dtype)
    x_t = dm.q_sample(hf, t, eps, sch)
    batch = apply_cond_dropout(ConditionBatch(x_t, ulf, torch.full((b,), t)), cfg.cond_drop_prob, gen)
    out = predict_v(model, batch)
    if dm.Prediction(cfg.prediction) is dm.Prediction.V:
        target = dm.v_from(hf, eps, t, sch)
    else:
        target = eps
    x0_hat = dm.predict_x0(x_t, out, t, sch, cfg.prediction)
    parts = total_loss(out, target, x0_hat, hf, t, sch, cfg.perceptual(), fe)
    optimizer.zero_grad(set_to_none=True)
    parts.total.backward()
    optimizer.step()
    return t, parts


def _save_state(path: Path, model, optimizer, gen: torch.Generator, step: int, cfg: TrainConfig) -> None:
    torch.save({
        "version": 1,
        "kind": "train-state",
        "step": step,
        "config": dataclasses.asdict(cfg),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "generator": gen.get_state(),
    }, path)


def train(
    hf: torch.Tensor,
    ulf: torch.Tensor,
    cfg: TrainConfig,
    out_dir,
    *,
    fe: Optional[FeatureExtractor] = None,
    resume: Optional[Path] = None,
    stop_at: Optional[int] = None,
) -> Tuple[Denoiser3D, List[dict]]:
    """Train a denoiser on stacked (N, 1, H, W, D) tensors of paired volumes.

    Writes ``train_log.csv`` (appending when resuming) and ``state_<step>.pt``
    checkpoints every ``cfg.checkpoint_every`` steps plus one at the end.
    ``stop_at`` ends the run early (after that many total steps) while keeping
    the learning-rate schedule of the full run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sch = cfg.schedule_obj()
    torch.manual_seed(cfg.seed)
    model = Denoiser3D(cfg.denoiser())
    optimizer = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    start = 0
    if resume is not None:
        state = torch.load(resume, map_location="cpu", weights_only=False)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        gen.set_state(state["generator"])
        start = int(state["step"])

    n = hf.shape[0]
    if cfg.step_unit == "epochs":
        total_steps = cfg.steps * math.ceil(n / cfg.batch_size)
        sched_cfg = dataclasses.replace(cfg, steps=total_steps,
                                        warmup_steps=cfg.warmup_steps * math.ceil(n / cfg.batch_size),
                                        step_unit="steps")
    else:
        total_steps, sched_cfg = cfg.steps, cfg
    end = total_steps if stop_at is None else min(stop_at, total_steps)

    log_path = out_dir / "train_log.csv"
    mode = "a" if resume is not None and log_path.exists() else "w"
    history = []
    t_start = time.perf_counter()
    with open(log_path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if mode == "w":
            writer.writeheader()
        for step in range(start, end):
            lr = lr_at(step, sched_cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen)
            t, parts = train_step(model, hf[idx], ulf[idx], sch, cfg, optimizer, gen, fe)
            vals = parts.as_floats()
            row = {"step": step, "t": t, "lr": f"{lr:.8g}",
                   **{k: f"{vals[k]:.8g}" for k in ("mse", "perceptual", "total")},
                   "wallclock": f"{time.perf_counter() - t_start:.3f}"}
            writer.writerow(row)
            history.append({"step": step, "t": t, "lr": lr, **vals})
            if step % 200 == 0:
                log.info("step %d lr %.3g loss %.4f (mse %.4f perc %.4f)", step, lr, vals["total"],
                         vals["mse"], vals["perceptual"])
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                _save_state(out_dir / f"state_{step + 1}.pt", model, optimizer, gen, step + 1, cfg)
    _save_state(out_dir / f"state_{end}.pt", model, optimizer, gen, end, cfg)
    model.eval()
    return model, history
