r"""Closed-form diffusion algebra.

Steps are 1-based: ``t`` runs over 1..T and ``alpha_bar_0 = 1`` by convention.
Writing ``a = sqrt(alpha_bar_t)`` and ``b = sqrt(1 - alpha_bar_t)``::

    x_t = a x0 + b eps
    v   = a eps - b x0
    x0  = a x_t - b v
    eps = b x_t + a v

Every function here works on numpy arrays and torch tensors alike. ``t`` is
either a python int or an integer tensor/array with one entry per batch item
(broadcast over the trailing dimensions of the volume).
"""

from __future__ import annotations

import dataclasses
import enum
import math
from typing import Optional, Union

import numpy as np
import torch

from .errors import InvalidT, ShapeMismatch, StepOutOfRange

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


class ScheduleKind(str, enum.Enum):
    LINEAR = "LINEAR"
    COSINE = "COSINE"


class Prediction(str, enum.Enum):
    V = "v"
    EPS = "eps"


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: ScheduleKind

    def alpha_bar(self, t: int) -> float:
        """alpha_bar at integer step t, with alpha_bar_0 = 1."""
        if t == 0:
            return 1.0
        _check_step(t, self.T)
        return float(self.alpha_bars[t - 1])

    def dump(self, path) -> None:
        header = f"kind={self.kind.value} T={self.T}\nbeta alpha alpha_bar"
        np.savetxt(path, np.stack([self.betas, self.alphas, self.alpha_bars], axis=1), fmt="%.17g", header=header)

    @classmethod
    def load(cls, path) -> "NoiseSchedule":
        with open(path) as fh:
            first = fh.readline().lstrip("# ").split()
        meta = dict(item.split("=") for item in first)
        arr = np.loadtxt(path, ndmin=2)
        return cls(T=int(meta["T"]), betas=arr[:, 0], alphas=arr[:, 1], alpha_bars=arr[:, 2],
                   kind=ScheduleKind(meta["kind"]))


@dataclasses.dataclass(frozen=True)
class GuidanceConfig:
    weight: float = 2.0
    cond_drop_prob: float = 0.1

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("guidance weight must be >= 0")
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise ValueError("cond_drop_prob must be in [0, 1)")


def make_schedule(kind: Union[ScheduleKind, str] = ScheduleKind.COSINE, T: int = 1000) -> NoiseSchedule:
    kind = ScheduleKind(kind)
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise InvalidT(f"T must be an integer >= 2, got {T!r}")
    T = int(T)
    if kind is ScheduleKind.LINEAR:
        betas = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, T, dtype=np.float64)
    else:
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, MAX_BETA)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars, kind=kind)


def _check_step(t, T: int) -> None:
    if isinstance(t, (torch.Tensor, np.ndarray)):
        bad = bool(((t < 1) | (t > T)).any())
    else:
        bad = not 1 <= int(t) <= T
    if bad:
        raise StepOutOfRange(f"step(s) {t} outside [1, {T}]")


def _coef(values: np.ndarray, t, like):
    """values[t-1] as a scalar, or broadcast per batch item when t is an array."""
    _check_step(t, len(values))
    if isinstance(t, torch.Tensor):
        c = torch.as_tensor(values, dtype=like.dtype if isinstance(like, torch.Tensor) else torch.float64)
        c = c.to(t.device)[t.long() - 1]
        return c.reshape(-1, *([1] * (like.ndim - 1)))
    if isinstance(t, np.ndarray):
        c = values[t.astype(int) - 1]
        return c.reshape(-1, *([1] * (like.ndim - 1)))
    return float(values[int(t) - 1])


def _same_shape(*xs) -> None:
    shapes = {tuple(x.shape) for x in xs}
    if len(shapes) != 1:
        raise ShapeMismatch(f"shape mismatch: {sorted(shapes)}")


def _sqrt_ab(sch, t, like):
    return _coef(np.sqrt(sch.alpha_bars), t, like), _coef(np.sqrt(1.0 - sch.alpha_bars), t, like)


def q_sample(x0, t, eps, sch: NoiseSchedule):
    _same_shape(x0, eps)
    a, b = _sqrt_ab(sch, t, x0)
    return a * x0 + b * eps


def v_from(x0, eps, t, sch: NoiseSchedule):
    _same_shape(x0, eps)
    a, b = _sqrt_ab(sch, t, x0)
    return a * eps - b * x0


def x0_from_v(x_t, v, t, sch: NoiseSchedule):
    _same_shape(x_t, v)
    a, b = _sqrt_ab(sch, t, x_t)
    return a * x_t - b * v


def eps_from_v(x_t, v, t, sch: NoiseSchedule):
    _same_shape(x_t, v)
    a, b = _sqrt_ab(sch, t, x_t)
    return b * x_t + a * v


def x0_from_eps(x_t, eps, t, sch: NoiseSchedule):
    _same_shape(x_t, eps)
    a, b = _sqrt_ab(sch, t, x_t)
    return (x_t - b * eps) / a


def cfg_merge(y_cond, y_uncond, w: float):
    """Classifier-free guidance merge y_uc + w (y_c - y_uc).

    Evaluated as (1 - w) y_uc + w y_c so that w = 0 and w = 1 reproduce the
    uncond/cond prediction bit-exactly.
    """
    _same_shape(y_cond, y_uncond)
    return (1.0 - w) * y_uncond + w * y_cond


def posterior_coefs(t: int, sch: NoiseSchedule):
    """(coef_x0, coef_xt, variance) of q(x_{t-1} | x_t, x0)."""
    _check_step(t, sch.T)
    ab_t = sch.alpha_bar(t)
    ab_prev = sch.alpha_bar(t - 1)
    beta = float(sch.betas[t - 1])
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab_t)
    ct = math.sqrt(float(sch.alphas[t - 1])) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = (1.0 - ab_prev) * beta / (1.0 - ab_t)
    return c0, ct, var


def predict_x0(x_t, model_out, t, sch: NoiseSchedule, prediction: Union[Prediction, str] = Prediction.V):
    if Prediction(prediction) is Prediction.V:
        return x0_from_v(x_t, model_out, t, sch)
    return x0_from_eps(x_t, model_out, t, sch)


def ddpm_step(
    x_t,
    model_out,
    t: int,
    sch: NoiseSchedule,
    rng: Optional[torch.Generator] = None,
    *,
    prediction: Union[Prediction, str] = Prediction.V,
    clip: bool = True,
    noise_scale: float = 1.0,
):
    """One ancestral step x_t -> x_{t-1} using the small posterior variance.

    ``noise_scale=0`` gives the deterministic test hook (sigma = 0).
    """
    _same_shape(x_t, model_out)
    _check_step(t, sch.T)
    x0_hat = predict_x0(x_t, model_out, t, sch, prediction)
    if clip:
        x0_hat = x0_hat.clamp(-1.0, 1.0) if isinstance(x0_hat, torch.Tensor) else np.clip(x0_hat, -1.0, 1.0)
    c0, ct, var = posterior_coefs(t, sch)
    mean = c0 * x0_hat + ct * x_t
    if t == 1 or noise_scale == 0.0:
        return mean
    if isinstance(x_t, torch.Tensor):
        z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype, device=x_t.device)
    else:
        if rng is None:
            raise ValueError("a numpy Generator is required for numpy inputs")
        z = rng.standard_normal(x_t.shape)
    return mean + noise_scale * math.sqrt(var) * z


def snr(t, sch: NoiseSchedule):
    _check_step(t, sch.T)
    ab = sch.alpha_bars[np.asarray(t) - 1]
    out = ab / (1.0 - ab)
    return float(out) if np.ndim(out) == 0 else out


def snr_weight(t, sch: NoiseSchedule, kind: str = "alpha_bar"):
    """Perceptual-loss weight that vanishes at high noise.

    ``alpha_bar`` (default) equals snr / (snr + 1); ``min_snr`` is min(1, snr).
    """
    _check_step(t, sch.T)
    ab = sch.alpha_bars[np.asarray(t) - 1]
    if kind == "alpha_bar":
        out = ab
    elif kind == "min_snr":
        out = np.minimum(1.0, ab / (1.0 - ab))
    else:
        raise ValueError(f"unknown snr weighting {kind!r}")
    return float(out) if np.ndim(out) == 0 else out
