"""Image-to-image sampling from a partially noised uLF condition."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from pathlib import Path
from typing import Iterable, List, Tuple

import numpy as np
import torch

from . import diffusion as dm
from .denoiser import guided_predict
from .errors import MRIQTError, StepOutOfRange
from .volume import Modality, VolumeGrid, denormalize, load_volume, normalize_unit, save_volume

log = logging.getLogger(__name__)

RANGE_GUARD = 0.10


@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    k_start: int
    guidance: dm.GuidanceConfig = dm.GuidanceConfig()
    seed: int = 0
    deterministic_tail: bool = False
    literal_init: bool = False
    prediction: dm.Prediction = dm.Prediction.V


def initial_state(cond: torch.Tensor, k: int, sch: dm.NoiseSchedule, gen: torch.Generator,
                  literal: bool = False) -> torch.Tensor:
    eps = torch.randn(cond.shape, generator=gen, dtype=cond.dtype)
    if literal:
        return cond + eps
    return dm.q_sample(cond, k, eps, sch)


@torch.no_grad()
def sample(model, cond: VolumeGrid, sch: dm.NoiseSchedule, cfg: SamplerConfig) -> VolumeGrid:
    """Denoise from x_K = q_sample(cond, K, eps) down to x_0 with guided predictions.

    ``cond`` may be in native units (it is normalized here) or already
    normalized with its ``source_range`` recorded. The result is mapped back to
    the condition's intensity range.
    """
    if not 1 <= cfg.k_start <= sch.T:
        raise StepOutOfRange(f"k_start={cfg.k_start} outside [1, {sch.T}]")
    if cond.source_range is None:
        cond = normalize_unit(cond)
    model.eval()
    gen = torch.Generator().manual_seed(int(cfg.seed))
    c = torch.from_numpy(np.ascontiguousarray(cond.data, dtype=np.float32))[None, None]
    x = initial_state(c, cfg.k_start, sch, gen, cfg.literal_init)
    noise_scale = 0.0 if cfg.deterministic_tail else 1.0
    for t in range(cfg.k_start, 0, -1):
        out = guided_predict(model, x, c, t, cfg.guidance)
        x = dm.ddpm_step(x, out, t, sch, gen, prediction=cfg.prediction, noise_scale=noise_scale)
    x0 = x.clamp(-1.0, 1.0)[0, 0].numpy()

    lo, hi = cond.source_range
    data = denormalize(x0, cond.source_range)
    margin = RANGE_GUARD * (hi - lo)
    if data.min() < lo - margin or data.max() > hi + margin:
        log.warning("output range [%.4g, %.4g] exceeds condition range [%.4g, %.4g] by more than %d%%",
                    data.min(), data.max(), lo, hi, int(RANGE_GUARD * 100))
    return VolumeGrid(data, cond.spacing_mm, Modality.GENERATED, cond.subject_id)


def batch_sample(
    model,
    inputs: Iterable[Tuple[str, Path]],
    sch: dm.NoiseSchedule,
    cfg: SamplerConfig,
    out_dir,
) -> List[Path]:
    """Sample every (subject_id, path) input into ``out_dir``.

    Volume ``i`` uses seed ``cfg.seed + i``. Timings go to ``timing.csv``;
    inputs that fail are listed in ``failures.csv`` and skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: List[Path] = []
    timings = []
    failures = []
    for i, (subject_id, path) in enumerate(inputs):
        try:
            cond = load_volume(path)
            t0 = time.perf_counter()
            gen = sample(model, cond, sch, dataclasses.replace(cfg, seed=cfg.seed + i))
            seconds = time.perf_counter() - t0
            dest = out_dir / f"sub-{subject_id}_gen.raw"
            save_volume(gen.replace(subject_id=subject_id), dest)
        except MRIQTError as exc:
            log.error("sampling failed for %s (%s): %s", subject_id, path, exc)
            failures.append((subject_id, str(path), str(exc)))
            continue
        outputs.append(dest)
        timings.append((subject_id, cfg.k_start, f"{seconds:.4f}", int(np.prod(cond.shape))))
        log.info("sampled %s in %.2fs", subject_id, seconds)

    with open(out_dir / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "k", "seconds", "voxels"])
        w.writerows(timings)
    if failures:
        with open(out_dir / "failures.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "path", "error"])
            w.writerows(failures)
    return outputs
