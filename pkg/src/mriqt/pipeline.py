"""End-to-end desk-scale pipeline.

phantoms -> transfer function -> feature extractor -> denoiser training ->
start-step selection -> sampling -> evaluation. Each stage is exposed on its own
so the CLI and tests can run stages separately.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import diffusion as dm
from .denoiser import Denoiser3D, save_denoiser
from .evalkit import MetricReport, evaluate_volumes, format_table
from .kspace import TransferFunction, apply_transfer, estimate_transfer, save_transfer
from .manifest import DatasetManifest, Split
from .perceptual import FeatureExtractor, KSelection, save_extractor, select_k, train_extractor
from .phantom import make_dataset
from .sampler import SamplerConfig, sample
from .trainer import TrainConfig, train
from .volume import VolumeGrid, load_volume, normalize_unit, save_volume

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    shape: Tuple[int, int, int] = (16, 16, 16)
    n_paired: int = 20
    n_test_paired: int = 10
    n_hf_only: int = 40
    n_ulf_only: int = 0
    seed: int = 0
    lambda_rel: float = 1e-2
    sim_noise: bool = True
    extractor_folds: int = 5
    extractor_epochs: int = 60
    k_start: Optional[int] = None  # None: use the selected K
    tau_rel: float = 0.05
    guidance_weight: float = 2.0
    train: TrainConfig = TrainConfig()


def load_normalized(path) -> VolumeGrid:
    return normalize_unit(load_volume(path))


def fit_transfer(manifest: DatasetManifest, lambda_rel: float = 1e-2,
                 lambda_reg: Optional[float] = None) -> TransferFunction:
    pairs = [(load_volume(manifest.resolve(e.ulf)), load_volume(manifest.resolve(e.hf)))
             for e in manifest.pairs(Split.TRAIN)]
    return estimate_transfer(pairs, lambda_reg, lambda_rel=lambda_rel)


def fit_extractor(manifest: DatasetManifest, folds: int, epochs: int, seed: int) -> FeatureExtractor:
    entries = [(e.hf, e.label) for e in manifest.pairs(Split.TRAIN)]
    entries += [(e.path, e.label) for e in manifest.hf(Split.TRAIN)]
    vols = [load_normalized(manifest.resolve(p)).data for p, _ in entries]
    labels = [lab or 0 for _, lab in entries]
    return train_extractor(vols, labels, folds=folds, seed=seed, epochs=epochs)


def training_tensors(manifest: DatasetManifest, tf: TransferFunction, seed: int,
                     sim_noise: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack normalized (HF, simulated uLF) pairs built from the HF-only training volumes.

    Both volumes of a pair use the simulated uLF's affine, matching the sampler,
    which can only de-normalize with the condition's range.
    """
    rng = np.random.default_rng([seed, 17])
    hfs, ulfs = [], []
    for e in manifest.hf(Split.TRAIN):
        hf = load_volume(manifest.resolve(e.path))
        sim = apply_transfer(tf, hf, add_noise=sim_noise, rng=rng)
        sim_n = normalize_unit(sim)
        hfs.append(normalize_unit(hf, sim_n.source_range).data)
        ulfs.append(sim_n.data)
    to_t = lambda xs: torch.from_numpy(np.stack(xs)[:, None].astype(np.float32))
    return to_t(hfs), to_t(ulfs)


def choose_k(fe: FeatureExtractor, manifest: DatasetManifest, sch: dm.NoiseSchedule, seed: int,
             tau_rel: float = 0.05) -> KSelection:
    pairs = [(load_normalized(manifest.resolve(e.ulf)).data, load_normalized(manifest.resolve(e.hf)).data)
             for e in manifest.pairs(Split.TRAIN)]
    return select_k(fe, pairs, sch, seed=seed, tau_rel=tau_rel)


def generate_test_set(model, manifest: DatasetManifest, sch: dm.NoiseSchedule, cfg: SamplerConfig,
                      out_dir: Optional[Path] = None) -> Dict[str, Tuple[np.ndarray, float]]:
    """Sample every TEST pair's uLF volume; returns subject -> (volume, seconds)."""
    out = {}
    for i, e in enumerate(manifest.pairs(Split.TEST)):
        cond = load_volume(manifest.resolve(e.ulf))
        t0 = time.perf_counter()
        gen = sample(model, cond, sch, dataclasses.replace(cfg, seed=cfg.seed + i))
        out[e.subject_id] = (gen.data, time.perf_counter() - t0)
        if out_dir is not None:
            save_volume(gen.replace(subject_id=e.subject_id), Path(out_dir) / f"sub-{e.subject_id}_gen.raw")
    return out


def evaluate_generated(manifest: DatasetManifest, generated: Dict[str, np.ndarray], fe: Optional[FeatureExtractor],
                       method: str, baseline: Optional[MetricReport] = None) -> MetricReport:
    triples = []
    for e in manifest.pairs(Split.TEST):
        ref = load_volume(manifest.resolve(e.hf)).data
        triples.append((e.subject_id, generated[e.subject_id], ref))
    return evaluate_volumes(triples, fe, method=method, baseline=baseline)


def baseline_report(manifest: DatasetManifest, fe: Optional[FeatureExtractor]) -> MetricReport:
    ulf = {e.subject_id: load_volume(manifest.resolve(e.ulf)).data for e in manifest.pairs(Split.TEST)}
    return evaluate_generated(manifest, ulf, fe, "Baseline [uLF-HF]")


@dataclasses.dataclass
class PipelineResult:
    out_dir: Path
    manifest: DatasetManifest
    transfer: TransferFunction
    extractor: FeatureExtractor
    model: Denoiser3D
    selection: KSelection
    k_used: int
    report: MetricReport
    baseline: MetricReport
    history: List[dict]


def run_pipeline(cfg: PipelineConfig, out_dir) -> PipelineResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)

    manifest = make_dataset(cfg.n_paired, cfg.n_hf_only, cfg.n_ulf_only, cfg.seed, out_dir / "data",
                            shape=cfg.shape, n_test_paired=cfg.n_test_paired)
    log.info("phantoms written: %d paired, %d HF-only", len(manifest.paired), len(manifest.hf_only))

    tf = fit_transfer(manifest, cfg.lambda_rel)
    save_transfer(tf, out_dir / "transfer.bin")

    fe = fit_extractor(manifest, cfg.extractor_folds, cfg.extractor_epochs, cfg.seed)
    save_extractor(out_dir / "extractor.ckpt", fe)
    log.info("extractor fold accuracies: %s", fe.fold_accuracies)

    hf, ulf = training_tensors(manifest, tf, cfg.seed, cfg.sim_noise)
    model, history = train(hf, ulf, cfg.train, out_dir / "train", fe=fe)
    sch = cfg.train.schedule_obj()
    save_denoiser(out_dir / "denoiser.ckpt", model, schedule={"kind": sch.kind.value, "T": sch.T},
                  prediction=cfg.train.prediction)

    selection = choose_k(fe, manifest, sch, cfg.seed, cfg.tau_rel)
    _write_curve(out_dir / "k_curve.csv", selection)
    k = cfg.k_start if cfg.k_start is not None else selection.k

    scfg = SamplerConfig(k_start=k, guidance=dm.GuidanceConfig(weight=cfg.guidance_weight), seed=cfg.seed,
                         prediction=dm.Prediction(cfg.train.prediction))
    gen_dir = out_dir / "generated"
    gen_dir.mkdir(exist_ok=True)
    generated = generate_test_set(model, manifest, sch, scfg, gen_dir)

    base = baseline_report(manifest, fe)
    report = evaluate_generated(manifest, {s: g for s, (g, _) in generated.items()}, fe, "MRIQT", baseline=base)
    base.write_csv(out_dir / "baseline_metrics.csv")
    report.write_csv(out_dir / "metrics.csv")
    table = format_table([base, report])
    (out_dir / "table.txt").write_text(table + "\n")
    log.info("\n%s", table)
    (out_dir / "summary.json").write_text(json.dumps({
        "k_selected": selection.k, "k_used": k, "tau": selection.tau,
        "psnr_generated": report.aggregate["psnr"][0], "psnr_baseline": base.aggregate["psnr"][0],
        "lpips_generated": report.aggregate["lpips3d"][0], "lpips_baseline": base.aggregate["lpips3d"][0],
    }, indent=1) + "\n")
    return PipelineResult(out_dir, manifest, tf, fe, model, selection, k, report, base, history)


def _write_curve(path: Path, sel: KSelection) -> None:
    with open(path, "w") as fh:
        fh.write("t,mean_distance," + ",".join(f"subject{i}" for i in range(len(sel.per_subject_curves))) + "\n")
        for t in range(len(sel.curve)):
            vals = [f"{sel.curve[t]:.8g}"] + [f"{c[t]:.8g}" for c in sel.per_subject_curves]
            fh.write(f"{t + 1}," + ",".join(vals) + "\n")


# ablation rows: network target and perceptual weight
ABLATIONS: Dict[str, Dict[str, object]] = {
    "eps-pred, lambda_p=0.25": {"prediction": "eps", "lambda_p": 0.25},
    "v-pred, lambda_p=0": {"prediction": "v", "lambda_p": 0.0},
    "v-pred, lambda_p=0.25": {"prediction": "v", "lambda_p": 0.25},
}


def run_ablation(base: PipelineResult, cfg: PipelineConfig, out_dir,
                 variants: Dict[str, Dict[str, object]] = ABLATIONS) -> Tuple[List[MetricReport], str]:
    """Retrain the denoiser once per variant on the data, transfer function,
    extractor and K of a finished pipeline run, then evaluate each on the TEST set.

    A variant whose training config equals ``cfg.train`` reuses ``base.model``.
    Writes ``ablation_table.txt`` and one metrics CSV per variant.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hf, ulf = None, None
    reports = []
    for i, (name, overrides) in enumerate(variants.items()):
        tcfg = dataclasses.replace(cfg.train, **overrides)
        if tcfg == cfg.train:
            model = base.model
        else:
            if hf is None:
                hf, ulf = training_tensors(base.manifest, base.transfer, cfg.seed, cfg.sim_noise)
            fe = base.extractor if tcfg.lambda_p > 0 else None
            model, _ = train(hf, ulf, tcfg, out_dir / f"variant{i}", fe=fe)
        sch = tcfg.schedule_obj()
        scfg = SamplerConfig(k_start=base.k_used, guidance=dm.GuidanceConfig(weight=cfg.guidance_weight),
                             seed=cfg.seed, prediction=dm.Prediction(tcfg.prediction))
        generated = generate_test_set(model, base.manifest, sch, scfg)
        rep = evaluate_generated(base.manifest, {s: g for s, (g, _) in generated.items()}, base.extractor,
                                 name, baseline=base.baseline)
        rep.write_csv(out_dir / f"variant{i}_metrics.csv")
        reports.append(rep)
        log.info("ablation %s: psnr %.3f lpips3d %.4f", name, rep.aggregate["psnr"][0], rep.aggregate["lpips3d"][0])
    table = format_table(reports)
    (out_dir / "ablation_table.txt").write_text(table + "\n")
    return reports, table
