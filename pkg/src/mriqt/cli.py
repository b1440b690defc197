"""Command-line entry point: ``mriqt <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error. Every command writes a
resolved-config snapshot (JSON) beside its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from . import diffusion as dm
from .denoiser import load_denoiser, save_denoiser
from .errors import MRIQTError
from .evalkit import evaluate_cohort, format_table
from .kspace import apply_transfer, estimate_transfer, load_transfer, radial_power_spectrum, save_transfer
from .manifest import DatasetManifest, Split
from .perceptual import load_extractor, save_extractor, select_k
from .phantom import make_dataset
from .pipeline import PipelineConfig, _write_curve, fit_extractor, load_normalized, run_pipeline, training_tensors
from .sampler import SamplerConfig, batch_sample, sample
from .trainer import TrainConfig, parse_config_text, train
from .volume import load_volume, save_volume

log = logging.getLogger("mriqt")

SNAPSHOT_VERSION = 1


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser that exits with status 1 and prints the (sub)command help on usage errors."""

    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(1, f"\n{self.prog}: error: {message}\n")


def _shape(text: str):
    parts = [int(p) for p in text.lower().replace("x", ",").split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("shape must have 3 dims, e.g. 16x16x16")
    return tuple(parts)


def write_snapshot(args: argparse.Namespace, dest: Path) -> Path:
    """Write the resolved arguments next to the outputs.

    ``dest`` is an output directory (snapshot ``run_config.json`` inside) or an
    output file (snapshot ``<name>.config.json`` beside it).
    """
    dest = Path(dest)
    path = dest / "run_config.json" if dest.is_dir() else dest.with_name(dest.name + ".config.json")
    values = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if not k.startswith("_")}
    values = {k: ([str(x) for x in v] if isinstance(v, list) else v) for k, v in values.items()}
    path.write_text(json.dumps({"snapshot_version": SNAPSHOT_VERSION, "mriqt_version": __version__,
                                **values}, indent=1, sort_keys=True) + "\n")
    return path


# commands


def cmd_make_phantoms(args) -> None:
    m = make_dataset(args.n_paired, args.n_hf_only, args.n_ulf_only, args.seed, args.out,
                     shape=args.shape, n_test_paired=args.n_test_paired)
    print(f"wrote {len(m.paired)} paired, {len(m.hf_only)} HF-only, {len(m.ulf_only)} uLF-only subjects to {args.out}")
    write_snapshot(args, args.out)


def cmd_estimate_transfer(args) -> None:
    manifest = DatasetManifest.load(args.pairs)
    pairs = [(load_volume(manifest.resolve(e.ulf)), load_volume(manifest.resolve(e.hf)))
             for e in manifest.pairs(Split.TRAIN)]
    tf = estimate_transfer(pairs, args.lam, lambda_rel=args.lambda_rel, hermitian=not args.no_hermitian)
    save_transfer(tf, args.out)
    print(f"transfer function {tf.shape} from {len(pairs)} pairs, lambda={tf.lambda_reg:.6g} -> {args.out}")
    write_snapshot(args, args.out)


def cmd_simulate_ulf(args) -> None:
    tf = load_transfer(args.tf)
    hf = load_volume(args.inp)
    sim = apply_transfer(tf, hf, add_noise=args.noise, rng=np.random.default_rng(args.seed))
    save_volume(sim, args.out)
    write_snapshot(args, args.out)


def cmd_train_extractor(args) -> None:
    manifest = DatasetManifest.load(args.manifest)
    fe = fit_extractor(manifest, args.folds, args.epochs, args.seed)
    save_extractor(args.out, fe)
    print("fold accuracies: " + ", ".join(f"{a:.3f}" for a in fe.fold_accuracies))
    write_snapshot(args, args.out)


def cmd_select_k(args) -> None:
    fe = load_extractor(args.extractor)
    manifest = DatasetManifest.load(args.manifest)
    sch = dm.make_schedule(args.schedule, args.T)
    pairs = [(load_normalized(manifest.resolve(e.ulf)).data, load_normalized(manifest.resolve(e.hf)).data)
             for e in manifest.pairs(Split.TRAIN)]
    sel = select_k(fe, pairs, sch, tau=args.tau, seed=args.seed, tau_rel=args.tau_rel)
    _write_curve(args.out, sel)
    print(f"K = {sel.k} (tau = {sel.tau:.6g}, reached = {sel.reached})")
    write_snapshot(args, args.out)


def train_config_from_args(args) -> TrainConfig:
    text = Path(args.config).read_text() if args.config else ""
    overrides = {k: getattr(args, k) for k in ("steps", "warmup_steps", "peak_lr", "batch_size", "T",
                                                "prediction", "lambda_p", "seed")}
    return parse_config_text(text, **overrides)


def cmd_train(args) -> None:
    cfg = train_config_from_args(args)
    manifest = DatasetManifest.load(args.manifest)
    tf = load_transfer(args.tf)
    fe = load_extractor(args.extractor) if args.extractor else None
    if cfg.lambda_p > 0 and fe is None:
        raise UsageError("--extractor is required when lambda_p > 0")
    hf, ulf = training_tensors(manifest, tf, cfg.seed)
    out = Path(args.out)
    model, _ = train(hf, ulf, cfg, out, fe=fe, resume=args.resume)
    sch = cfg.schedule_obj()
    save_denoiser(out / "denoiser.ckpt", model, schedule={"kind": sch.kind.value, "T": sch.T},
                  prediction=cfg.prediction)
    (out / "train_config.txt").write_text(cfg.to_text())
    print(f"trained {cfg.steps} {cfg.step_unit} -> {out / 'denoiser.ckpt'}")
    write_snapshot(args, out)


def _load_model(path):
    model, payload = load_denoiser(path)
    schedule = payload.get("schedule", {"kind": "COSINE", "T": 1000})
    sch = dm.make_schedule(schedule["kind"], int(schedule["T"]))
    return model, sch, dm.Prediction(payload.get("prediction", "v"))


def cmd_sample(args) -> None:
    model, sch, prediction = _load_model(args.ckpt)
    k = sch.T if args.k is None else args.k
    cfg = SamplerConfig(k_start=k, guidance=dm.GuidanceConfig(weight=args.guidance_weight), seed=args.seed,
                        literal_init=args.literal_init, prediction=prediction)
    out = Path(args.out)
    if args.manifest:
        manifest = DatasetManifest.load(args.manifest)
        split = Split(args.split)
        inputs = [(e.subject_id, manifest.resolve(e.ulf)) for e in manifest.pairs(split)]
        inputs += [(e.subject_id, manifest.resolve(e.path)) for e in manifest.ulf(split)]
        outs = batch_sample(model, inputs, sch, cfg, out)
        print(f"sampled {len(outs)}/{len(inputs)} volumes at K={k} -> {out}")
        write_snapshot(args, out)
        if len(outs) < len(inputs):
            raise MRIQTError(f"{len(inputs) - len(outs)} inputs failed; see {out / 'failures.csv'}")
        return
    if not args.inp:
        raise UsageError("sample needs --in (single volume) or --manifest (batch)")
    save_volume(sample(model, load_volume(args.inp), sch, cfg), out)
    write_snapshot(args, out)


def cmd_evaluate(args) -> None:
    if len(args.gen) != len(args.ref):
        raise UsageError("--gen and --ref need the same number of volumes")
    fe = load_extractor(args.extractor) if args.extractor else None
    reports = []
    base = None
    if args.baseline:
        base = evaluate_cohort(args.baseline, args.ref, fe, method=args.baseline_name)
        reports.append(base)
    rep = evaluate_cohort(args.gen, args.ref, fe, method=args.method, baseline=base)
    reports.append(rep)
    if args.out:
        rep.write_csv(args.out)
        if base is not None:
            base.write_csv(Path(args.out).with_name(Path(args.out).stem + "_baseline.csv"))
        write_snapshot(args, args.out)
    print(format_table(reports))


def cmd_spectra(args) -> None:
    spectra = [radial_power_spectrum(load_volume(p), args.bins) for p in args.inp]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "bin_count", *[Path(p).name for p in args.inp]])
        for i in range(args.bins):
            w.writerow([f"{spectra[0].bin_centers[i]:.8g}", int(spectra[0].bin_counts[i]),
                        *[f"{s.power[i]:.8g}" for s in spectra]])
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        for p, s in zip(args.inp, spectra):
            ok = s.bin_counts > 0
            ax.semilogy(s.bin_centers[ok], s.power[ok] + 1e-12, label=Path(p).name)
        ax.set_xlabel("spatial frequency (cycles/voxel)")
        ax.set_ylabel("mean power")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)
        plt.close(fig)
    write_snapshot(args, args.out)


def cmd_pipeline(args) -> None:
    tcfg = train_config_from_args(args)
    cfg = PipelineConfig(shape=args.shape, seed=args.seed, k_start=args.k, guidance_weight=args.guidance_weight,
                         extractor_epochs=args.extractor_epochs, train=tcfg)
    res = run_pipeline(cfg, args.out)
    print(f"K selected = {res.selection.k}, used = {res.k_used}")
    print(format_table([res.baseline, res.report]))
    write_snapshot(args, Path(args.out))


# parser


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file with TrainConfig fields (unknown keys rejected)")
    p.add_argument("--steps", type=int, help="optimizer steps (default 3000)")
    p.add_argument("--warmup-steps", type=int, help="linear warmup steps (default 150)")
    p.add_argument("--peak-lr", type=float, help="peak learning rate (default 5e-4)")
    p.add_argument("--batch-size", type=int, help="batch size (default 4)")
    p.add_argument("--T", type=int, dest="T", help="diffusion steps (default 200)")
    p.add_argument("--prediction", choices=["v", "eps"], help="network target (default v)")
    p.add_argument("--lambda-p", type=float, help="perceptual loss weight (default 0.25)")


def build_parser() -> argparse.ArgumentParser:
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity")
    common.add_argument("--device", default="cpu", help="device hint (only 'cpu' is used)")

    parser = Parser(prog="mriqt", description="Diffusion-based ultra-low-field to high-field MRI quality transfer.")
    parser.add_argument("--version", action="version", version=f"mriqt {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("make-phantoms", parents=[common], help="write a synthetic phantom cohort")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--n-paired", type=int, default=20)
    p.add_argument("--n-test-paired", type=int, default=None, help="paired subjects held out as TEST")
    p.add_argument("--n-hf-only", type=int, default=40)
    p.add_argument("--n-ulf-only", type=int, default=0)
    p.add_argument("--shape", type=_shape, default=(16, 16, 16), help="volume shape, e.g. 16x16x16")
    p.set_defaults(_func=cmd_make_phantoms)

    p = sub.add_parser("estimate-transfer", parents=[common], help="fit the k-space transfer function")
    p.add_argument("--pairs", type=Path, required=True, help="dataset manifest.json (TRAIN pairs are used)")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="absolute Tikhonov lambda")
    p.add_argument("--lambda-rel", type=float, default=1e-2, help="lambda relative to mean HF power")
    p.add_argument("--no-hermitian", action="store_true", help="skip Hermitian symmetrization")
    p.add_argument("--out", type=Path, required=True, help="output tf.bin")
    p.set_defaults(_func=cmd_estimate_transfer)

    p = sub.add_parser("simulate-ulf", parents=[common], help="apply a transfer function to an HF volume")
    p.add_argument("--tf", type=Path, required=True)
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--noise", action="store_true", help="add the estimated residual noise")
    p.set_defaults(_func=cmd_simulate_ulf)

    p = sub.add_parser("train-extractor", parents=[common], help="pretrain the perceptual feature extractor")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output extractor checkpoint")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=60)
    p.set_defaults(_func=cmd_train_extractor)

    p = sub.add_parser("select-k", parents=[common], help="choose the sampling start step K")
    p.add_argument("--extractor", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--T", type=int, dest="T", default=200)
    p.add_argument("--schedule", choices=["COSINE", "LINEAR"], default="COSINE")
    p.add_argument("--tau", type=float, default=None, help="absolute threshold (default: --tau-rel * d(t=1))")
    p.add_argument("--tau-rel", type=float, default=0.05)
    p.add_argument("--out", type=Path, required=True, help="distance-vs-t curve CSV")
    p.set_defaults(_func=cmd_select_k)

    p = sub.add_parser("train", parents=[common], help="train the conditional denoiser")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--tf", type=Path, required=True, help="transfer function used to simulate uLF inputs")
    p.add_argument("--extractor", type=Path, help="extractor checkpoint (needed when lambda_p > 0)")
    p.add_argument("--resume", type=Path, help="state_<step>.pt to resume from")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _train_flags(p)
    p.set_defaults(_func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="generate HF-quality volumes from uLF inputs")
    p.add_argument("--ckpt", type=Path, required=True, help="denoiser checkpoint")
    p.add_argument("--k", type=int, default=None, help="start step K (default T)")
    p.add_argument("--guidance-weight", type=float, default=2.0)
    p.add_argument("--literal-init", action="store_true", help="start from c + eps instead of forward-noising c")
    p.add_argument("--in", dest="inp", type=Path, help="single uLF volume")
    p.add_argument("--manifest", type=Path, help="batch mode: sample every uLF volume of --split")
    p.add_argument("--split", default="TEST", choices=[s.value for s in Split])
    p.add_argument("--out", type=Path, required=True, help="output volume (single) or directory (batch)")
    p.set_defaults(_func=cmd_sample)

    p = sub.add_parser("evaluate", parents=[common], help="compare generated volumes with references")
    p.add_argument("--gen", type=Path, nargs="+", required=True)
    p.add_argument("--ref", type=Path, nargs="+", required=True)
    p.add_argument("--baseline", type=Path, nargs="+", help="baseline volumes (e.g. the uLF inputs)")
    p.add_argument("--extractor", type=Path, help="extractor for the lpips3d column")
    p.add_argument("--method", default="MRIQT")
    p.add_argument("--baseline-name", default="Baseline [uLF-HF]")
    p.add_argument("--out", type=Path, help="metrics CSV")
    p.set_defaults(_func=cmd_evaluate)

    p = sub.add_parser("spectra", parents=[common], help="radial power spectra as CSV (and optional plot)")
    p.add_argument("--in", dest="inp", type=Path, nargs="+", required=True)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--out", type=Path, required=True, help="CSV output")
    p.add_argument("--plot", type=Path, help="optional PNG output")
    p.set_defaults(_func=cmd_spectra)

    p = sub.add_parser("pipeline", parents=[common], help="run phantoms -> ... -> evaluate end to end")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--shape", type=_shape, default=(16, 16, 16))
    p.add_argument("--k", type=int, default=None, help="override the selected K")
    p.add_argument("--guidance-weight", type=float, default=2.0)
    p.add_argument("--extractor-epochs", type=int, default=60)
    _train_flags(p)
    p.set_defaults(_func=cmd_pipeline)
    for sp in sub.choices.values():
        sp.set_defaults(_parser=sp)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    torch.manual_seed(args.seed)
    try:
        args._func(args)
    except UsageError as exc:
        args._parser.print_help(sys.stderr)
        print(f"mriqt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (MRIQTError, OSError) as exc:
        print(f"mriqt {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # invalid configuration values (e.g. warmup >= steps) are usage errors
        print(f"mriqt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
