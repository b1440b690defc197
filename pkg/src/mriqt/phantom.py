"""Deterministic nested-ellipsoid head phantoms and a surrogate low-field scanner.

A phantom is a set of nested ellipsoidal tissue shells with constant
intensity, optionally carrying a spherical lesion from one of nine classes,
plus additive Gaussian noise. Label 0 means "no lesion"; labels 1..9 are the
lesion classes.

The surrogate scanner (:func:`degrade_reference`) blurs anisotropically,
truncates k-space to a sphere and adds band-limited complex Gaussian noise
before taking the magnitude, so its noise is Rician. None of these steps is a
linear shift-invariant filter as a whole, so a learned transfer function can
only approximate it.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import InvalidGeometry, UnwritablePath
from .manifest import DatasetManifest, PairedEntry, SingleEntry, Split
from .volume import Modality, VolumeGrid, save_volume

SHELL_INTENSITIES = (0.35, 0.75, 0.55, 0.9, 0.2)
# lesion intensity minus the reference (innermost) tissue intensity, per class 1..9;
# the resulting intensities stay clear of every tissue value and are 4 noise sigmas apart
LESION_DELTAS = (-0.45, -0.37, 0.40, 0.48, 0.56, 0.64, 0.72, 0.80, 0.88)
N_LESION_CLASSES = len(LESION_DELTAS)
HEAD_SEMI_AXES = (0.85, 0.78, 0.82)  # fraction of the half-extent per axis
LESION_RADIUS_FRAC = 0.14  # of the smallest dimension


@dataclasses.dataclass(frozen=True)
class Lesion:
    center: Tuple[float, float, float]  # voxel coordinates
    radius: float  # voxels
    delta: float
    label: int


@dataclasses.dataclass(frozen=True)
class PhantomSpec:
    shape: Tuple[int, int, int] = (16, 16, 16)
    n_tissue_shells: int = 3
    lesion: Optional[Lesion] = None
    noise_sigma: float = 0.02
    seed: int = 0
    head_jitter: float = 0.03

    @property
    def label(self) -> int:
        return 0 if self.lesion is None else self.lesion.label


@dataclasses.dataclass(frozen=True)
class DegradeParams:
    blur_sigma_vox: Tuple[float, float, float] = (0.7, 0.7, 1.2)
    lowpass_cutoff: Optional[float] = 0.25  # cycles/voxel radius; None disables
    noise_sigma: float = 0.03  # per complex component, image domain


def _grid(shape):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")


def _head_geometry(spec: PhantomSpec):
    rng = np.random.default_rng([spec.seed, 1])
    half = np.array(spec.shape, dtype=np.float64) / 2.0
    center = half - 0.5 + rng.uniform(-0.5, 0.5, size=3)
    semi = half * np.array(HEAD_SEMI_AXES) * (1.0 + rng.uniform(-spec.head_jitter, spec.head_jitter, size=3))
    scales = np.linspace(1.0, 0.45, spec.n_tissue_shells)
    return center, semi, scales


def random_lesion(shape: Sequence[int], label: int, seed: int, n_tissue_shells: int = 3) -> Optional[Lesion]:
    """Lesion of class ``label`` (0 gives None) placed inside the second shell."""
    if label == 0:
        return None
    if not 1 <= label <= N_LESION_CLASSES:
        raise InvalidGeometry(f"lesion label must be in 1..{N_LESION_CLASSES}")
    spec = PhantomSpec(shape=tuple(shape), n_tissue_shells=n_tissue_shells, seed=seed)
    center, semi, scales = _head_geometry(spec)
    rng = np.random.default_rng([seed, 2])
    radius = LESION_RADIUS_FRAC * min(shape)
    inner = semi * (scales[1] if len(scales) > 1 else 1.0)
    room = np.clip(1.0 - radius / inner.min(), 0.0, 1.0)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    offset = direction * rng.uniform(0.0, room) * inner
    return Lesion(center=tuple(center + offset), radius=float(radius), delta=LESION_DELTAS[label - 1], label=label)


def generate_hf(spec: PhantomSpec) -> VolumeGrid:
    if len(spec.shape) != 3 or any(n < 4 for n in spec.shape):
        raise InvalidGeometry(f"shape must be three ints >= 4, got {spec.shape}")
    if not 1 <= spec.n_tissue_shells <= len(SHELL_INTENSITIES):
        raise InvalidGeometry(f"n_tissue_shells must be in 1..{len(SHELL_INTENSITIES)}")
    center, semi, scales = _head_geometry(spec)
    coords = _grid(spec.shape)
    r = np.sqrt(sum(((c - c0) / s) ** 2 for c, c0, s in zip(coords, center, semi)))
    data = np.zeros(spec.shape)
    for scale, value in zip(scales, SHELL_INTENSITIES):
        data[r <= scale] = value

    if spec.lesion is not None:
        les = spec.lesion
        # every point of the lesion sphere must be inside the head ellipsoid
        c_norm = np.abs((np.array(les.center) - center) / semi)
        if np.linalg.norm(c_norm) + les.radius / semi.min() > 1.0:
            raise InvalidGeometry("lesion extends outside the head ellipsoid")
        if les.radius > 0:
            d = np.sqrt(sum((c - c0) ** 2 for c, c0 in zip(coords, les.center)))
            reference = SHELL_INTENSITIES[spec.n_tissue_shells - 1]
            data[d < les.radius] = reference + les.delta

    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, 3])
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)
    return VolumeGrid(data.astype(np.float32), (1.0, 1.0, 1.0), Modality.HF, f"phantom{spec.seed}")


def _sphere_mask(shape, cutoff: float) -> np.ndarray:
    freqs = np.meshgrid(*[np.fft.fftfreq(n) for n in shape], indexing="ij")
    return np.sqrt(sum(f ** 2 for f in freqs)) <= cutoff


def degrade_reference(hf: VolumeGrid, rng: np.random.Generator, params: DegradeParams = DegradeParams()) -> VolumeGrid:
    """Surrogate ultra-low-field acquisition of an HF phantom (the "real" uLF stand-in)."""
    x = hf.data.astype(np.float64)
    if any(s > 0 for s in params.blur_sigma_vox):
        x = ndimage.gaussian_filter(x, sigma=params.blur_sigma_vox, mode="nearest")
    band = None
    if params.lowpass_cutoff is not None:
        band = _sphere_mask(x.shape, params.lowpass_cutoff)
        x = np.fft.ifftn(np.fft.fftn(x) * band).real
    if params.noise_sigma > 0:
        noise = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
        if band is not None:
            noise = np.fft.ifftn(np.fft.fftn(noise) * band) / np.sqrt(band.mean())
        noise = noise * params.noise_sigma
        x = np.abs(x + noise)
    return hf.replace(data=x.astype(np.float32), modality=Modality.ULF_REAL, source_range=None)


def _subject_seed(seed: int, kind: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, kind, index]).generate_state(1)[0])


def make_phantom_pair(shape, seed: int, label: Optional[int] = None, hf_noise: float = 0.02,
                      degrade: DegradeParams = DegradeParams()) -> Tuple[VolumeGrid, VolumeGrid, int]:
    """(HF, surrogate uLF, label) for one subject; a random label is drawn when None."""
    rng = np.random.default_rng([seed, 4])
    if label is None:
        label = int(rng.integers(0, N_LESION_CLASSES + 1))
    spec = PhantomSpec(shape=tuple(shape), lesion=random_lesion(shape, label, seed), noise_sigma=hf_noise, seed=seed)
    hf = generate_hf(spec)
    ulf = degrade_reference(hf, np.random.default_rng([seed, 5]), degrade)
    return hf, ulf, label


def make_dataset(
    n_paired: int,
    n_hf_only: int,
    n_ulf_only: int,
    seed: int,
    out_dir,
    *,
    shape: Sequence[int] = (16, 16, 16),
    n_test_paired: Optional[int] = None,
    n_val_hf: int = 0,
    hf_noise: float = 0.02,
    degrade: DegradeParams = DegradeParams(),
) -> DatasetManifest:
    """Write a phantom cohort in the raw format plus ``manifest.json``.

    Paired subjects: the last ``n_test_paired`` (default a quarter) are TEST, the
    rest TRAIN. HF-only subjects are TRAIN except the last ``n_val_hf`` (VAL);
    uLF-only subjects are TEST.
    """
    if min(n_paired, n_hf_only, n_ulf_only) < 0:
        raise ValueError("subject counts must be non-negative")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UnwritablePath(f"cannot create {out_dir}: {exc}") from exc
    if n_test_paired is None:
        n_test_paired = n_paired // 4
    manifest = DatasetManifest(root=out_dir)

    def write(vol: VolumeGrid, sub: str, acq: str) -> str:
        rel = Path(f"sub-{sub}") / "anat" / f"sub-{sub}_acq-{acq}_T1w.raw"
        (out_dir / rel.parent).mkdir(parents=True, exist_ok=True)
        save_volume(vol.replace(subject_id=sub), out_dir / rel)
        return rel.as_posix()

    for i in range(n_paired):
        sub = f"P{i:03d}"
        hf, ulf, label = make_phantom_pair(shape, _subject_seed(seed, 0, i), hf_noise=hf_noise, degrade=degrade)
        split = Split.TEST if i >= n_paired - n_test_paired else Split.TRAIN
        manifest.paired.append(PairedEntry(ulf=write(ulf, sub, "ulf"), hf=write(hf, sub, "hf"),
                                           subject_id=sub, split=split, label=label))
    for i in range(n_hf_only):
        sub = f"H{i:03d}"
        hf, _, label = make_phantom_pair(shape, _subject_seed(seed, 1, i), hf_noise=hf_noise, degrade=degrade)
        split = Split.VAL if i >= n_hf_only - n_val_hf else Split.TRAIN
        manifest.hf_only.append(SingleEntry(path=write(hf, sub, "hf"), subject_id=sub, split=split, label=label))
    for i in range(n_ulf_only):
        sub = f"U{i:03d}"
        _, ulf, label = make_phantom_pair(shape, _subject_seed(seed, 2, i), hf_noise=hf_noise, degrade=degrade)
        manifest.ulf_only.append(SingleEntry(path=write(ulf, sub, "ulf"), subject_id=sub, split=Split.TEST,
                                             label=label))
    manifest.validate()
    manifest.save(out_dir / "manifest.json")
    return manifest
