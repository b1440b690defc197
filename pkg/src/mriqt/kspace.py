"""K-space transfer function estimation and physics-consistent uLF simulation.

DFT convention: unnormalized forward transform, 1/N on the inverse (numpy's
default). The DC term sits at index (0, 0, 0); no fftshift is applied.

The transfer function is the per-frequency Tikhonov-regularized least-squares
fit of uLF spectra X_i against HF spectra Y_i::

    S(f) = sum_i X_i(f) conj(Y_i(f)) / (sum_i |Y_i(f)|^2 + lam)
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BinningMismatch,
    CorruptHeader,
    NonNegligibleImaginary,
    ShapeMismatch,
    SingularFrequency,
    UnreadableFile,
    UnwritablePath,
)
from .volume import Modality, VolumeGrid

log = logging.getLogger(__name__)

IMAG_TOL = 1e-5
LOG_EPS = 1e-12
TF_MAGIC = b"MRIQT-TF"
TF_VERSION = 1


@dataclasses.dataclass(frozen=True)
class ComplexSpectrum:
    data: np.ndarray
    source_shape: Tuple[int, int, int]


@dataclasses.dataclass(frozen=True)
class TransferFunction:
    s: np.ndarray
    lambda_reg: float
    n_pairs: int
    hermitian_enforced: bool = True
    # std of the spatial residual x_uLF - F^-1(S Y) over the fitting pairs
    residual_sigma: float = 0.0

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.s.shape)


@dataclasses.dataclass(frozen=True)
class RadialSpectrum:
    bin_centers: np.ndarray
    power: np.ndarray
    bin_counts: np.ndarray
    n_bins: int


def forward_fft(v) -> ComplexSpectrum:
    data = v.data if isinstance(v, VolumeGrid) else np.asarray(v)
    return ComplexSpectrum(np.fft.fftn(data.astype(np.float64)), tuple(data.shape))


def _real_part(z: np.ndarray, allow_complex: bool) -> np.ndarray:
    re = z.real
    if not allow_complex:
        num = np.linalg.norm(z.imag)
        den = np.linalg.norm(z)
        if den > 0 and num > IMAG_TOL * den:
            raise NonNegligibleImaginary(f"imaginary residue {num / den:.3g} (relative) exceeds {IMAG_TOL}")
    return re


def inverse_fft(
    s: ComplexSpectrum,
    *,
    spacing_mm=(1.0, 1.0, 1.0),
    modality: Modality = Modality.HF,
    subject_id: str = "",
    allow_complex: bool = False,
) -> VolumeGrid:
    if tuple(s.data.shape) != tuple(s.source_shape):
        raise ShapeMismatch(f"spectrum shape {s.data.shape} != source shape {s.source_shape}")
    re = _real_part(np.fft.ifftn(s.data), allow_complex)
    return VolumeGrid(re.astype(np.float32), spacing_mm, modality, subject_id)


def _negate_freq(a: np.ndarray) -> np.ndarray:
    """a[(-k) mod N] along every axis."""
    return np.roll(np.flip(a), 1, axis=tuple(range(a.ndim)))


def hermitian_symmetrize(s: np.ndarray) -> np.ndarray:
    return 0.5 * (s + np.conj(_negate_freq(s)))


def pad_to_common(volumes: Sequence[VolumeGrid], shape=None) -> list:
    """Pad every volume (symmetrically, with its own mean) to a common shape."""
    if shape is None:
        shape = tuple(max(v.shape[i] for v in volumes) for i in range(3))
    out = []
    for v in volumes:
        if any(n > t for n, t in zip(v.shape, shape)):
            raise ShapeMismatch(f"volume {v.shape} larger than common shape {shape}")
        pads = [((t - n) // 2, t - n - (t - n) // 2) for n, t in zip(v.shape, shape)]
        data = np.pad(v.data, pads, mode="constant", constant_values=float(v.data.mean()))
        out.append(v.replace(data=data.astype(np.float32)))
    return out


def estimate_transfer(
    pairs: Sequence[Tuple[VolumeGrid, VolumeGrid]],
    lambda_reg: Optional[float] = None,
    *,
    lambda_rel: float = 1e-2,
    hermitian: bool = True,
) -> TransferFunction:
    """Closed-form Tikhonov estimate of S from (uLF, HF) pairs.

    ``lambda_reg`` is absolute. When it is ``None`` the regularizer is
    ``lambda_rel`` times the mean over frequencies of ``sum_i |Y_i(f)|^2``.
    """
    if len(pairs) == 0:
        raise ShapeMismatch("at least one (uLF, HF) pair is required")
    shape = pairs[0][0].shape
    for ulf, hf in pairs:
        if ulf.shape != shape or hf.shape != shape:
            raise ShapeMismatch(f"all volumes must share shape {shape}; got {ulf.shape} / {hf.shape}")

    num = np.zeros(shape, dtype=np.complex128)
    den = np.zeros(shape, dtype=np.float64)
    for ulf, hf in pairs:
        X = np.fft.fftn(ulf.data.astype(np.float64))
        Y = np.fft.fftn(hf.data.astype(np.float64))
        num += X * np.conj(Y)
        den += (Y * np.conj(Y)).real

    if lambda_reg is None:
        lam = float(lambda_rel) * float(den.mean())
    else:
        lam = float(lambda_reg)
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0 and (den == 0).any():
        raise SingularFrequency(f"{int((den == 0).sum())} frequencies have no HF energy and lambda = 0")

    s = num / (den + lam)
    if hermitian:
        s = hermitian_symmetrize(s)

    resid = []
    for ulf, hf in pairs:
        sim = np.fft.ifftn(s * np.fft.fftn(hf.data.astype(np.float64))).real
        resid.append(ulf.data.astype(np.float64) - sim)
    residual_sigma = float(np.std(np.stack(resid)))

    return TransferFunction(s=s, lambda_reg=lam, n_pairs=len(pairs), hermitian_enforced=hermitian,
                            residual_sigma=residual_sigma)


def apply_transfer(
    tf: TransferFunction,
    hf: VolumeGrid,
    *,
    add_noise: bool = False,
    rng: Optional[np.random.Generator] = None,
    allow_complex: bool = False,
) -> VolumeGrid:
    """Synthesize a uLF volume as the real part of F^-1(S * F(hf)).

    With ``add_noise`` Gaussian noise of std ``tf.residual_sigma`` is added.
    """
    if tuple(hf.shape) != tf.shape:
        raise ShapeMismatch(f"transfer function shape {tf.shape} != volume shape {hf.shape}")
    Y = np.fft.fftn(hf.data.astype(np.float64))
    out = _real_part(np.fft.ifftn(tf.s * Y), allow_complex)
    if add_noise and tf.residual_sigma > 0:
        if rng is None:
            raise ValueError("add_noise requires an explicit rng")
        out = out + rng.normal(0.0, tf.residual_sigma, size=out.shape)
    return hf.replace(data=out.astype(np.float32), modality=Modality.ULF_SIM, source_range=None)


def radial_power_spectrum(s, n_bins: int = 16) -> RadialSpectrum:
    """|s|^2 averaged over spherical shells of normalized frequency radius.

    Frequencies are in cycles/voxel, so radii live in [0, sqrt(3)/2]; bins are
    equal width on that interval. Accepts a ComplexSpectrum or a VolumeGrid.
    """
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    if isinstance(s, VolumeGrid):
        s = forward_fft(s)
    data = s.data
    freqs = np.meshgrid(*[np.fft.fftfreq(n) for n in data.shape], indexing="ij")
    radius = np.sqrt(sum(f ** 2 for f in freqs))
    r_max = 0.5 * np.sqrt(3.0)
    edges = np.linspace(0.0, r_max, n_bins + 1)
    idx = np.clip(np.digitize(radius, edges) - 1, 0, n_bins - 1)
    pw = (data * np.conj(data)).real
    counts = np.bincount(idx.ravel(), minlength=n_bins)
    sums = np.bincount(idx.ravel(), weights=pw.ravel(), minlength=n_bins)
    power = np.divide(sums, counts, out=np.zeros(n_bins), where=counts > 0)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return RadialSpectrum(bin_centers=centers, power=power, bin_counts=counts, n_bins=n_bins)


def log_spectral_distance(a: RadialSpectrum, b: RadialSpectrum) -> float:
    if a.n_bins != b.n_bins or not np.allclose(a.bin_centers, b.bin_centers):
        raise BinningMismatch("radial spectra use different binnings")
    d = np.log10(a.power + LOG_EPS) - np.log10(b.power + LOG_EPS)
    return float(np.sqrt(np.mean(d ** 2)))


def save_transfer(tf: TransferFunction, path) -> Path:
    """Write the plain-text header line followed by an interleaved float32 real/imag body."""
    path = Path(path)
    header = {
        "version": TF_VERSION,
        "shape": list(tf.shape),
        "lambda": tf.lambda_reg,
        "n_pairs": tf.n_pairs,
        "hermitian_enforced": tf.hermitian_enforced,
        "residual_sigma": tf.residual_sigma,
        "dtype": "complex64-interleaved-le",
    }
    body = np.empty(tf.s.shape + (2,), dtype="<f4")
    body[..., 0] = tf.s.real
    body[..., 1] = tf.s.imag
    try:
        with open(path, "wb") as fh:
            fh.write(TF_MAGIC + b" " + json.dumps(header).encode() + b"\n")
            fh.write(body.tobytes(order="C"))
    except OSError as exc:
        raise UnwritablePath(f"cannot write {path}: {exc}") from exc
    return path


def load_transfer(path) -> TransferFunction:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    line, _, body = raw.partition(b"\n")
    if not line.startswith(TF_MAGIC):
        raise CorruptHeader(f"{path} is not a transfer-function file")
    try:
        header = json.loads(line[len(TF_MAGIC):])
        shape = tuple(int(n) for n in header["shape"])
    except (ValueError, KeyError) as exc:
        raise CorruptHeader(f"{path}: bad header: {exc}") from exc
    if len(body) != int(np.prod(shape)) * 8:
        raise CorruptHeader(f"{path}: body length does not match shape {shape}")
    arr = np.frombuffer(body, dtype="<f4").reshape(shape + (2,))
    s = arr[..., 0].astype(np.float64) + 1j * arr[..., 1].astype(np.float64)
    return TransferFunction(
        s=s,
        lambda_reg=float(header["lambda"]),
        n_pairs=int(header["n_pairs"]),
        hermitian_enforced=bool(header["hermitian_enforced"]),
        residual_sigma=float(header.get("residual_sigma", 0.0)),
    )
