"""Volumetric data type, file I/O and minimal preprocessing.

Two on-disk formats are supported:

* NIfTI-1 (``.nii`` / ``.nii.gz``), read and written through nibabel.
* The raw format: a float32 little-endian C-order body (``*.raw``) next to a
  JSON header sidecar (``*.raw.hdr``) carrying shape, spacing and dtype.
  See ``docs/formats.md``.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import (
    ConstantVolume,
    CorruptHeader,
    DegenerateTarget,
    NonFiniteData,
    UnreadableFile,
    UnwritablePath,
)

RAW_VERSION = 1
MIN_DIM = 4


class Modality(str, enum.Enum):
    HF = "HF"
    ULF_REAL = "ULF_REAL"
    ULF_SIM = "ULF_SIM"
    GENERATED = "GENERATED"


@dataclasses.dataclass(frozen=True)
class VolumeGrid:
    """A 3D scalar intensity field.

    ``source_range`` is the (min, max) intensity pair recorded by
    :func:`normalize_unit`; it is ``None`` for volumes in native units.
    """

    data: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Modality = Modality.HF
    subject_id: str = ""
    source_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if any(s < MIN_DIM for s in self.data.shape):
            raise ValueError(f"every dimension must be >= {MIN_DIM}, got {self.data.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def replace(self, **changes) -> "VolumeGrid":
        return dataclasses.replace(self, **changes)


def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def header_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".hdr")


def load_volume(path) -> VolumeGrid:
    """Load a NIfTI or raw volume. Intensities are returned untouched (as float32)."""
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such file: {path}")
    if _is_nifti(path):
        vol = _load_nifti(path)
    else:
        vol = _load_raw(path)
    if not np.isfinite(vol.data).all():
        raise NonFiniteData(f"{path} contains NaN or Inf voxels")
    return vol


def _load_raw(path: Path) -> VolumeGrid:
    hdr_file = header_path(path)
    try:
        header = json.loads(hdr_file.read_text())
    except FileNotFoundError as exc:
        raise UnreadableFile(f"missing header sidecar {hdr_file}") from exc
    except (OSError, ValueError) as exc:
        raise CorruptHeader(f"cannot parse header {hdr_file}: {exc}") from exc
    try:
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
        dtype = header.get("dtype", "float32")
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeader(f"header {hdr_file} is missing fields: {exc}") from exc
    if dtype != "float32" or header.get("byte_order", "little") != "little":
        raise CorruptHeader(f"unsupported dtype/byte order in {hdr_file}")
    if len(shape) != 3 or len(spacing) != 3:
        raise CorruptHeader(f"header {hdr_file} must describe a 3D volume")
    try:
        body = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(str(exc)) from exc
    expected = int(np.prod(shape)) * 4
    if len(body) != expected:
        raise CorruptHeader(f"{path}: body has {len(body)} bytes, header implies {expected}")
    data = np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)
    try:
        return VolumeGrid(
            data=data,
            spacing_mm=spacing,
            modality=header.get("modality", "HF"),
            subject_id=header.get("subject_id", ""),
        )
    except ValueError as exc:
        raise CorruptHeader(f"{hdr_file}: {exc}") from exc


def _load_nifti(path: Path) -> VolumeGrid:
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
        zooms = img.header.get_zooms()[:3]
        descrip = img.header["descrip"].tobytes().split(b"\0")[0].decode("ascii", "ignore")
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise UnreadableFile(f"cannot read NIfTI {path}: {exc}") from exc
    if data.ndim != 3:
        raise CorruptHeader(f"{path}: expected a 3D image, got shape {data.shape}")
    tags = dict(item.split("=", 1) for item in descrip.split(";") if "=" in item)
    try:
        return VolumeGrid(
            data=np.ascontiguousarray(data),
            spacing_mm=tuple(float(z) for z in zooms),
            modality=tags.get("modality", "HF"),
            subject_id=tags.get("subject", ""),
        )
    except ValueError as exc:
        raise CorruptHeader(f"{path}: {exc}") from exc


def save_volume(v: VolumeGrid, path) -> Path:
    path = Path(path)
    if not path.parent.is_dir():
        raise UnwritablePath(f"directory does not exist: {path.parent}")
    data = np.ascontiguousarray(v.data, dtype=np.float32)
    try:
        if _is_nifti(path):
            _save_nifti(v, data, path)
        else:
            header = {
                "version": RAW_VERSION,
                "shape": list(data.shape),
                "spacing_mm": list(v.spacing_mm),
                "dtype": "float32",
                "byte_order": "little",
                "modality": v.modality.value,
                "subject_id": v.subject_id,
            }
            path.write_bytes(data.astype("<f4").tobytes(order="C"))
            header_path(path).write_text(json.dumps(header, indent=1) + "\n")
    except OSError as exc:
        raise UnwritablePath(f"cannot write {path}: {exc}") from exc
    return path


def _save_nifti(v: VolumeGrid, data: np.ndarray, path: Path) -> None:
    import nibabel as nib

    affine = np.diag([*v.spacing_mm, 1.0])
    img = nib.Nifti1Image(data, affine)
    img.header.set_data_dtype(np.float32)
    img.header.set_zooms(v.spacing_mm)
    img.header["descrip"] = f"modality={v.modality.value};subject={v.subject_id}"[:79].encode()
    nib.save(img, str(path))


def normalize_unit(v: VolumeGrid, source_range: Optional[Tuple[float, float]] = None) -> VolumeGrid:
    """Affinely map intensities onto [-1, 1]; the original (min, max) is kept in ``source_range``.

    Passing ``source_range`` applies another volume's affine instead (values may
    then fall outside [-1, 1]).
    """
    lo, hi = (float(v.data.min()), float(v.data.max())) if source_range is None else map(float, source_range)
    if not hi > lo:
        raise ConstantVolume(f"volume {v.subject_id!r} is constant ({lo}); refusing to normalize")
    data = (2.0 * (v.data.astype(np.float64) - lo) / (hi - lo) - 1.0).astype(np.float32)
    return v.replace(data=data, source_range=(lo, hi))


def denormalize(data: np.ndarray, source_range: Tuple[float, float]) -> np.ndarray:
    lo, hi = source_range
    return ((np.asarray(data, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo).astype(np.float32)


def resample_iso(v: VolumeGrid, target_spacing_mm: float) -> VolumeGrid:
    """Trilinear resampling to isotropic voxels, aligning voxel centres in physical space."""
    if target_spacing_mm <= 0:
        raise DegenerateTarget(f"target spacing must be positive, got {target_spacing_mm}")
    old_shape = np.array(v.shape)
    old_spacing = np.array(v.spacing_mm)
    new_shape = np.round(old_shape * old_spacing / target_spacing_mm).astype(int)
    if (new_shape < MIN_DIM).any():
        raise DegenerateTarget(f"resampling to {target_spacing_mm} mm gives shape {tuple(new_shape)}")
    axes = []
    for n_new, n_old, sp in zip(new_shape, old_shape, old_spacing):
        c = (np.arange(n_new) + 0.5) * target_spacing_mm / sp - 0.5
        axes.append(np.clip(c, 0, n_old - 1))
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(v.data.astype(np.float64), coords, order=1, mode="nearest")
    return v.replace(data=out.astype(np.float32), spacing_mm=(float(target_spacing_mm),) * 3)


def crop_or_pad(v: VolumeGrid, target_shape: Sequence[int]) -> VolumeGrid:
    """Centre-crop and/or symmetrically zero-pad to ``target_shape``."""
    target = tuple(int(s) for s in target_shape)
    if len(target) != 3 or any(s < MIN_DIM for s in target):
        raise ValueError(f"target shape must be three ints >= {MIN_DIM}, got {target_shape}")
    data = v.data
    slices = []
    pads = []
    for n, t in zip(data.shape, target):
        if n >= t:
            start = (n - t) // 2
            slices.append(slice(start, start + t))
            pads.append((0, 0))
        else:
            before = (t - n) // 2
            slices.append(slice(None))
            pads.append((before, t - n - before))
    out = np.pad(data[tuple(slices)], pads, mode="constant", constant_values=0)
    return v.replace(data=np.ascontiguousarray(out, dtype=np.float32))


def preprocess(v: VolumeGrid, target_spacing_mm: Optional[float], target_shape: Sequence[int]) -> VolumeGrid:
    """Resample (when a spacing is given) and crop/pad to the common grid."""
    if target_spacing_mm is not None and tuple(v.spacing_mm) != (float(target_spacing_mm),) * 3:
        v = resample_iso(v, target_spacing_mm)
    return crop_or_pad(v, target_shape)
