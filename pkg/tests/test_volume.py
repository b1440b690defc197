import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mriqt.errors import ConstantVolume, CorruptHeader, DegenerateTarget, NonFiniteData, UnwritablePath
from mriqt.manifest import DatasetManifest, PairedEntry, SingleEntry, Split
from mriqt.volume import (
    Modality,
    VolumeGrid,
    crop_or_pad,
    header_path,
    load_volume,
    normalize_unit,
    resample_iso,
    save_volume,
)


def vol(data, spacing=(1.0, 1.0, 1.0), **kw):
    return VolumeGrid(np.asarray(data, dtype=np.float32), spacing, **kw)


def test_raw_zeros_load(tmp_path):
    v = vol(np.zeros((8, 8, 8)), spacing=(1.5, 1.5, 2.0))
    p = save_volume(v, tmp_path / "z.raw")
    assert p.stat().st_size == 8 * 8 * 8 * 4
    back = load_volume(p)
    assert back.shape == (8, 8, 8)
    assert not back.data.any()
    assert back.spacing_mm == (1.5, 1.5, 2.0)


@pytest.mark.parametrize("name", ["r.raw", "r.nii", "r.nii.gz"])
def test_round_trip_bit_exact(tmp_path, name):
    rng = np.random.default_rng(0)
    v = vol(rng.normal(size=(9, 8, 7)), spacing=(0.5, 1.0, 2.0), modality=Modality.ULF_REAL, subject_id="s01")
    back = load_volume(save_volume(v, tmp_path / name))
    assert np.array_equal(back.data, v.data)
    assert back.spacing_mm == v.spacing_mm
    assert back.modality is Modality.ULF_REAL
    assert back.subject_id == "s01"


def test_nan_voxel_rejected(tmp_path):
    data = np.zeros((8, 8, 8), np.float32)
    data[1, 2, 3] = np.nan
    p = tmp_path / "nan.raw"
    p.write_bytes(data.astype("<f4").tobytes())
    header_path(p).write_text(json.dumps({"shape": [8, 8, 8], "spacing_mm": [1, 1, 1], "dtype": "float32"}))
    with pytest.raises(NonFiniteData):
        load_volume(p)


def test_corrupt_header(tmp_path):
    p = tmp_path / "bad.raw"
    p.write_bytes(b"\0" * 100)
    header_path(p).write_text("{not json")
    with pytest.raises(CorruptHeader):
        load_volume(p)
    header_path(p).write_text(json.dumps({"shape": [8, 8, 8], "spacing_mm": [1, 1, 1]}))
    with pytest.raises(CorruptHeader):
        load_volume(p)


def test_unwritable_path(tmp_path):
    with pytest.raises(UnwritablePath):
        save_volume(vol(np.zeros((4, 4, 4))), tmp_path / "missing" / "x.raw")


def test_normalize_affine():
    data = np.linspace(0, 100, 512).reshape(8, 8, 8)
    out = normalize_unit(vol(data))
    assert out.data.min() == pytest.approx(-1.0)
    assert out.data.max() == pytest.approx(1.0)
    mid = np.argmin(np.abs(data - 50.0))
    assert out.data.ravel()[mid] == pytest.approx(2 * data.ravel()[mid] / 100 - 1, abs=1e-6)
    assert out.source_range == (0.0, 100.0)


def test_normalize_constant_rejected():
    with pytest.raises(ConstantVolume):
        normalize_unit(vol(np.full((4, 4, 4), 3.0)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, (4, 5, 6), elements=st.floats(-1e3, 1e3, width=32)))
def test_normalize_idempotent_and_monotone(data):
    if data.max() - data.min() < 1e-2:
        return
    once = normalize_unit(vol(data))
    twice = normalize_unit(once)
    assert np.max(np.abs(once.data - twice.data)) <= 1e-6
    assert once.data.min() >= -1 - 1e-6 and once.data.max() <= 1 + 1e-6
    order = np.argsort(data.ravel(), kind="stable")
    assert np.all(np.diff(once.data.ravel()[order]) >= 0)


def test_resample_shape_and_identity():
    rng = np.random.default_rng(1)
    v = vol(rng.normal(size=(8, 8, 8)), spacing=(2, 2, 2))
    assert resample_iso(v, 1.0).shape == (16, 16, 16)
    assert resample_iso(v, 1.0).spacing_mm == (1.0, 1.0, 1.0)
    same = resample_iso(v, 2.0)
    assert np.max(np.abs(same.data - v.data)) <= 1e-6
    const = resample_iso(vol(np.full((8, 6, 5), 4.25), spacing=(1.5, 1.5, 2)), 1.0)
    assert np.allclose(const.data, 4.25)
    with pytest.raises(DegenerateTarget):
        resample_iso(v, 8.0)


def test_crop_or_pad():
    ones = vol(np.ones((10, 10, 10)))
    assert np.all(crop_or_pad(ones, (8, 8, 8)).data == 1)
    padded = crop_or_pad(ones, (12, 12, 12)).data
    assert padded.shape == (12, 12, 12)
    assert padded[0].sum() == 0 and padded[-1].sum() == 0 and padded[1:-1, 1:-1, 1:-1].min() == 1
    rng = np.random.default_rng(2)
    v = vol(rng.normal(size=(8, 8, 8)))
    assert np.array_equal(crop_or_pad(v, (8, 8, 8)).data, v.data)


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.integers(4, 9)] * 3), st.tuples(*[st.integers(0, 5)] * 3))
def test_pad_then_crop_restores(shape, extra):
    data = np.random.default_rng(sum(shape)).normal(size=shape)
    v = vol(data)
    big = crop_or_pad(v, [s + e for s, e in zip(shape, extra)])
    assert np.array_equal(crop_or_pad(big, shape).data, v.data)


def test_invariants_on_construction():
    with pytest.raises(ValueError):
        vol(np.zeros((3, 8, 8)))
    with pytest.raises(ValueError):
        vol(np.zeros((8, 8, 8)), spacing=(1, 0, 1))


def test_manifest_round_trip_and_split_disjointness(tmp_path):
    m = DatasetManifest(
        paired=[PairedEntry("a_ulf.raw", "a_hf.raw", "A", Split.TEST, 3)],
        hf_only=[SingleEntry("b.raw", "B", Split.TRAIN, 0)],
        root=tmp_path,
    )
    m.save(tmp_path / "manifest.json")
    back = DatasetManifest.load(tmp_path / "manifest.json")
    assert back.paired[0].split is Split.TEST and back.paired[0].label == 3
    assert back.resolve("b.raw") == tmp_path / "b.raw"
    m.hf_only.append(SingleEntry("c.raw", "A", Split.TRAIN))
    with pytest.raises(ValueError):
        m.validate()
