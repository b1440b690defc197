import numpy as np
import pytest

from mriqt.errors import InvalidGeometry
from mriqt.kspace import radial_power_spectrum
from mriqt.manifest import DatasetManifest, Split
from mriqt.phantom import (
    LESION_DELTAS,
    SHELL_INTENSITIES,
    DegradeParams,
    Lesion,
    PhantomSpec,
    degrade_reference,
    generate_hf,
    make_dataset,
    make_phantom_pair,
    random_lesion,
)
from mriqt.volume import Modality

TISSUE_BANDS = [(-0.08, 0.08)] + [(v - 0.08, v + 0.08) for v in SHELL_INTENSITIES[:3]]
LESION_LEVELS = SHELL_INTENSITIES[2] + np.array(LESION_DELTAS)


def classify_by_intensity(data):
    """Median of the voxels outside every tissue band, snapped to the nearest lesion level."""
    outside = np.ones(data.shape, bool)
    for lo, hi in TISSUE_BANDS:
        outside &= ~((data >= lo) & (data <= hi))
    if outside.sum() < 10:
        return 0
    return 1 + int(np.argmin(np.abs(LESION_LEVELS - np.median(data[outside]))))


def test_noiseless_histogram_mode_count():
    for shells in (1, 2, 3):
        v = generate_hf(PhantomSpec(shape=(24, 24, 24), n_tissue_shells=shells, noise_sigma=0.0, seed=1))
        assert len(np.unique(v.data)) == shells + 1
        assert v.modality is Modality.HF


def test_seed_reproducible():
    a = make_phantom_pair((16, 16, 16), seed=9)
    b = make_phantom_pair((16, 16, 16), seed=9)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data) and a[2] == b[2]
    c = make_phantom_pair((16, 16, 16), seed=10)
    assert not np.array_equal(a[0].data, c[0].data)


def test_zero_radius_lesion_is_no_lesion():
    base = generate_hf(PhantomSpec(seed=4))
    lesion = random_lesion((16, 16, 16), 5, seed=4)
    zero = Lesion(lesion.center, 0.0, lesion.delta, lesion.label)
    assert np.array_equal(generate_hf(PhantomSpec(seed=4, lesion=zero)).data, base.data)


def test_lesions_inside_head_and_invalid_geometry():
    for label in range(1, 10):
        for seed in range(5):
            les = random_lesion((16, 16, 16), label, seed)
            generate_hf(PhantomSpec(seed=seed, lesion=les))
    with pytest.raises(InvalidGeometry):
        generate_hf(PhantomSpec(lesion=Lesion((0.0, 0.0, 0.0), 2.0, 0.4, 3)))
    with pytest.raises(InvalidGeometry):
        random_lesion((16, 16, 16), 10, 0)
    with pytest.raises(InvalidGeometry):
        generate_hf(PhantomSpec(shape=(3, 16, 16)))


def test_labels_classifiable_by_intensity_statistics():
    truth, guess = [], []
    for i in range(100):
        label = i % 10
        hf, _, _ = make_phantom_pair((16, 16, 16), seed=1000 + i, label=label)
        truth.append(label)
        guess.append(classify_by_intensity(hf.data))
    assert np.mean(np.array(truth) == np.array(guess)) > 0.9


def test_degrade_identity_without_blur_lowpass_noise():
    hf = generate_hf(PhantomSpec(seed=2))
    params = DegradeParams(blur_sigma_vox=(0.0, 0.0, 0.0), lowpass_cutoff=None, noise_sigma=0.0)
    out = degrade_reference(hf, np.random.default_rng(0), params)
    assert np.array_equal(out.data, hf.data)
    assert out.modality is Modality.ULF_REAL


def test_degrade_reduces_high_frequency_power():
    for seed in range(10):
        hf, ulf, _ = make_phantom_pair((16, 16, 16), seed=seed)
        a = radial_power_spectrum(hf, 16)
        b = radial_power_spectrum(ulf, 16)
        top = slice(8, 16)
        assert np.sum(b.power[top] * b.bin_counts[top]) < np.sum(a.power[top] * a.bin_counts[top])


def test_degrade_seeded():
    hf = generate_hf(PhantomSpec(seed=3))
    a = degrade_reference(hf, np.random.default_rng(1))
    b = degrade_reference(hf, np.random.default_rng(1))
    assert np.array_equal(a.data, b.data)


def test_make_dataset_counts_and_splits(tmp_path):
    m = make_dataset(4, 2, 2, seed=0, out_dir=tmp_path / "d")
    files = sorted(p for p in (tmp_path / "d").rglob("*.raw"))
    assert len(files) == 12
    assert (tmp_path / "d" / "manifest.json").exists()
    assert len(m.pairs(Split.TEST)) == 1 and len(m.pairs(Split.TRAIN)) == 3
    back = DatasetManifest.load(tmp_path / "d" / "manifest.json")
    assert [e.subject_id for e in back.paired] == [e.subject_id for e in m.paired]
    assert files[0].relative_to(tmp_path / "d").parts[1] == "anat"


def test_make_dataset_empty_and_byte_identical(tmp_path):
    empty = make_dataset(0, 0, 0, seed=0, out_dir=tmp_path / "e")
    assert not empty.paired and not empty.hf_only and not empty.ulf_only
    make_dataset(2, 1, 1, seed=5, out_dir=tmp_path / "a")
    make_dataset(2, 1, 1, seed=5, out_dir=tmp_path / "b")
    fa = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    fb = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert fa == fb
    for rel in fa:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    with pytest.raises(ValueError):
        make_dataset(-1, 0, 0, seed=0, out_dir=tmp_path / "x")
