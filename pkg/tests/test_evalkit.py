import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mriqt.errors import ShapeMismatch, SubjectMismatch, TooFewSamples, VolumeTooSmall, ZeroVariance
from mriqt.evalkit import (
    build_report,
    evaluate_cohort,
    evaluate_volumes,
    format_table,
    gaussian_window,
    mae,
    max_scales,
    ms_ssim3d,
    paired_t_test,
    pearson,
    psnr,
    rmse,
    ssim3d,
)
from mriqt.volume import VolumeGrid, save_volume
from oracles import (
    gaussian_window_1d,
    loop_mae,
    loop_pearson,
    loop_psnr,
    loop_rmse,
    loop_ssim3d,
    student_t_two_sided_p,
)

# canonical paired sample (n = 10) for the t-test oracle
CANON_X = [21.3, 22.8, 20.1, 23.5, 22.0, 21.7, 24.2, 20.9, 22.4, 23.1]
CANON_Y = [20.2, 21.9, 20.4, 22.1, 21.1, 20.3, 22.8, 20.5, 21.0, 22.6]


def rand_pair(seed, shape=(8, 8, 8)):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, size=shape)
    return a + 0.1 * rng.normal(size=shape), a


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_metrics_match_scalar_loops(seed):
    gen, ref = rand_pair(seed)
    assert mae(gen, ref) == pytest.approx(loop_mae(gen, ref), abs=1e-6)
    assert rmse(gen, ref) == pytest.approx(loop_rmse(gen, ref), abs=1e-6)
    assert psnr(gen, ref) == pytest.approx(loop_psnr(gen, ref), abs=1e-6)
    assert pearson(gen, ref) == pytest.approx(loop_pearson(gen, ref), abs=1e-6)
    dr = float(ref.max() - ref.min())
    assert ssim3d(gen, ref, data_range=dr) == pytest.approx(loop_ssim3d(gen, ref, dr), abs=1e-6)


def test_ssim_on_larger_volume_matches_loop():
    gen, ref = rand_pair(7, shape=(10, 9, 11))
    assert ssim3d(gen, ref, data_range=1.0) == pytest.approx(loop_ssim3d(gen, ref, 1.0), abs=1e-6)


def test_gaussian_window_matches_oracle():
    assert np.allclose(gaussian_window(7, 1.5), gaussian_window_1d(7, 1.5), atol=1e-15)
    assert gaussian_window(7, 1.5).sum() == pytest.approx(1.0)


def test_identity_and_closed_forms():
    a = np.random.default_rng(3).uniform(0, 1, size=(8, 8, 8))
    a[0, 0, 0], a[0, 0, 1] = 0.0, 1.0
    assert psnr(a, a) == 100.0 and mae(a, a) == 0.0 and rmse(a, a) == 0.0
    assert pearson(a, a) == pytest.approx(1.0)
    assert ssim3d(a, a) == 1.0
    b = a + 0.1
    assert rmse(b, a) == pytest.approx(0.1) and mae(b, a) == pytest.approx(0.1)
    assert psnr(b, a, data_range=1.0) == pytest.approx(20.0)
    with pytest.raises(ZeroVariance):
        pearson(np.ones((4, 4, 4)), np.ones((4, 4, 4)))
    with pytest.raises(ShapeMismatch):
        mae(np.ones((4, 4, 4)), np.ones((4, 4, 5)))


def test_ssim_inverted_binary_phantom():
    a = np.zeros((16, 16, 16))
    a[4:12, 4:12, 4:12] = 1.0
    assert ssim3d(a, 1 - a) < 0.2


def test_ms_ssim_properties():
    gen, ref = rand_pair(4, shape=(16, 16, 16))
    assert ms_ssim3d(ref, ref, scales=2) == pytest.approx(1.0)
    assert ms_ssim3d(gen, ref, scales=2, data_range=1.0) == pytest.approx(
        ms_ssim3d(ref, gen, scales=2, data_range=1.0), abs=1e-12)
    with pytest.raises(VolumeTooSmall):
        ms_ssim3d(np.zeros((8, 8, 8)), np.zeros((8, 8, 8)), scales=3)
    assert max_scales((16, 16, 16)) == 2
    assert max_scales((32, 32, 32)) == 3


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.5), st.floats(0.01, 0.5))
def test_psnr_monotone_in_rmse(s1, s2):
    assume(abs(s1 - s2) > 1e-9)  # levels one ulp apart round to the same PSNR
    ref = np.linspace(0, 1, 512).reshape(8, 8, 8)
    noise = np.random.default_rng(0).normal(size=ref.shape)
    p1, p2 = psnr(ref + s1 * noise, ref), psnr(ref + s2 * noise, ref)
    if s1 < s2:
        assert p1 > p2
    elif s1 > s2:
        assert p1 < p2


def test_t_test_matches_numerical_oracle():
    t, p = paired_t_test(CANON_X, CANON_Y)
    t_ref, p_ref = student_t_two_sided_p(CANON_X, CANON_Y)
    assert t == pytest.approx(t_ref, abs=1e-9)
    assert abs(p - p_ref) <= 1e-6
    assert 0 < p < 0.01


def test_t_test_errors():
    with pytest.raises(ZeroVariance):
        paired_t_test([1, 2, 3, 4], [1, 2, 3, 4])
    with pytest.raises(ZeroVariance):
        paired_t_test([2, 3, 4, 5, 6], [1, 2, 3, 4, 5])
    with pytest.raises(TooFewSamples):
        paired_t_test([1, 2], [0, 1])


def _vol(data, sid):
    return VolumeGrid(np.asarray(data, np.float32), (1.0, 1.0, 1.0), subject_id=sid)


def test_evaluate_cohort_identity_and_csv(tmp_path):
    rng = np.random.default_rng(5)
    paths = []
    for i in range(3):
        paths.append(save_volume(_vol(rng.uniform(0, 1, (16, 16, 16)), f"s{i}"), tmp_path / f"s{i}.raw"))
    rep = evaluate_cohort(paths, paths, method="same")
    for row in rep.per_subject:
        assert row["psnr"] == 100.0 and row["ssim"] == pytest.approx(1.0)
    out = rep.write_csv(tmp_path / "m.csv").read_text().splitlines()
    assert out[1].startswith("subject_id,data_range,psnr")
    assert len(out) == 2 + 3 + 2


def test_evaluate_cohort_mismatch(tmp_path):
    a = save_volume(_vol(np.ones((8, 8, 8)), "a"), tmp_path / "a.raw")
    b = save_volume(_vol(np.ones((8, 8, 8)), "b"), tmp_path / "b.raw")
    with pytest.raises(SubjectMismatch):
        evaluate_cohort([a], [b])
    with pytest.raises(SubjectMismatch):
        evaluate_cohort([], [])
    with pytest.raises(SubjectMismatch):
        evaluate_volumes([])


def test_report_significance_and_table():
    rng = np.random.default_rng(6)
    refs = [rng.uniform(0, 1, (16, 16, 16)) for _ in range(5)]
    base = evaluate_volumes([(f"s{i}", r + 0.3 * rng.normal(size=r.shape), r) for i, r in enumerate(refs)],
                            method="Baseline")
    better = evaluate_volumes([(f"s{i}", r + 0.05 * rng.normal(size=r.shape), r) for i, r in enumerate(refs)],
                              method="Model", baseline=base)
    assert better.significance["psnr"] < 0.01
    assert better.aggregate["psnr"][0] > base.aggregate["psnr"][0]
    table = format_table([base, better])
    lines = table.splitlines()
    assert lines[0].startswith("Method") and len(lines) == 4
    assert "*" in lines[3] and "*" not in lines[2]
    with pytest.raises(SubjectMismatch):
        build_report(better.per_subject[:3], baseline=base)
