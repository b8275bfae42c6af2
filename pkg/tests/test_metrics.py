import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from img2st.metrics import (
    SsimConfig,
    evaluate,
    mae,
    mean_expression_profile,
    mse,
    pcc,
    ssim_map,
    ssim_st,
    write_report_csv,
)
from oracles import pcc_stdlib, ssim_window_naive


def test_ssim_map_matches_window_oracle(rng):
    x, y = rng.uniform(size=(9, 8)), rng.uniform(size=(9, 8))
    got = ssim_map(x, y, SsimConfig(window=5, dynamic_range=1.0))
    want = ssim_window_naive(x, y, 5, 1.0)
    np.testing.assert_allclose(got.ravel(), want, atol=1e-12)


def test_ssim_st_per_gene_dynamic_range(rng):
    pred, truth = rng.uniform(size=(2, 2, 7, 7)), 3 * rng.uniform(size=(2, 2, 7, 7))
    per_gene, agg = ssim_st(pred, truth)
    for g in range(2):
        L = max(pred[:, g].max(), truth[:, g].max())
        vals = sum((ssim_window_naive(pred[r, g], truth[r, g], 7, L) for r in range(2)), [])
        assert per_gene[g] == pytest.approx(np.mean(vals), abs=1e-12)
    assert agg == pytest.approx(per_gene.mean())


def test_ssim_window_shrinks_to_grid():
    a = np.random.default_rng(0).uniform(size=(1, 1, 4, 4))
    b = np.random.default_rng(1).uniform(size=(1, 1, 4, 4))
    L = max(a.max(), b.max())
    want = np.mean(ssim_window_naive(a[0, 0], b[0, 0], 3, L))
    assert ssim_st(a, b)[1] == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError):
        ssim_st(a[..., :2, :2], b[..., :2, :2])


def test_ssim_masked_cells_zeroed_both_sides(rng):
    a, b = rng.uniform(size=(1, 1, 5, 5)), rng.uniform(size=(1, 1, 5, 5))
    mask = np.ones((1, 5, 5), dtype=bool)
    mask[0, 2, 2] = False
    a2, b2 = a.copy(), b.copy()
    a2[0, 0, 2, 2], b2[0, 0, 2, 2] = 9.0, -4.0
    assert ssim_st(a, b, mask)[1] == ssim_st(a2, b2, mask)[1]


@given(seed=st.integers(0, 2**31), shift=st.floats(-5, 5))
def test_ssim_properties(seed, shift):
    r = np.random.default_rng(seed)
    a = r.normal(size=(2, 3, 6, 6)) + shift
    b = r.normal(size=(2, 3, 6, 6))
    same = ssim_st(a, a)[1]
    assert abs(same - 1.0) < 1e-9
    ab, ba = ssim_st(a, b)[1], ssim_st(b, a)[1]
    assert abs(ab - ba) < 1e-9
    assert -1.0 <= ab <= 1.0
    per, _ = ssim_st(a, -a)
    assert np.all(per >= -1) and np.all(per <= 1)


def test_ssim_constant_maps():
    c = np.full((1, 2, 5, 5), 0.0)
    assert ssim_st(c, c)[1] == 1.0
    d = np.full((1, 2, 5, 5), 3.0)
    assert ssim_st(d, d)[1] == pytest.approx(1.0, abs=1e-12)


def test_ssim_config_validation():
    for bad in (dict(window=4), dict(window=1), dict(k1=0)):
        with pytest.raises(ValueError):
            SsimConfig(**bad)


@given(seed=st.integers(0, 2**31), n=st.integers(3, 40))
def test_pcc_matches_stdlib(seed, n):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=n), r.normal(size=n)
    assert pcc(x, y) == pytest.approx(pcc_stdlib(x, y), abs=1e-12)


def test_pcc_degenerate_flag(rng):
    assert pcc(rng.normal(size=20), np.zeros(20)) is None
    assert pcc(np.full(5, 2.0), rng.normal(size=5)) is None
    with pytest.raises(ValueError):
        pcc([1.0], [2.0])
    with pytest.raises(ValueError):
        pcc([1.0, 2.0], [1.0, 2.0, 3.0])


def test_mse_mae_per_gene(rng):
    p, t = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    mask = rng.uniform(size=(2, 4, 4)) > 0.5
    per, agg = mse(p, t, mask)
    for g in range(3):
        assert per[g] == pytest.approx(np.mean((p[:, g][mask] - t[:, g][mask]) ** 2))
    assert agg == pytest.approx(per.mean())
    per, _ = mae(p, t, mask)
    assert per[1] == pytest.approx(np.mean(np.abs(p[:, 1][mask] - t[:, 1][mask])))


def test_mean_expression_profile_order():
    t = np.zeros((1, 3, 2, 2))
    t[0, 0], t[0, 1], t[0, 2] = 1.0, 3.0, 1.0
    order, tm, pm = mean_expression_profile(t * 0.5, t)
    assert list(order) == [1, 0, 2]
    np.testing.assert_allclose(tm, [3, 1, 1])
    np.testing.assert_allclose(pm, [1.5, 0.5, 0.5])


def test_report_csv(tmp_path, rng):
    truth = rng.uniform(size=(2, 3, 5, 5))
    truth[:, 2] = 0.0
    pred = truth + 0.1 * rng.normal(size=truth.shape)
    report = evaluate(pred, truth, genes=["A", "B", "Z"])
    assert report.degenerate_count == 1 and math.isnan(report.pcc[2])
    write_report_csv(report, tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["gene", "mse", "mae", "pcc", "pcc_degenerate", "ssim_st"]
    assert rows[3][0] == "Z" and rows[3][3] == "" and rows[3][4] == "1"
    assert rows[-1][0] == "__aggregate__" and rows[-1][4] == "1"
    assert float(rows[-1][5]) == pytest.approx(report.aggregate["ssim_st"])
