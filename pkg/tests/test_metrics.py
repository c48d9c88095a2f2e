import numpy as np
from scipy.integrate import trapezoid
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fourdgc.metrics import RdPoint, bjontegaard, psnr, rd_report, read_rd_csv, ssim


def curve(rates, psnrs):
    return [RdPoint(r, p, 0.9, lam) for r, p, lam in zip(rates, psnrs, (3e-4, 1e-4, 5e-5, 1e-5))]


def trapezoid_oracle(anchor, test, samples=10_000):
    def fit(c):
        x = np.log10([p.bits_per_frame for p in c])
        y = np.array([p.psnr_db for p in c])
        return x, y, np.polyfit(x, y, 3), np.polyfit(y, x, 3)

    xa, ya, pa, ia = fit(anchor)
    xt, yt, pt, it = fit(test)
    lo, hi = max(xa.min(), xt.min()), min(xa.max(), xt.max())
    grid = np.linspace(lo, hi, samples)
    bd_psnr = trapezoid(np.polyval(pt, grid) - np.polyval(pa, grid), grid) / (hi - lo)
    lo, hi = max(ya.min(), yt.min()), min(ya.max(), yt.max())
    grid = np.linspace(lo, hi, samples)
    avg = trapezoid(np.polyval(it, grid) - np.polyval(ia, grid), grid) / (hi - lo)
    return (10**avg - 1) * 100, bd_psnr


def test_psnr_cases(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert psnr(a, a) == 99.0
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0)
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    assert psnr(a, b) == psnr(b, a)
    noisy = [psnr(a, a + np.random.default_rng(1).normal(0, s, a.shape)) for s in (0.01, 0.02, 0.05)]
    assert noisy[0] > noisy[1] > noisy[2]
    with pytest.raises(ValueError):
        psnr(a, a[:8])


def test_ssim_cases(rng):
    a = rng.uniform(size=(20, 20, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(np.full((16, 16, 3), 0.5), np.full((16, 16, 3), 0.6)) == pytest.approx(0.6001 / 0.6101, abs=1e-12)
    assert ssim(a, 1 - a) < ssim(a, a)
    with pytest.raises(ValueError):
        ssim(a, a[:, :10])


def test_ssim_matches_direct_window_sum(rng):
    a = rng.uniform(size=(13, 12, 1))
    b = rng.uniform(size=(13, 12, 1))
    x = np.arange(11) - 5
    g = np.exp(-(x**2) / (2 * 1.5**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(3):
        for j in range(2):
            pa, pb = a[i : i + 11, j : j + 11, 0], b[i : i + 11, j : j + 11, 0]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * pa * pa).sum() - ma**2
            vb = (w * pb * pb).sum() - mb**2
            cov = (w * pa * pb).sum() - ma * mb
            c1, c2 = 1e-4, 9e-4
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-12)


def test_bjontegaard_identity_and_shift():
    a = curve([1e4, 2e4, 4e4, 8e4], [30, 32, 33.5, 34.2])
    assert bjontegaard(a, a) == pytest.approx((0.0, 0.0), abs=1e-9)
    up = curve([1e4, 2e4, 4e4, 8e4], [31, 33, 34.5, 35.2])
    assert bjontegaard(a, up)[1] == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bjontegaard_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    def random_curve():
        r = np.sort(rng.uniform(3.5, 5.0, 4))
        while np.min(np.diff(r)) < 0.05:
            r = np.sort(rng.uniform(3.5, 5.0, 4))
        p = 25 + np.cumsum(rng.uniform(0.5, 3.0, 4))
        return curve(10**r, p)
    a, t = random_curve(), random_curve()
    try:
        got = bjontegaard(a, t)
    except ValueError:
        return  # no overlap
    want = trapezoid_oracle(a, t)
    assert got[1] == pytest.approx(want[1], rel=1e-3, abs=1e-6)
    assert got[0] == pytest.approx(want[0], rel=1e-3, abs=1e-6)
    back = bjontegaard(t, a)
    assert back[1] == pytest.approx(-got[1], abs=1e-9)


def test_bjontegaard_rejects():
    a = curve([1e4, 2e4, 4e4, 8e4], [30, 32, 33, 34])
    far = curve([1e6, 2e6, 4e6, 8e6], [30, 32, 33, 34])
    with pytest.raises(ValueError):
        bjontegaard(a, far)
    with pytest.raises(ValueError):
        bjontegaard(a[:3], a[:3])
    with pytest.raises(ValueError):
        RdPoint(0.0, 30, 0.9, 1e-4)


def test_rd_report_round_trip(tmp_path):
    pts = curve([12345.678901234567, 2e4 / 3, 4e4, 8e4], [30.123456789012345, 32, 33, 34])
    csv_path, fit_path = rd_report({"a": pts}, tmp_path / "rd")
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "label,lambda1,bits_per_frame,psnr_db,ssim" and len(lines) == 5
    assert read_rd_csv(csv_path)["a"] == pts
    assert fit_path.exists()
    rd_report({"a": pts, "b": pts}, tmp_path / "two")
    curves = read_rd_csv(tmp_path / "two.csv")
    assert bjontegaard(curves["a"], curves["b"]) == pytest.approx((0.0, 0.0), abs=1e-9)


def test_rd_report_errors(tmp_path):
    with pytest.raises(ValueError):
        rd_report({}, tmp_path / "x")
    (tmp_path / "file").write_text("")
    with pytest.raises(OSError):
        rd_report({"a": curve([1e4, 2e4, 4e4, 8e4], [30, 31, 32, 33])}, tmp_path / "file" / "rd")
