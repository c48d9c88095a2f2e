"""Image quality metrics, Bjontegaard deltas and RD-curve reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _image_tensor(img) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        return img.to(torch.float64)
    return torch.as_tensor(np.asarray(img, dtype=np.float64))


def _check_same_shape(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window() -> torch.Tensor:
    x = torch.arange(SSIM_WINDOW, dtype=torch.float64) - (SSIM_WINDOW - 1) / 2
    g = torch.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


_WINDOW = _gaussian_window()


_BAND_CACHE: dict = {}


def _band(n: int) -> torch.Tensor:
    """(n - 10, n) matrix applying the window in valid mode along one axis."""
    if n not in _BAND_CACHE:
        m = torch.zeros(n - SSIM_WINDOW + 1, n, dtype=torch.float64)
        for i in range(n - SSIM_WINDOW + 1):
            m[i, i : i + SSIM_WINDOW] = _WINDOW
        _BAND_CACHE[n] = m
    return _BAND_CACHE[n]


def _blur(x: torch.Tensor) -> torch.Tensor:
    # x: (..., H, W); separable valid-mode filtering, no padding
    return _band(x.shape[-2]) @ x @ _band(x.shape[-1]).T


def ssim_map(a, b) -> torch.Tensor:
    """Local SSIM map (C, H-10, W-10) for (H, W, C) images; differentiable."""
    a = _image_tensor(a)
    b = _image_tensor(b)
    _check_same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    a = a.permute(2, 0, 1)
    b = b.permute(2, 0, 1)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    blurred = _blur(torch.stack([a, b, a * a, b * b, a * b]))
    mu_a, mu_b = blurred[0], blurred[1]
    var_a = blurred[2] - mu_a**2
    var_b = blurred[3] - mu_b**2
    cov = blurred[4] - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim_tensor(a, b) -> torch.Tensor:
    return ssim_map(a, b).mean()


def ssim(a, b) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    with torch.no_grad():
        return float(ssim_tensor(a, b))


# ---------------------------------------------------------------------------
# Bjontegaard
# ---------------------------------------------------------------------------


@dataclass
class RdPoint:
    bits_per_frame: float
    psnr_db: float
    ssim: float
    lambda1: float

    def __post_init__(self):
        if not self.bits_per_frame > 0:
            raise ValueError("bits_per_frame must be positive")
        if not math.isfinite(self.psnr_db):
            raise ValueError("psnr must be finite")


def _curve_arrays(points):
    pts = list(points)
    if len(pts) < 4:
        raise ValueError("Bjontegaard needs at least 4 points per curve")
    rate = np.array([p.bits_per_frame for p in pts], dtype=np.float64)
    quality = np.array([p.psnr_db for p in pts], dtype=np.float64)
    if len(np.unique(rate)) != len(rate):
        raise ValueError("rates must be distinct")
    return np.log10(rate), quality


def _poly_integral_mean(x, y, lo, hi) -> float:
    poly = np.polyint(np.polyfit(x, y, 3))
    return (np.polyval(poly, hi) - np.polyval(poly, lo)) / (hi - lo)


def bjontegaard(anchor, test) -> tuple[float, float]:
    """(BD-rate in percent, BD-PSNR in dB) of ``test`` relative to ``anchor``.

    Cubic fits on log10(rate); each delta averages the gap between the two
    fitted curves over their overlapping interval.
    """
    ra, qa = _curve_arrays(anchor)
    rt, qt = _curve_arrays(test)

    lo_r, hi_r = max(ra.min(), rt.min()), min(ra.max(), rt.max())
    if not hi_r > lo_r:
        raise ValueError("curves have no overlapping rate interval")
    bd_psnr = _poly_integral_mean(rt, qt, lo_r, hi_r) - _poly_integral_mean(ra, qa, lo_r, hi_r)

    lo_q, hi_q = max(qa.min(), qt.min()), min(qa.max(), qt.max())
    if hi_q > lo_q:
        avg_log_diff = _poly_integral_mean(qt, rt, lo_q, hi_q) - _poly_integral_mean(qa, ra, lo_q, hi_q)
        bd_rate = (10.0**avg_log_diff - 1.0) * 100.0
    elif np.allclose(qa, qt) and np.allclose(ra, rt):
        bd_rate = 0.0
    else:
        raise ValueError("curves have no overlapping quality interval")
    return float(bd_rate), float(bd_psnr)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

RD_COLUMNS = ["label", "lambda1", "bits_per_frame", "psnr_db", "ssim"]


def rd_report(curves: dict[str, list[RdPoint]], out_path, samples: int = 64) -> tuple[Path, Path]:
    """Write ``<out>.csv`` with raw points and ``<out>_fit.csv`` with fitted curves."""
    if not curves or not any(curves.values()):
        raise ValueError("no RD points to report")
    out = Path(out_path)
    if out.suffix == ".csv":
        out = out.with_suffix("")
    points_path = out.with_name(out.name + ".csv")
    fit_path = out.with_name(out.name + "_fit.csv")
    try:
        points_path.parent.mkdir(parents=True, exist_ok=True)
        with points_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RD_COLUMNS)
            for label, pts in curves.items():
                for p in pts:
                    w.writerow([label, repr(float(p.lambda1)), repr(float(p.bits_per_frame)),
                                repr(float(p.psnr_db)), repr(float(p.ssim))])
        with fit_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "bits_per_frame", "psnr_db_fit"])
            for label, pts in curves.items():
                if len(pts) < 2:
                    continue
                x = np.log10([p.bits_per_frame for p in pts])
                y = np.array([p.psnr_db for p in pts])
                deg = min(3, len(pts) - 1)
                coef = np.polyfit(x, y, deg)
                for lx in np.linspace(x.min(), x.max(), samples):
                    w.writerow([label, repr(float(10.0**lx)), repr(float(np.polyval(coef, lx)))])
    except OSError as exc:
        raise OSError(f"cannot write RD report to {out}: {exc}") from exc
    return points_path, fit_path


def read_rd_csv(path) -> dict[str, list[RdPoint]]:
    curves: dict[str, list[RdPoint]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            curves.setdefault(row["label"], []).append(
                RdPoint(
                    bits_per_frame=float(row["bits_per_frame"]),
                    psnr_db=float(row["psnr_db"]),
                    ssim=float(row["ssim"]),
                    lambda1=float(row["lambda1"]),
                )
            )
    return curves
