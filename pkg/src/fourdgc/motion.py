"""Multi-resolution motion grid, positional encoding and the motion MLPs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .gaussians import GaussianFrameSet, quat_multiply, quat_normalize

log = logging.getLogger(__name__)

IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)
_clamp_warned = False


def bounding_box(centers: np.ndarray, dilation: float = 0.1) -> np.ndarray:
    """(2, 3) box around ``centers`` grown by ``dilation`` of its extent per side."""
    centers = np.asarray(centers, dtype=np.float64)
    lo, hi = centers.min(axis=0), centers.max(axis=0)
    extent = np.maximum(hi - lo, 1e-3)
    return np.stack([lo - dilation * extent, hi + dilation * extent])


def normalize_to_box(mu: torch.Tensor, bbox) -> torch.Tensor:
    global _clamp_warned
    bbox = torch.as_tensor(np.asarray(bbox, dtype=np.float64))
    unit = (mu - bbox[0]) / (bbox[1] - bbox[0])
    outside = (unit < 0) | (unit > 1)
    if bool(outside.any()):
        if not _clamp_warned:
            log.warning("centre outside the motion-grid bounding box; clamping")
            _clamp_warned = True
        unit = torch.clamp(unit, 0.0, 1.0)
    return unit


def positional_encode(mu_unit: torch.Tensor, levels: int):
    """sin/cos bands for l = 1..levels of box-normalised positions.

    Returns (sin, cos), each shaped (..., levels, 3).
    """
    if levels < 1:
        raise ValueError("need at least one level")
    mu_unit = torch.as_tensor(mu_unit, dtype=torch.float64)
    freq = torch.tensor([2.0**l * math.pi for l in range(1, levels + 1)], dtype=torch.float64)
    angles = mu_unit.unsqueeze(-2) * freq[:, None]
    return torch.sin(angles), torch.cos(angles)


def trilinear_corners(coords: torch.Tensor, resolution: int):
    """Flat node ids (M, 8) and weights (M, 8) for align-corners trilinear lookups."""
    coords = torch.clamp(torch.as_tensor(coords, dtype=torch.float64), -1.0, 1.0)
    n = resolution
    if n == 1:
        m = coords.shape[0]
        return torch.zeros(m, 8, dtype=torch.long), torch.full((m, 8), 0.125, dtype=torch.float64)
    u = (coords + 1.0) * 0.5 * (n - 1)
    i0 = torch.clamp(torch.floor(u), 0, n - 2)
    frac = u - i0
    i0 = i0.long()
    ids, weights = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix = i0[:, 0] + dx
                iy = i0[:, 1] + dy
                iz = i0[:, 2] + dz
                wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
                wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                ids.append((ix * n + iy) * n + iz)
                weights.append(wx * wy * wz)
    return torch.stack(ids, dim=1), torch.stack(weights, dim=1)


def grid_sample(level: torch.Tensor, coords) -> torch.Tensor:
    """Trilinear lookup of a (C, N, N, N) level at coords in [-1, 1]^3 -> (M, C)."""
    coords = torch.as_tensor(coords, dtype=torch.float64)
    single = coords.ndim == 1
    if single:
        coords = coords[None]
    c, n = level.shape[0], level.shape[1]
    ids, w = trilinear_corners(coords, n)
    flat = level.reshape(c, -1)
    out = (flat[:, ids] * w).sum(-1).T
    return out[0] if single else out


@dataclass
class MotionGrid:
    levels: list  # torch tensors (C_l, N_l, N_l, N_l)
    bbox: np.ndarray  # (2, 3)

    @classmethod
    def zeros(cls, resolutions, channels, bbox) -> "MotionGrid":
        if len(resolutions) != len(channels):
            raise ValueError("resolutions and channels differ in length")
        levels = [torch.zeros(c, n, n, n, dtype=torch.float64) for n, c in zip(resolutions, channels)]
        return cls(levels, np.asarray(bbox, dtype=np.float64))

    @property
    def resolutions(self) -> tuple:
        return tuple(int(l.shape[1]) for l in self.levels)

    @property
    def channels(self) -> tuple:
        return tuple(int(l.shape[0]) for l in self.levels)

    @property
    def feature_width(self) -> int:
        return 2 * sum(self.channels)

    def shapes(self) -> list:
        return [tuple(l.shape) for l in self.levels]

    def clone(self) -> "MotionGrid":
        return MotionGrid([l.detach().clone() for l in self.levels], self.bbox.copy())


HIDDEN = 64


@dataclass
class MotionMlps:
    """Two one-hidden-layer MLPs mapping grid features to translation (3) and
    an identity-biased quaternion offset (4)."""

    mu_w1: torch.Tensor
    mu_b1: torch.Tensor
    mu_w2: torch.Tensor
    mu_b2: torch.Tensor
    r_w1: torch.Tensor
    r_b1: torch.Tensor
    r_w2: torch.Tensor
    r_b2: torch.Tensor

    NAMES = ("mu_w1", "mu_b1", "mu_w2", "mu_b2", "r_w1", "r_b1", "r_w2", "r_b2")

    @classmethod
    def init(cls, seed: int, in_dim: int = 20, hidden: int = HIDDEN) -> "MotionMlps":
        gen = torch.Generator().manual_seed(int(seed))
        bound = 1.0 / math.sqrt(in_dim)

        def uniform(*shape):
            return (torch.rand(*shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0) * bound

        return cls(
            uniform(hidden, in_dim), uniform(hidden),
            torch.zeros(3, hidden, dtype=torch.float64), torch.zeros(3, dtype=torch.float64),
            uniform(hidden, in_dim), uniform(hidden),
            torch.zeros(4, hidden, dtype=torch.float64), torch.zeros(4, dtype=torch.float64),
        )

    @property
    def in_dim(self) -> int:
        return int(self.mu_w1.shape[1])

    def tensors(self) -> dict:
        return {k: getattr(self, k) for k in self.NAMES}

    def detached(self) -> "MotionMlps":
        return MotionMlps(*(getattr(self, k).detach().clone() for k in self.NAMES))

    def rounded_f32(self) -> "MotionMlps":
        return MotionMlps(*(getattr(self, k).detach().to(torch.float32).to(torch.float64) for k in self.NAMES))

    def pack(self, head: str) -> np.ndarray:
        names = [k for k in self.NAMES if k.startswith(head + "_")]
        return np.concatenate([getattr(self, k).detach().numpy().reshape(-1) for k in names])

    @classmethod
    def unpack(cls, mu_flat, r_flat, in_dim: int = 20, hidden: int = HIDDEN) -> "MotionMlps":
        def split(flat, out_dim):
            flat = np.asarray(flat, dtype=np.float64)
            sizes = [hidden * in_dim, hidden, out_dim * hidden, out_dim]
            if len(flat) != sum(sizes):
                raise ValueError(f"MLP block has {len(flat)} values, expected {sum(sizes)}")
            parts = np.split(flat, np.cumsum(sizes)[:-1])
            shapes = [(hidden, in_dim), (hidden,), (out_dim, hidden), (out_dim,)]
            return [torch.as_tensor(p.reshape(s).copy()) for p, s in zip(parts, shapes)]

        return cls(*split(mu_flat, 3), *split(r_flat, 4))

    def forward(self, features: torch.Tensor):
        h = torch.relu(features @ self.mu_w1.T + self.mu_b1)
        delta_mu = h @ self.mu_w2.T + self.mu_b2
        hr = torch.relu(features @ self.r_w1.T + self.r_b1)
        delta_q = hr @ self.r_w2.T + self.r_b2
        return delta_mu, delta_q


@dataclass
class MotionSample:
    delta_mu: np.ndarray  # (M, 3)
    delta_q: np.ndarray  # (M, 4) raw MLP output, before identity bias

    @property
    def rotation(self) -> np.ndarray:
        q = self.delta_q + np.asarray(IDENTITY_QUAT)
        return q / np.linalg.norm(q, axis=-1, keepdims=True)


def check_widths(grid: MotionGrid, mlps: MotionMlps) -> None:
    if grid.feature_width != mlps.in_dim:
        raise ValueError(
            f"grid feature width {grid.feature_width} does not match MLP input width {mlps.in_dim}"
        )


def motion_features(mu: torch.Tensor, grid: MotionGrid) -> torch.Tensor:
    """Concatenated per-level [sample(sin band), sample(cos band)] features (M, 2*sum C)."""
    unit = normalize_to_box(mu, grid.bbox)
    sin_b, cos_b = positional_encode(unit, len(grid.levels))
    feats = []
    for l, level in enumerate(grid.levels):
        feats.append(grid_sample(level, sin_b[:, l]))
        feats.append(grid_sample(level, cos_b[:, l]))
    return torch.cat(feats, dim=-1)


def predict_motion_tensors(mu: torch.Tensor, grid: MotionGrid, mlps: MotionMlps):
    check_widths(grid, mlps)
    return mlps.forward(motion_features(mu, grid))


def predict_motion(mu, grid: MotionGrid, mlps: MotionMlps) -> MotionSample:
    with torch.no_grad():
        mu_t = torch.as_tensor(np.asarray(mu, dtype=np.float64).reshape(-1, 3))
        dmu, dq = predict_motion_tensors(mu_t, grid, mlps)
    return MotionSample(dmu.numpy(), dq.numpy())


def delta_rotation(delta_q: torch.Tensor) -> torch.Tensor:
    return quat_normalize(delta_q + torch.tensor(IDENTITY_QUAT, dtype=delta_q.dtype))


def transform_tensors(centers, rotations, delta_mu, delta_q):
    """Differentiable pose update: mu + dmu, normalize(dR * R)."""
    return centers + delta_mu, quat_normalize(quat_multiply(delta_rotation(delta_q), rotations))


def apply_motion(prev: GaussianFrameSet, grid: MotionGrid, mlps: MotionMlps,
                 frame_index: int | None = None) -> GaussianFrameSet:
    """Move every primitive of ``prev`` by the predicted rigid motion.

    SH, log-scale and opacity are copied unchanged. Primitives whose
    predicted motion is exactly zero keep their pose bit-for-bit.
    """
    out = prev.copy(prev.frame_index if frame_index is None else frame_index)
    if len(prev) == 0:
        return out
    sample = predict_motion(prev.centers, grid, mlps)
    out.centers = prev.centers + sample.delta_mu
    with torch.no_grad():
        rot = quat_normalize(
            quat_multiply(delta_rotation(torch.as_tensor(sample.delta_q)), torch.as_tensor(prev.rotations))
        ).numpy()
    still = np.all(sample.delta_q == 0.0, axis=1)
    out.rotations = np.where(still[:, None], prev.rotations, rot)
    return out
