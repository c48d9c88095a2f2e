"""Selection of under-modelled regions and spawning of compensated Gaussians."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .gaussians import GaussianFrameSet, GaussianPrimitive, quat_to_matrix

TAU_G = 1e-4
TAU_MU = 0.08
TAU_R = math.pi / 4
SCALE_FLOOR = -0.01
OPACITY_FLOOR = 0.01
MOTION_SCALE_SHRINK = math.log(100.0)

GRADIENT = "gradient"
MOTION = "motion"


@dataclass
class GradientStats:
    """Running mean of the projected-centre gradient norm per primitive."""

    total: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientStats":
        return cls(np.zeros(n), np.zeros(n))

    def add(self, grad_norms: np.ndarray, visible: np.ndarray | None = None) -> None:
        mask = np.ones(len(self.total), bool) if visible is None else np.asarray(visible, bool)
        self.total[mask] += np.asarray(grad_norms)[mask]
        self.count[mask] += 1

    @property
    def values(self) -> np.ndarray:
        return np.divide(self.total, self.count, out=np.zeros_like(self.total), where=self.count > 0)


@dataclass
class CompensatedSet:
    primitives: GaussianFrameSet
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.provenance) != len(self.primitives):
            raise ValueError("one provenance tag per primitive required")

    def __len__(self) -> int:
        return len(self.primitives)

    @classmethod
    def empty(cls, sh_degree: int = 1, frame_index: int = 1) -> "CompensatedSet":
        return cls(GaussianFrameSet.empty(sh_degree, frame_index), [])


def select_gradient_clones(stats, tau_g: float = TAU_G) -> np.ndarray:
    values = stats.values if isinstance(stats, GradientStats) else np.asarray(stats, dtype=np.float64)
    return np.nonzero(values > tau_g)[0]


def select_motion_clones(
    delta_mu,
    delta_rot,
    log_scales,
    tau_mu: float = TAU_MU,
    tau_r: float = TAU_R,
    scale_floor: float = SCALE_FLOOR,
) -> np.ndarray:
    """Indices with (|dmu| > tau_mu or angle(dR) > tau_r) and max log-scale > floor.

    ``delta_rot`` holds unit quaternions of the per-primitive rotation update.
    """
    delta_mu = np.asarray(delta_mu, dtype=np.float64).reshape(-1, 3)
    delta_rot = np.asarray(delta_rot, dtype=np.float64).reshape(-1, 4)
    log_scales = np.asarray(log_scales, dtype=np.float64).reshape(-1, 3)
    moved = np.linalg.norm(delta_mu, axis=1) > tau_mu
    angle = 2.0 * np.arccos(np.minimum(np.abs(delta_rot[:, 0]), 1.0))
    turned = angle > tau_r
    large = log_scales.max(axis=1) > scale_floor
    return np.nonzero((moved | turned) & large)[0]


def clone_rng(seed: int, frame_index: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(frame_index), int(index)])


def spawn_compensated(source: GaussianPrimitive, kind: str, rng: np.random.Generator) -> list:
    """Clone ``source`` once (gradient) or twice with shrunken scale (motion).

    Clone centres are drawn from N(mu, 2 Sigma).
    """
    if kind not in (GRADIENT, MOTION):
        raise ValueError(f"unknown clone kind {kind!r}")
    count = 1 if kind == GRADIENT else 2
    with torch.no_grad():
        rot = quat_to_matrix(torch.as_tensor(np.asarray(source.rotation, dtype=np.float64))).numpy()
    scale = np.exp(np.asarray(source.log_scale, dtype=np.float64))
    out = []
    for _ in range(count):
        z = rng.standard_normal(3)
        center = np.asarray(source.center, dtype=np.float64) + math.sqrt(2.0) * rot @ (scale * z)
        log_scale = np.array(source.log_scale, dtype=np.float64)
        if kind == MOTION:
            log_scale = log_scale - MOTION_SCALE_SHRINK
        out.append(
            GaussianPrimitive(
                center, np.array(source.rotation, dtype=np.float64), log_scale,
                float(source.opacity_logit), np.array(source.sh, dtype=np.float64),
            )
        )
    return out


def clone_budget(n_prev: int, fraction: float) -> int:
    return max(1, math.ceil(fraction * n_prev))


def plan_clones(grad_idx, grad_values, motion_idx, motion_strength, budget: int):
    """Rank candidates and keep as many as ``budget`` new primitives allow.

    Gradient candidates come first (largest statistic first), then motion
    candidates (largest translation first, two clones each). Returned index
    arrays are sorted ascending so spawning runs in primitive order.
    """
    grad_idx = np.asarray(grad_idx, dtype=np.int64)
    motion_idx = np.asarray(motion_idx, dtype=np.int64)
    order = np.lexsort((grad_idx, -np.asarray(grad_values, dtype=np.float64)[grad_idx])) if len(grad_idx) else []
    chosen_g = []
    for i in np.asarray(grad_idx)[order]:
        if len(chosen_g) >= budget:
            break
        chosen_g.append(int(i))
    left = budget - len(chosen_g)
    chosen_m = []
    if len(motion_idx):
        strength = np.asarray(motion_strength, dtype=np.float64)[motion_idx]
        for i in motion_idx[np.lexsort((motion_idx, -strength))]:
            if left < 2:
                break
            chosen_m.append(int(i))
            left -= 2
    return np.array(sorted(chosen_g), dtype=np.int64), np.array(sorted(chosen_m), dtype=np.int64)


def build_compensated(source: GaussianFrameSet, grad_idx, motion_idx, seed: int,
                      frame_index: int) -> CompensatedSet:
    prims, tags = [], []
    jobs = sorted([(int(i), GRADIENT) for i in grad_idx] + [(int(i), MOTION) for i in motion_idx])
    for i, kind in jobs:
        # separate streams for the two kinds so a primitive selected by both stays reproducible
        rng = clone_rng(seed + (0 if kind == GRADIENT else 1), frame_index, i)
        clones = spawn_compensated(source.primitive(i), kind, rng)
        prims += clones
        tags += [kind] * len(clones)
    return CompensatedSet(GaussianFrameSet.from_primitives(prims, source.sh_degree, frame_index), tags)


def prune_low_opacity(comp: CompensatedSet, threshold: float = OPACITY_FLOOR) -> CompensatedSet:
    keep = np.nonzero(~(comp.primitives.opacities < threshold))[0]
    return CompensatedSet(comp.primitives.select(keep), [comp.provenance[i] for i in keep])
