"""Keyframe training, the two per-frame optimisation stages, and frame coding.

The encoder keeps its own reconstruction of every frame from the values it
quantised; the decoder rebuilds the same frames from bytes alone. Both feed
identical inputs to the same reconstruction routine, so their reference
buffers agree bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import compensation as comp
from . import stream as bs
from .diffcore import Adam
from .entropy import (
    FactorizedEntropyModel,
    LIKELIHOOD_FLOOR,
    TensorHeader,
    _legendre,
    decode_tensor,
    encode_tensor,
    quantize_sim,
    quantize_ste,
)
from .gaussians import Camera, GaussianFrameSet, quat_normalize, sh_coeff_count
from .metrics import psnr, ssim
from .motion import (
    MotionGrid,
    MotionMlps,
    apply_motion,
    bounding_box,
    normalize_to_box,
    positional_encode,
    predict_motion,
    transform_tensors,
    trilinear_corners,
)
from .render import loss_color, render_image, render_tensors

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.0003, 0.0001, 0.00005, 0.00001)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 0.0001
    lambda2: float = 0.2
    keyframe_iters: int = 2000
    stage1_iters: int = 400
    stage2_iters: int = 100
    hard_iters: int = 50
    q_grid: float = 100.0
    q_sh: float = 50.0
    resolutions: tuple = (16, 32, 64)
    channels: tuple = (4, 4, 2)
    sh_degree: int = 1
    seed: int = 0
    lr_grid: float = 5e-3
    lr_mlp: float = 1e-3
    lr_center: float = 1.6e-4  # multiplied by the scene extent
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_entropy: float = 1e-3
    clone_fraction: float = 0.05
    tau_g: float = comp.TAU_G
    tau_mu: float = comp.TAU_MU
    tau_r: float = comp.TAU_R
    scale_floor: float = comp.SCALE_FLOOR
    opacity_floor: float = comp.OPACITY_FLOOR
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        self.channels = tuple(int(c) for c in self.channels)
        self.background = tuple(float(b) for b in self.background)
        for name in ("keyframe_iters", "stage1_iters", "stage2_iters"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hard_iters < 0:
            raise ValueError("hard_iters must be >= 0")
        if not self.lambda1 >= 0:
            raise ValueError("lambda1 must be >= 0")
        if not 0.0 <= self.lambda2 <= 1.0:
            raise ValueError("lambda2 must lie in [0, 1]")
        if not (self.q_grid > 0 and self.q_sh > 0):
            raise ValueError("quantisation steps must be positive")
        if len(self.resolutions) != len(self.channels) or not self.resolutions:
            raise ValueError("resolutions and channels must be non-empty and equal in length")
        if len(self.resolutions) > bs.MAX_LEVELS:
            raise ValueError(f"at most {bs.MAX_LEVELS} grid levels")
        if min(self.resolutions) < 2 or min(self.channels) < 1:
            raise ValueError("grid levels need resolution >= 2 and >= 1 channel")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must lie in 0..3")
        if len(self.background) != 3:
            raise ValueError("background needs three components")

    @property
    def feature_width(self) -> int:
        return 2 * sum(self.channels)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from strings or typed values; unknown keys are rejected."""
        names = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in names:
                raise ValueError(f"unknown config key {key!r}")
            default = names[key].default
            kwargs[key] = _coerce(raw, default, key)
        return cls(**kwargs)


def _coerce(raw, default, key):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else type(default)(raw)
    try:
        if isinstance(default, tuple):
            return tuple(float(v) if isinstance(default[0], float) else int(v)
                         for v in raw.replace(" ", "").split(",") if v)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        return type(default)(raw)
    except ValueError as exc:
        raise ValueError(f"bad value for {key}: {raw!r}") from exc


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W, 3) in [0, 1]

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError(
                f"image shape {self.image.shape} does not match camera {self.camera.width}x{self.camera.height}"
            )


def scene_extent(cameras) -> float:
    """1.1 times the largest camera distance from the camera centroid."""
    pos = np.stack([c.position for c in cameras])
    radius = float(np.linalg.norm(pos - pos.mean(axis=0), axis=1).max())
    return 1.1 * max(radius, 1e-3)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _generator(*parts: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*parts))


def _check_finite(loss: torch.Tensor, cfg: TrainConfig, where: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss in {where}; seed={cfg.seed} config={cfg.to_json()}")


def _hard_phase(it: int, iters: int, cfg: TrainConfig) -> bool:
    return it >= iters - min(cfg.hard_iters, iters)


def _quantize(x: torch.Tensor, q: float, hard: bool, gen: torch.Generator | None) -> torch.Tensor:
    return quantize_ste(x, q) if hard else quantize_sim(x, q, gen)


def _sh_rate(sh_scaled: torch.Tensor, model: FactorizedEntropyModel) -> torch.Tensor:
    """Mean bits per SH element; one model channel per (coefficient, colour) slot."""
    n = sh_scaled.shape[0]
    if n == 0:
        return torch.zeros((), dtype=torch.float64)
    y = sh_scaled.reshape(n, -1).T
    p = model.likelihood(y, None, LIKELIHOOD_FLOOR)
    return -torch.log2(p).sum() / y.numel()


def evaluate_views(frame: GaussianFrameSet, views, background=(0.0, 0.0, 0.0)) -> tuple[float, float]:
    """Mean PSNR and SSIM of ``frame`` over ``views``."""
    ps, ss = [], []
    for v in views:
        img = render_image(frame, v.camera, background)
        ps.append(psnr(img, v.image))
        ss.append(ssim(img, v.image))
    return float(np.mean(ps)), float(np.mean(ss))


# ---------------------------------------------------------------------------
# Buffers and layout
# ---------------------------------------------------------------------------


@dataclass
class GridLayout:
    sh_degree: int
    resolutions: tuple
    channels: tuple

    def values(self) -> np.ndarray:
        return np.array([self.sh_degree, len(self.resolutions), *self.resolutions, *self.channels],
                        dtype=np.float32)

    @classmethod
    def from_values(cls, values) -> "GridLayout":
        v = np.asarray(values, dtype=np.float64)
        if len(v) < 2 or not np.all(v == np.round(v)):
            raise bs.StreamFormatError("malformed layout block")
        levels = int(v[1])
        if not 1 <= levels <= bs.MAX_LEVELS or len(v) != 2 + 2 * levels:
            raise bs.StreamFormatError("malformed layout block")
        res = tuple(int(x) for x in v[2 : 2 + levels])
        ch = tuple(int(x) for x in v[2 + levels :])
        if not 0 <= v[0] <= 3 or min(res) < 2 or max(res) > 512 or min(ch) < 1 or max(ch) > 64:
            raise bs.StreamFormatError("layout values out of range")
        return cls(int(v[0]), res, ch)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "GridLayout":
        return cls(cfg.sh_degree, cfg.resolutions, cfg.channels)


@dataclass
class ReferenceBuffer:
    """Decoded previous frame plus everything both sides share for prediction."""

    frame: GaussianFrameSet
    layout: GridLayout
    bbox: np.ndarray
    mlps: MotionMlps | None = None

    def identical_to(self, other: "ReferenceBuffer") -> bool:
        if not self.frame.identical_to(other.frame) or self.frame.frame_index != other.frame.frame_index:
            return False
        if self.layout != other.layout or not np.array_equal(self.bbox, other.bbox):
            return False
        if (self.mlps is None) != (other.mlps is None):
            return False
        if self.mlps is not None:
            return all(torch.equal(a, b) for a, b in zip(self.mlps.tensors().values(),
                                                         other.mlps.tensors().values()))
        return True


def reconstruct_frame(buffer: ReferenceBuffer, grid: MotionGrid, delta: GaussianFrameSet,
                      frame_index: int) -> GaussianFrameSet:
    """Move the previous frame with the decoded motion field and append the compensated set."""
    if buffer.mlps is None:
        raise ValueError("motion MLPs are not available")
    moved = apply_motion(buffer.frame, grid, buffer.mlps, frame_index)
    out = moved.concat(delta.copy(frame_index)) if len(delta) else moved
    out.frame_index = frame_index
    return out


# ---------------------------------------------------------------------------
# Attribute packing
# ---------------------------------------------------------------------------


def pack_attributes(frame: GaussianFrameSet) -> np.ndarray:
    return frame.attribute_matrix().astype(np.float32)


def unpack_attributes(values, sh: np.ndarray, sh_degree: int, frame_index: int) -> GaussianFrameSet:
    v = np.asarray(values, dtype=np.float32).astype(np.float64).reshape(-1)
    if len(v) % 11:
        raise bs.StreamFormatError("attribute block length is not a multiple of 11")
    m = v.reshape(-1, 11)
    if not np.isfinite(m).all():
        raise bs.StreamFormatError("non-finite attribute values")
    return GaussianFrameSet(m[:, 0:3], m[:, 3:7], m[:, 7:10], m[:, 10], sh, sh_degree, frame_index)


def _code_sh(frame: GaussianFrameSet, q: float):
    payload, table, header, deq = encode_tensor(frame.sh.reshape(-1), q)
    return payload, table, header, deq.reshape(frame.sh.shape)


def _coded_block(block_id: int, payload: bytes, table, header: TensorHeader) -> bs.CodedBlock:
    return bs.CodedBlock(block_id, header.q, header.offset, table, payload)


def _decode_coded(block: bs.CodedBlock, count: int) -> np.ndarray:
    try:
        return decode_tensor(block.payload, block.table, TensorHeader(block.q, block.offset, count))
    except ValueError as exc:
        raise bs.StreamFormatError(f"block 0x{block.block_id:02x}: {exc}") from exc


def quantized_frame(frame: GaussianFrameSet, q_sh: float):
    """The frame as the decoder will see it, plus its coded blocks (attrs, SH)."""
    attrs = pack_attributes(frame)
    payload, table, header, sh_hat = _code_sh(frame, q_sh)
    rec = unpack_attributes(attrs, sh_hat, frame.sh_degree, frame.frame_index)
    return rec, attrs, (payload, table, header)


# ---------------------------------------------------------------------------
# Keyframe
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    frame: GaussianFrameSet
    history: list = field(default_factory=list)


def _frame_params(frame: GaussianFrameSet) -> dict:
    return {
        "centers": torch.tensor(frame.centers, requires_grad=True),
        "rotations": torch.tensor(frame.rotations, requires_grad=True),
        "log_scales": torch.tensor(frame.log_scales, requires_grad=True),
        "opacity_logits": torch.tensor(frame.opacity_logits, requires_grad=True),
        "sh": torch.tensor(frame.sh, requires_grad=True),
    }


def _add_frame_groups(opt: Adam, params: dict, cfg: TrainConfig, extent: float, prefix: str = "") -> None:
    opt.add(prefix + "centers", params["centers"], cfg.lr_center * extent)
    opt.add(prefix + "rotations", params["rotations"], cfg.lr_rotation, quaternion=True)
    opt.add(prefix + "log_scales", params["log_scales"], cfg.lr_scale)
    opt.add(prefix + "opacity_logits", params["opacity_logits"], cfg.lr_opacity)
    opt.add(prefix + "sh", params["sh"], cfg.lr_sh)


def _add_model_groups(opt: Adam, model: FactorizedEntropyModel, lr: float, prefix: str) -> None:
    for name, t in model.named_parameters().items():
        opt.add(prefix + name, t, lr)


def _params_to_frame(params: dict, sh_degree: int, frame_index: int) -> GaussianFrameSet:
    with torch.no_grad():
        return GaussianFrameSet(
            params["centers"].numpy().copy(),
            quat_normalize(params["rotations"]).numpy().copy(),
            params["log_scales"].numpy().copy(),
            params["opacity_logits"].numpy().copy(),
            params["sh"].numpy().copy(),
            sh_degree,
            frame_index,
        )


def keyframe_loss(params: dict, model: FactorizedEntropyModel, views, cfg: TrainConfig,
                  hard: bool = False, gen: torch.Generator | None = None) -> torch.Tensor:
    """Photometric loss over ``views`` plus lambda1 times the SH rate."""
    y = _quantize(params["sh"], cfg.q_sh, hard, gen)
    sh_hat = y / cfg.q_sh
    loss = 0.0
    for v in views:
        img, _ = render_tensors(params["centers"], params["rotations"], params["log_scales"],
                                params["opacity_logits"], sh_hat, cfg.sh_degree, v.camera, cfg.background)
        loss = loss + loss_color(img, v.image, cfg.lambda2)
    loss = loss / len(views)
    if cfg.lambda1 > 0:
        loss = loss + cfg.lambda1 * _sh_rate(y, model)
    return loss


def train_keyframe(views, init: GaussianFrameSet, cfg: TrainConfig, sh_model=None,
                   extent: float | None = None) -> tuple[TrainResult, FactorizedEntropyModel]:
    """Fit all primitive attributes of the first frame, one view per iteration."""
    if len(views) < 2:
        raise ValueError("keyframe training needs at least two views")
    if init.sh_degree != cfg.sh_degree:
        raise ValueError("initial frame SH degree differs from the configuration")
    extent = scene_extent([v.camera for v in views]) if extent is None else extent
    k = sh_coeff_count(cfg.sh_degree)
    model = sh_model or FactorizedEntropyModel(3 * k, seed=derive_seed(cfg.seed, 1, 0))
    params = _frame_params(init)
    opt = Adam()
    _add_frame_groups(opt, params, cfg, extent)
    if cfg.lambda1 > 0:
        _add_model_groups(opt, model, cfg.lr_entropy, "sh_model.")
    gen = _generator(cfg.seed, 1, 0)
    history = []
    for it in range(cfg.keyframe_iters):
        view = views[it % len(views)]
        loss = keyframe_loss(params, model, [view], cfg, _hard_phase(it, cfg.keyframe_iters, cfg), gen)
        _check_finite(loss, cfg, f"keyframe iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return TrainResult(_params_to_frame(params, cfg.sh_degree, 1), history), model


# ---------------------------------------------------------------------------
# Stage 1: motion grid
# ---------------------------------------------------------------------------


class Stage1Problem:
    """Stage-1 objective over the grid nodes the previous frame can reach.

    Primitive centres are fixed during the stage, so every trilinear lookup
    touches a known set of nodes. Only those are parameters; the others stay
    at exactly zero and contribute the expected rate of a noisy zero.
    """

    def __init__(self, prev: GaussianFrameSet, layout: GridLayout, bbox, mlps: MotionMlps,
                 grid_model: FactorizedEntropyModel, cfg: TrainConfig, train_mlps: bool):
        self.prev = prev
        self.layout = layout
        self.bbox = np.asarray(bbox, dtype=np.float64)
        self.cfg = cfg
        self.mlps = mlps
        self.model = grid_model
        self.train_mlps = train_mlps
        self.centers = torch.as_tensor(prev.centers)
        self.rotations = torch.as_tensor(prev.rotations)
        self.log_scales = torch.as_tensor(prev.log_scales)
        self.opacity_logits = torch.as_tensor(prev.opacity_logits)
        self.sh = torch.as_tensor(prev.sh)
        self.total_nodes = sum(c * n**3 for n, c in zip(layout.resolutions, layout.channels))

        unit = normalize_to_box(self.centers, self.bbox)
        sin_b, cos_b = positional_encode(unit, len(layout.resolutions))
        self.plan = []  # per level: (active ids, [(local ids, weights) for sin, cos])
        self.values = []
        for l, (n, c) in enumerate(zip(layout.resolutions, layout.channels)):
            lookups = [trilinear_corners(b[:, l], n) for b in (sin_b, cos_b)]
            active = torch.unique(torch.cat([ids.reshape(-1) for ids, _ in lookups]))
            local = [(torch.searchsorted(active, ids), w) for ids, w in lookups]
            self.plan.append((active, local))
            self.values.append(torch.zeros(c, len(active), dtype=torch.float64, requires_grad=True))
        self.total_channels = sum(layout.channels)
        width = max(len(a) for a, _ in self.plan)
        self.active_mask = torch.zeros(self.total_channels, width, dtype=torch.float64)
        self.inactive_counts = torch.zeros(self.total_channels, dtype=torch.float64)
        row = 0
        for (active, _), n, c in zip(self.plan, layout.resolutions, layout.channels):
            self.active_mask[row : row + c, : len(active)] = 1.0
            self.inactive_counts[row : row + c] = n**3 - len(active)
            row += c

    def parameters(self) -> dict:
        out = {f"grid{l}": v for l, v in enumerate(self.values)}
        if self.train_mlps:
            out.update({f"mlp.{k}": t for k, t in self.mlps.tensors().items()})
        if self.cfg.lambda1 > 0:
            out.update({f"grid_model.{k}": t for k, t in self.model.named_parameters().items()})
        return out

    def features(self, values) -> torch.Tensor:
        feats = []
        for (_, local), vals in zip(self.plan, values):
            for ids, w in local:
                feats.append((vals[:, ids] * w).sum(-1).T)
        return torch.cat(feats, dim=-1)

    def rate(self, scaled, hard: bool) -> torch.Tensor:
        """Mean bits over every grid node, evaluated in a single model call.

        Levels are padded to a common width and stacked by channel; extra
        columns hold the points at which an untouched (zero) node is scored.
        """
        width = max(y.shape[1] for y in scaled)
        if hard:
            zero_pts, zero_w = np.zeros(1), np.ones(1)
        else:
            x, w = _legendre(16)
            zero_pts, zero_w = 0.5 * x, 0.5 * w
        tail = torch.as_tensor(zero_pts).expand(self.total_channels, -1)
        body = torch.cat([torch.nn.functional.pad(y, (0, width - y.shape[1])) for y in scaled])
        bits = -torch.log2(self.model.likelihood(torch.cat([body, tail], dim=1), None, LIKELIHOOD_FLOOR))
        zero_bits = bits[:, width:] @ torch.as_tensor(zero_w)
        total = (bits[:, :width] * self.active_mask).sum() + (zero_bits * self.inactive_counts).sum()
        return total / self.total_nodes

    def transformed(self, values):
        dmu, dq = self.mlps.forward(self.features(values))
        return transform_tensors(self.centers, self.rotations, dmu, dq)

    def loss(self, views, hard: bool = False, gen: torch.Generator | None = None,
             mean2d_hook: list | None = None) -> torch.Tensor:
        q = self.cfg.q_grid
        scaled = [_quantize(v, q, hard, gen) for v in self.values]
        centers, rotations = self.transformed([y / q for y in scaled])
        loss = 0.0
        for v in views:
            img, _ = render_tensors(centers, rotations, self.log_scales, self.opacity_logits, self.sh,
                                    self.prev.sh_degree, v.camera, self.cfg.background, mean2d_hook)
            loss = loss + loss_color(img, v.image, self.cfg.lambda2)
        loss = loss / len(views)
        if self.cfg.lambda1 > 0:
            loss = loss + self.cfg.lambda1 * self.rate(scaled, hard)
        return loss

    def grid(self, quantized: bool = True) -> MotionGrid:
        """Full-size grid; with ``quantized`` the values sit on the 1/q lattice."""
        grid = MotionGrid.zeros(self.layout.resolutions, self.layout.channels, self.bbox)
        q = self.cfg.q_grid
        with torch.no_grad():
            for level, (active, _), vals in zip(grid.levels, self.plan, self.values):
                v = torch.floor(q * vals + 0.5) / q if quantized else vals
                level.reshape(level.shape[0], -1)[:, active] = v
        return grid


@dataclass
class Stage1Result:
    grid: MotionGrid  # trained values, before quantisation
    stats: comp.GradientStats
    history: list


def train_stage1(buffer: ReferenceBuffer, views, cfg: TrainConfig, grid_model: FactorizedEntropyModel,
                 frame_index: int, train_mlps: bool) -> Stage1Result:
    """Optimise the motion grid (and, on the first inter-frame, the MLPs)."""
    problem = Stage1Problem(buffer.frame, buffer.layout, buffer.bbox, buffer.mlps, grid_model, cfg, train_mlps)
    opt = Adam()
    for l, v in enumerate(problem.values):
        opt.add(f"grid{l}", v, cfg.lr_grid)
    if train_mlps:
        for k, t in buffer.mlps.tensors().items():
            t.requires_grad_(True)
            opt.add(f"mlp.{k}", t, cfg.lr_mlp)
    if cfg.lambda1 > 0:
        _add_model_groups(opt, grid_model, cfg.lr_entropy, "grid_model.")
    gen = _generator(cfg.seed, frame_index, 1)
    stats = comp.GradientStats.zeros(len(buffer.frame))
    history = []
    for it in range(cfg.stage1_iters):
        hook: list = []
        view = views[it % len(views)]
        loss = problem.loss([view], _hard_phase(it, cfg.stage1_iters, cfg), gen, hook)
        _check_finite(loss, cfg, f"stage 1 iteration {it} of frame {frame_index}")
        opt.zero_grad()
        loss.backward()
        if hook and hook[0].grad is not None:
            stats.add(torch.linalg.vector_norm(hook[0].grad, dim=-1).numpy())
        opt.step()
        history.append(float(loss.detach()))
    if train_mlps:
        for t in buffer.mlps.tensors().values():
            t.requires_grad_(False)
    return Stage1Result(problem.grid(quantized=False), stats, history)


# ---------------------------------------------------------------------------
# Stage 2: compensation
# ---------------------------------------------------------------------------


class Stage2Problem:
    """Stage-2 objective: frozen transformed frame plus trainable compensated set."""

    def __init__(self, transformed: GaussianFrameSet, delta: GaussianFrameSet,
                 sh_model: FactorizedEntropyModel, cfg: TrainConfig):
        self.fixed = {k: v.detach() for k, v in _frame_params(transformed).items()}
        self.params = _frame_params(delta)
        self.model = sh_model
        self.cfg = cfg
        self.sh_degree = transformed.sh_degree

    def parameters(self) -> dict:
        out = {f"delta.{k}": t for k, t in self.params.items()}
        if self.cfg.lambda1 > 0:
            out.update({f"sh_model.{k}": t for k, t in self.model.named_parameters().items()})
        return out

    def rate(self, y: torch.Tensor) -> torch.Tensor:
        return _sh_rate(y, self.model)

    def loss(self, views, hard: bool = False, gen: torch.Generator | None = None) -> torch.Tensor:
        y = _quantize(self.params["sh"], self.cfg.q_sh, hard, gen)
        merged = {k: torch.cat([self.fixed[k], self.params[k]]) for k in self.fixed}
        merged["sh"] = torch.cat([self.fixed["sh"], y / self.cfg.q_sh])
        loss = 0.0
        for v in views:
            img, _ = render_tensors(merged["centers"], merged["rotations"], merged["log_scales"],
                                    merged["opacity_logits"], merged["sh"], self.sh_degree, v.camera,
                                    self.cfg.background)
            loss = loss + loss_color(img, v.image, self.cfg.lambda2)
        loss = loss / len(views)
        if self.cfg.lambda1 > 0:
            loss = loss + self.cfg.lambda1 * self.rate(y)
        return loss


@dataclass
class Stage2Result:
    compensated: comp.CompensatedSet
    history: list


def plan_compensation(transformed: GaussianFrameSet, stats: comp.GradientStats, buffer: ReferenceBuffer,
                      grid: MotionGrid, cfg: TrainConfig, frame_index: int) -> comp.CompensatedSet:
    """Clone candidates selected from stage-1 statistics and the decoded motion."""
    prev = buffer.frame
    if len(prev) == 0:
        return comp.CompensatedSet.empty(prev.sh_degree, frame_index)
    sample = predict_motion(prev.centers, grid, buffer.mlps)
    grad_idx = comp.select_gradient_clones(stats, cfg.tau_g)
    motion_idx = comp.select_motion_clones(sample.delta_mu, sample.rotation, prev.log_scales,
                                           cfg.tau_mu, cfg.tau_r, cfg.scale_floor)
    budget = comp.clone_budget(len(prev), cfg.clone_fraction)
    g, m = comp.plan_clones(grad_idx, stats.values, motion_idx,
                            np.linalg.norm(sample.delta_mu, axis=1), budget)
    return comp.build_compensated(transformed, g, m, cfg.seed, frame_index)


def train_stage2(transformed: GaussianFrameSet, candidates: comp.CompensatedSet, views, cfg: TrainConfig,
                 sh_model: FactorizedEntropyModel, frame_index: int, extent: float) -> Stage2Result:
    """Refine the compensated Gaussians against the frozen transformed frame, then prune."""
    if len(candidates) == 0:
        return Stage2Result(candidates, [])
    problem = Stage2Problem(transformed, candidates.primitives, sh_model, cfg)
    opt = Adam()
    _add_frame_groups(opt, problem.params, cfg, extent, "delta.")
    if cfg.lambda1 > 0:
        _add_model_groups(opt, sh_model, cfg.lr_entropy, "sh_model.")
    gen = _generator(cfg.seed, frame_index, 2)
    history = []
    for it in range(cfg.stage2_iters):
        view = views[it % len(views)]
        loss = problem.loss([view], _hard_phase(it, cfg.stage2_iters, cfg), gen)
        _check_finite(loss, cfg, f"stage 2 iteration {it} of frame {frame_index}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    trained = _params_to_frame(problem.params, transformed.sh_degree, frame_index)
    result = comp.prune_low_opacity(comp.CompensatedSet(trained, list(candidates.provenance)),
                                    cfg.opacity_floor)
    if not compensation_pays_off(transformed, result.primitives, views, cfg, sh_model):
        result = comp.CompensatedSet.empty(transformed.sh_degree, frame_index)
    return Stage2Result(result, history)


def compensation_pays_off(transformed: GaussianFrameSet, delta: GaussianFrameSet, views, cfg: TrainConfig,
                          sh_model: FactorizedEntropyModel) -> bool:
    """Keep the compensated set only if it lowers the stage-2 objective over all views.

    Both sides are scored on hard-quantised values; the empty set costs no rate.
    """
    if len(delta) == 0:
        return False
    with torch.no_grad():
        base = Stage2Problem(transformed, GaussianFrameSet.empty(transformed.sh_degree), sh_model, cfg)
        with_delta = Stage2Problem(transformed, delta, sh_model, cfg)
        return float(with_delta.loss(views, hard=True)) < float(base.loss(views, hard=True))


# ---------------------------------------------------------------------------
# Frame coding
# ---------------------------------------------------------------------------


def encode_grid(grid: MotionGrid, q: float):
    """One coded block for the whole grid and the grid the decoder will rebuild.

    All levels share a single table: the value distribution barely differs
    between levels, and every extra table costs two bytes per symbol of span.
    """
    flat = np.concatenate([level.detach().numpy().reshape(-1) for level in grid.levels])
    payload, table, header, deq = encode_tensor(flat, q)
    return [_coded_block(bs.GRID, payload, table, header)], MotionGrid(_split_levels(deq, grid.shapes()),
                                                                        grid.bbox.copy())


def _split_levels(flat: np.ndarray, shapes) -> list:
    levels, pos = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        levels.append(torch.as_tensor(flat[pos : pos + size].reshape(shape)))
        pos += size
    return levels


def decode_grid(frame: bs.FrameBitstream, layout: GridLayout, bbox) -> MotionGrid:
    block = frame.require(bs.GRID)
    if not isinstance(block, bs.CodedBlock):
        raise bs.StreamFormatError("grid block is not coded")
    shapes = [(c, n, n, n) for n, c in zip(layout.resolutions, layout.channels)]
    flat = _decode_coded(block, sum(int(np.prod(s)) for s in shapes))
    return MotionGrid(_split_levels(flat, shapes), np.asarray(bbox, dtype=np.float64))


def encode_delta(delta: GaussianFrameSet, q_sh: float):
    if len(delta) == 0:
        return [], delta.copy()
    rec, attrs, (payload, table, header) = quantized_frame(delta, q_sh)
    return [bs.RawBlock(bs.DELTA_ATTRS, attrs), _coded_block(bs.DELTA_SH, payload, table, header)], rec


def _decode_frame_blocks(frame: bs.FrameBitstream, attrs_id: int, sh_id: int, sh_degree: int):
    attrs = frame.require(attrs_id)
    sh_block = frame.require(sh_id)
    if not isinstance(attrs, bs.RawBlock) or not isinstance(sh_block, bs.CodedBlock):
        raise bs.StreamFormatError("attribute/SH block kinds are wrong")
    if len(attrs.values) % 11:
        raise bs.StreamFormatError("attribute block length is not a multiple of 11")
    n = len(attrs.values) // 11
    k = sh_coeff_count(sh_degree)
    sh = _decode_coded(sh_block, n * k * 3).reshape(n, k, 3)
    return unpack_attributes(attrs.values, sh, sh_degree, frame.frame_index)


def decode_keyframe(frame: bs.FrameBitstream) -> ReferenceBuffer:
    if not frame.is_key:
        raise bs.StreamFormatError("expected a keyframe")
    layout = GridLayout.from_values(frame.require(bs.LAYOUT).values)
    rec = _decode_frame_blocks(frame, bs.KEY_ATTRS, bs.KEY_SH, layout.sh_degree)
    mlps = None
    mu, r = frame.block(bs.MLP_MU), frame.block(bs.MLP_R)
    if (mu is None) != (r is None):
        raise bs.StreamFormatError("keyframe carries only one motion MLP")
    if mu is not None:
        try:
            mlps = MotionMlps.unpack(mu.values, r.values, 2 * sum(layout.channels))
        except ValueError as exc:
            raise bs.StreamFormatError(str(exc)) from exc
    if len(rec) == 0:
        raise bs.StreamFormatError("keyframe has no primitives")
    return ReferenceBuffer(rec, layout, bounding_box(rec.centers), mlps)


def decode_interframe(frame: bs.FrameBitstream, buffer: ReferenceBuffer) -> GaussianFrameSet:
    if frame.is_key:
        raise bs.StreamFormatError("expected an inter-frame")
    if buffer.mlps is None:
        raise bs.StreamFormatError("keyframe lacks the motion MLPs needed by inter-frames")
    grid = decode_grid(frame, buffer.layout, buffer.bbox)
    if frame.empty_delta:
        if frame.block(bs.DELTA_ATTRS) is not None or frame.block(bs.DELTA_SH) is not None:
            raise bs.StreamFormatError("empty-delta frame carries compensation blocks")
        delta = GaussianFrameSet.empty(buffer.layout.sh_degree, frame.frame_index)
    else:
        delta = _decode_frame_blocks(frame, bs.DELTA_ATTRS, bs.DELTA_SH, buffer.layout.sh_degree)
    return reconstruct_frame(buffer, grid, delta, frame.frame_index)


class StreamDecoder:
    """Rebuilds frames from bitstreams alone."""

    def __init__(self):
        self.buffer: ReferenceBuffer | None = None

    def feed(self, frame: bs.FrameBitstream) -> GaussianFrameSet:
        if frame.is_key:
            self.buffer = decode_keyframe(frame)
            return self.buffer.frame
        if self.buffer is None:
            raise bs.StreamFormatError("inter-frame before any keyframe")
        if frame.frame_index <= self.buffer.frame.frame_index:
            raise bs.StreamFormatError("frame index does not increase")
        rec = decode_interframe(frame, self.buffer)
        self.buffer = dataclasses.replace(self.buffer, frame=rec)
        return rec


def decode_stream(frames) -> list[GaussianFrameSet]:
    dec = StreamDecoder()
    return [dec.feed(f) for f in frames]


@dataclass
class FrameReport:
    frame_index: int
    stage1_psnr: float | None = None
    psnr: float = float("nan")
    ssim: float = float("nan")
    n_primitives: int = 0
    n_compensated: int = 0
    byte_size: int = 0


class StreamEncoder:
    """Encoder with its own reference buffer built from quantised values only."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.frames: list[bs.FrameBitstream] = []
        self.buffer: ReferenceBuffer | None = None
        self.sh_model: FactorizedEntropyModel | None = None
        self.grid_model = FactorizedEntropyModel(sum(cfg.channels), seed=derive_seed(cfg.seed, 0, 1))
        self.extent: float | None = None
        self.reports: list[FrameReport] = []

    def encode_keyframe(self, views, init: GaussianFrameSet) -> bs.FrameBitstream:
        cfg = self.cfg
        self.extent = scene_extent([v.camera for v in views])
        result, self.sh_model = train_keyframe(views, init.copy(1), cfg, extent=self.extent)
        layout = GridLayout.from_config(cfg)
        rec, attrs, (payload, table, header) = quantized_frame(result.frame, cfg.q_sh)
        blocks = [
            bs.RawBlock(bs.LAYOUT, layout.values()),
            bs.RawBlock(bs.KEY_ATTRS, attrs),
            _coded_block(bs.KEY_SH, payload, table, header),
        ]
        frame = bs.FrameBitstream(bs.KEYFRAME, 1, blocks)
        self.buffer = ReferenceBuffer(rec, layout, bounding_box(rec.centers), None)
        self.frames = [frame]
        p, s = evaluate_views(rec, views, cfg.background)
        self.reports = [FrameReport(1, None, p, s, len(rec), 0, frame.byte_size())]
        return frame

    def _attach_mlps(self, mlps: MotionMlps) -> None:
        key = self.frames[0]
        key.blocks = [b for b in key.blocks if b.block_id not in (bs.MLP_MU, bs.MLP_R)]
        key.blocks += [bs.RawBlock(bs.MLP_MU, mlps.pack("mu")), bs.RawBlock(bs.MLP_R, mlps.pack("r"))]
        self.reports[0].byte_size = key.byte_size()

    def encode_frame(self, views) -> bs.FrameBitstream:
        if self.buffer is None:
            raise RuntimeError("encode a keyframe first")
        cfg = self.cfg
        t = self.buffer.frame.frame_index + 1
        first_inter = self.buffer.mlps is None
        if first_inter:
            self.buffer.mlps = MotionMlps.init(derive_seed(cfg.seed, 0, 2), cfg.feature_width)
        s1 = train_stage1(self.buffer, views, cfg, self.grid_model, t, train_mlps=first_inter)
        if first_inter:
            self.buffer.mlps = self.buffer.mlps.rounded_f32()
            self._attach_mlps(self.buffer.mlps)

        grid_blocks, grid_hat = encode_grid(s1.grid, cfg.q_grid)
        transformed = apply_motion(self.buffer.frame, grid_hat, self.buffer.mlps, t)
        stage1_psnr = evaluate_views(transformed, views, cfg.background)[0]
        candidates = plan_compensation(transformed, s1.stats, self.buffer, grid_hat, cfg, t)
        s2 = train_stage2(transformed, candidates, views, cfg, self.sh_model, t, self.extent)
        delta_blocks, delta_hat = encode_delta(s2.compensated.primitives, cfg.q_sh)

        frame = bs.FrameBitstream(bs.INTERFRAME, t, grid_blocks + delta_blocks, empty_delta=not delta_blocks)
        rec = reconstruct_frame(self.buffer, grid_hat, delta_hat, t)
        self.buffer = dataclasses.replace(self.buffer, frame=rec)
        self.frames.append(frame)
        p, s = evaluate_views(rec, views, cfg.background)
        self.reports.append(FrameReport(t, stage1_psnr, p, s, len(rec), len(delta_hat), frame.byte_size()))
        log.info("frame %d: %d bytes, psnr %.2f (stage 1 %.2f), %d compensated",
                 t, frame.byte_size(), p, stage1_psnr, len(delta_hat))
        return frame

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict:
        if self.buffer is None:
            raise RuntimeError("nothing to save before the keyframe")
        f = self.buffer.frame
        out = {
            "config": np.array(self.cfg.to_json()),
            "extent": np.array(self.extent),
            "frame_index": np.array(f.frame_index),
            "centers": f.centers, "rotations": f.rotations, "log_scales": f.log_scales,
            "opacity_logits": f.opacity_logits, "sh": f.sh,
            "layout": self.buffer.layout.values(), "bbox": self.buffer.bbox,
        }
        if self.buffer.mlps is not None:
            out.update({f"mlp.{k}": t.numpy() for k, t in self.buffer.mlps.tensors().items()})
        for prefix, model in (("sh_model.", self.sh_model), ("grid_model.", self.grid_model)):
            out.update({prefix + k: t.detach().numpy() for k, t in model.named_parameters().items()})
        return out

    def save_state(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.state_dict())

    @classmethod
    def load_state(cls, path, frames) -> "StreamEncoder":
        with np.load(path) as data:
            d = {k: data[k] for k in data.files}
        cfg = TrainConfig.from_mapping(json.loads(str(d["config"])))
        enc = cls(cfg)
        enc.extent = float(d["extent"])
        layout = GridLayout.from_values(d["layout"])
        frame = GaussianFrameSet(d["centers"], d["rotations"], d["log_scales"], d["opacity_logits"], d["sh"],
                                 layout.sh_degree, int(d["frame_index"]))
        mlps = None
        if "mlp.mu_w1" in d:
            mlps = MotionMlps(*(torch.as_tensor(d[f"mlp.{k}"]) for k in MotionMlps.NAMES))
        enc.buffer = ReferenceBuffer(frame, layout, d["bbox"], mlps)
        enc.sh_model = FactorizedEntropyModel(3 * sh_coeff_count(layout.sh_degree))
        for prefix, model in (("sh_model.", enc.sh_model), ("grid_model.", enc.grid_model)):
            with torch.no_grad():
                for k, t in model.named_parameters().items():
                    t.copy_(torch.as_tensor(d[prefix + k]))
        enc.frames = list(frames)
        if not enc.frames or enc.frames[-1].frame_index != frame.frame_index:
            raise ValueError("encoder state does not match the last frame of the stream")
        enc.reports = [FrameReport(f.frame_index, byte_size=f.byte_size()) for f in enc.frames]
        return enc


def encode_sequence(views_per_frame, init: GaussianFrameSet, cfg: TrainConfig) -> StreamEncoder:
    """Keyframe plus inter-frames for every entry of ``views_per_frame``."""
    enc = StreamEncoder(cfg)
    enc.encode_keyframe(views_per_frame[0], init)
    for views in views_per_frame[1:]:
        enc.encode_frame(views)
    return enc
