"""Gaussian primitives, frame sets, cameras and the geometric/colour algebra."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
MAX_SH_DEGREE = 3

RAW_MAGIC = b"4DGS"


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z), Hamilton convention
# ---------------------------------------------------------------------------


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrix of a unit quaternion; batched over leading dims."""
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def rotation_angle(q: torch.Tensor) -> torch.Tensor:
    """Angle of the rotation represented by a unit quaternion, 2*acos(|w|)."""
    w = torch.clamp(q[..., 0].abs(), max=1.0)
    return 2.0 * torch.acos(w)


def compose_rotation(delta_q, base_q) -> torch.Tensor:
    """Return normalize(delta_q * base_q); the delta is applied on the left."""
    delta_q = _as_tensor(delta_q)
    base_q = _as_tensor(base_q)
    norms = torch.linalg.vector_norm(delta_q, dim=-1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm delta quaternion")
    return quat_normalize(quat_multiply(delta_q, base_q))


# ---------------------------------------------------------------------------
# Covariance and colour
# ---------------------------------------------------------------------------


def covariance_of(rotation, log_scale) -> torch.Tensor:
    """3D covariance R diag(exp(s))^2 R^T for unit quaternions and log-scales.

    Accepts single primitives or batches with matching leading dimensions.
    """
    rotation = _as_tensor(rotation)
    log_scale = _as_tensor(log_scale)
    if not (torch.isfinite(rotation).all() and torch.isfinite(log_scale).all()):
        raise ValueError("non-finite rotation or log-scale")
    scale = torch.exp(log_scale)
    if not torch.isfinite(scale).all():
        raise ValueError("log-scale overflows exp")
    m = quat_to_matrix(rotation) * scale.unsqueeze(-2)
    return m @ m.transpose(-1, -2)


def sh_basis(degree: int, dirs: torch.Tensor) -> torch.Tensor:
    """Real SH basis values (..., (degree+1)^2) for unit directions (..., 3)."""
    x, y, z = dirs.unbind(-1)
    out = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return torch.stack(out, dim=-1)


def eval_sh(sh, degree: int, view_dir) -> torch.Tensor:
    """View-dependent RGB from SH coefficients shaped (..., K, 3).

    Colour is clamp(0.5 + sum_lm f_lm Y_lm(d), 0, 1) per channel.
    """
    sh = _as_tensor(sh)
    view_dir = _as_tensor(view_dir)
    if degree < 0 or degree > MAX_SH_DEGREE:
        raise ValueError(f"SH degree {degree} outside [0, {MAX_SH_DEGREE}]")
    k = sh_coeff_count(degree)
    if sh.shape[-2] < k:
        raise ValueError(f"degree {degree} needs {k} coefficients, have {sh.shape[-2]}")
    basis = sh_basis(degree, view_dir)
    rgb = (basis.unsqueeze(-1) * sh[..., :k, :]).sum(-2)
    return torch.clamp(rgb + 0.5, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass
class GaussianPrimitive:
    center: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray  # ((degree+1)^2, 3)

    @property
    def opacity(self) -> float:
        return 1.0 / (1.0 + math.exp(-self.opacity_logit))


@dataclass
class GaussianFrameSet:
    """Struct-of-arrays collection of primitives for one frame.

    Arrays are float64: centers (N,3), rotations (N,4), log_scales (N,3),
    opacity_logits (N,), sh (N,K,3).
    """

    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    sh_degree: int = 1
    frame_index: int = 1

    def __post_init__(self):
        n = len(self.centers)
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        k = sh_coeff_count(self.sh_degree)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, k, 3)
        if self.frame_index < 1:
            raise ValueError("frame_index must be >= 1")

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    @classmethod
    def empty(cls, sh_degree: int = 1, frame_index: int = 1) -> "GaussianFrameSet":
        k = sh_coeff_count(sh_degree)
        return cls(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
            np.zeros((0, k, 3)), sh_degree, frame_index,
        )

    @classmethod
    def from_primitives(cls, prims, sh_degree: int = 1, frame_index: int = 1):
        prims = list(prims)
        if not prims:
            return cls.empty(sh_degree, frame_index)
        return cls(
            np.stack([p.center for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.stack([p.sh for p in prims]),
            sh_degree,
            frame_index,
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.centers[i].copy(),
            self.rotations[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_logits[i]),
            self.sh[i].copy(),
        )

    def select(self, idx) -> "GaussianFrameSet":
        idx = np.asarray(idx, dtype=np.int64)
        return GaussianFrameSet(
            self.centers[idx], self.rotations[idx], self.log_scales[idx],
            self.opacity_logits[idx], self.sh[idx], self.sh_degree, self.frame_index,
        )

    def concat(self, other: "GaussianFrameSet") -> "GaussianFrameSet":
        if other.sh_degree != self.sh_degree:
            raise ValueError("SH degree mismatch")
        return GaussianFrameSet(
            np.concatenate([self.centers, other.centers]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.sh, other.sh]),
            self.sh_degree,
            self.frame_index,
        )

    def copy(self, frame_index: int | None = None) -> "GaussianFrameSet":
        return GaussianFrameSet(
            self.centers.copy(), self.rotations.copy(), self.log_scales.copy(),
            self.opacity_logits.copy(), self.sh.copy(), self.sh_degree,
            self.frame_index if frame_index is None else frame_index,
        )

    def attribute_matrix(self) -> np.ndarray:
        """Non-SH attributes as (N, 11): center, rotation, log-scale, opacity logit."""
        return np.concatenate(
            [self.centers, self.rotations, self.log_scales, self.opacity_logits[:, None]],
            axis=1,
        )

    def identical_to(self, other: "GaussianFrameSet") -> bool:
        """Bit-exact comparison of every attribute array."""
        return (
            self.sh_degree == other.sh_degree
            and len(self) == len(other)
            and all(
                np.array_equal(a, b)
                for a, b in zip(
                    (self.centers, self.rotations, self.log_scales, self.opacity_logits, self.sh),
                    (other.centers, other.rotations, other.log_scales, other.opacity_logits, other.sh),
                )
            )
        )


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # (3, 4)
    width: int
    height: int
    name: str = field(default="", compare=False)

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(3, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        r = self.world_to_camera[:, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:, 3]

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, name=""):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        t = -r @ eye
        return cls(fx, fy, width / 2.0, height / 2.0, np.concatenate([r, t[:, None]], 1),
                   width, height, name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "world_to_camera": self.world_to_camera.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            np.asarray(d["world_to_camera"], dtype=np.float64),
            int(d["width"]), int(d["height"]), d.get("name", ""),
        )


def save_cameras(path, cameras) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=2))


def load_cameras(path) -> list[Camera]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [Camera.from_dict(d) for d in data]


# ---------------------------------------------------------------------------
# .4dgs raw frame format
# ---------------------------------------------------------------------------


def encode_raw_frame(frame: GaussianFrameSet) -> bytes:
    """Little-endian: magic, u32 count, u8 sh_degree, then per-primitive f32
    center(3) rotation(4) log_scale(3) opacity_logit(1) sh(K*3)."""
    n = len(frame)
    rows = np.concatenate([frame.attribute_matrix(), frame.sh.reshape(n, -1)], axis=1)
    return (
        RAW_MAGIC
        + struct.pack("<IB", n, frame.sh_degree)
        + rows.astype("<f4").tobytes()
    )


def decode_raw_frame(data: bytes, frame_index: int = 1) -> GaussianFrameSet:
    if data[:4] != RAW_MAGIC:
        raise ValueError("bad .4dgs magic")
    if len(data) < 9:
        raise ValueError("truncated .4dgs header")
    n, degree = struct.unpack_from("<IB", data, 4)
    if degree > MAX_SH_DEGREE:
        raise ValueError(f"unsupported SH degree {degree}")
    k = sh_coeff_count(degree)
    width = 11 + 3 * k
    body = data[9:]
    if len(body) != 4 * n * width:
        raise ValueError("truncated or oversized .4dgs body")
    rows = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(n, width)
    return GaussianFrameSet(
        rows[:, 0:3], rows[:, 3:7], rows[:, 7:10], rows[:, 10], rows[:, 11:].reshape(n, k, 3),
        degree, frame_index,
    )


def save_raw_frame(path, frame: GaussianFrameSet) -> None:
    Path(path).write_bytes(encode_raw_frame(frame))


def load_raw_frame(path, frame_index: int = 1) -> GaussianFrameSet:
    return decode_raw_frame(Path(path).read_bytes(), frame_index)
