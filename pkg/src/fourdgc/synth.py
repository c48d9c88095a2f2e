"""Seeded synthetic multi-view scenes with scripted rigid motion and births."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .gaussians import (
    Camera,
    GaussianFrameSet,
    load_cameras,
    load_raw_frame,
    quat_from_axis_angle,
    quat_multiply,
    save_cameras,
    save_raw_frame,
    sh_coeff_count,
)
from .images import decode_ppm, encode_ppm, read_ppm
from .pipeline import View
from .render import render_image

MOTION_KINDS = ("translate", "rotate", "mixed", "birth")
TEST_VIEW = "test"

RING_RADIUS = 4.0
RING_HEIGHT = 1.2
FOCAL = 90.0
TRANSLATION = np.array([0.04, 0.0, 0.02])
SPIN = math.radians(4.0)  # per frame, about the vertical axis


@dataclass
class SyntheticScene:
    frames: list  # ground-truth GaussianFrameSet per frame
    cameras: list  # training cameras
    test_camera: Camera
    images: list  # per frame: list of training images (8-bit quantised floats)
    test_images: list  # per frame: held-out image
    motion_kind: str
    seed: int
    birth_frame: int

    def views(self, t: int) -> list[View]:
        """Training views of frame ``t`` (1-based)."""
        return [View(c, img) for c, img in zip(self.cameras, self.images[t - 1])]

    def test_view(self, t: int) -> View:
        return View(self.test_camera, self.test_images[t - 1])

    def views_per_frame(self) -> list:
        return [self.views(t) for t in range(1, len(self.frames) + 1)]

    def initial_guess(self, noise: float = 0.03) -> GaussianFrameSet:
        """Ground truth of frame 1 with seeded perturbations, as the keyframe starting point."""
        return perturbed(self.frames[0], self.seed, noise)


def perturbed(frame: GaussianFrameSet, seed: int, noise: float = 0.03) -> GaussianFrameSet:
    rng = np.random.default_rng([seed, 7])
    n = len(frame)
    rot = frame.rotations + rng.normal(0.0, noise, (n, 4))
    return GaussianFrameSet(
        frame.centers + rng.normal(0.0, noise, (n, 3)),
        rot / np.linalg.norm(rot, axis=1, keepdims=True),
        frame.log_scales + rng.normal(0.0, 3 * noise, (n, 3)),
        frame.opacity_logits + rng.normal(0.0, 3 * noise, n),
        frame.sh + rng.normal(0.0, 3 * noise, frame.sh.shape),
        frame.sh_degree,
        1,
    )


def random_init(cameras, n: int, seed: int, sh_degree: int = 1) -> GaussianFrameSet:
    """Random primitives in a cube around the point the cameras look at."""
    # least-squares point closest to every optical axis
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cameras:
        d = cam.rotation[2]
        p = np.eye(3) - np.outer(d, d)
        a += p
        b += p @ cam.position
    target = np.linalg.lstsq(a, b, rcond=None)[0]
    radius = np.mean([np.linalg.norm(c.position - target) for c in cameras])
    rng = np.random.default_rng([seed, 11])
    frame = _random_primitives(rng, n, sh_degree)
    frame.centers = target + frame.centers * (0.25 * radius / 0.6)
    frame.sh[:, 1:, :] = 0.0
    frame.sh[:, 0, :] = 0.0
    return frame


def camera_ring(n_views: int, width: int = 64, height: int = 64, offset: float = 0.0) -> list[Camera]:
    cams = []
    for i in range(n_views):
        a = 2.0 * math.pi * (i + offset) / n_views
        eye = (RING_RADIUS * math.cos(a), RING_HEIGHT, RING_RADIUS * math.sin(a))
        cams.append(Camera.look_at(eye, (0, 0, 0), (0, 1, 0), FOCAL, FOCAL, width, height, name=f"view{i:02d}"))
    return cams


def _random_primitives(rng: np.random.Generator, n: int, sh_degree: int) -> GaussianFrameSet:
    k = sh_coeff_count(sh_degree)
    centers = rng.uniform(-0.6, 0.6, (n, 3))
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(0.08, 0.22, (n, 3)))
    opacity = rng.uniform(0.6, 0.9, n)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = rng.uniform(-1.4, 1.4, (n, 3))
    if k > 1:
        sh[:, 1:, :] = rng.normal(0.0, 0.15, (n, k - 1, 3))
    return GaussianFrameSet(centers, rot, log_scales, np.log(opacity / (1 - opacity)), sh, sh_degree, 1)


def _spin(frame: GaussianFrameSet, angle: float, pivot: np.ndarray) -> GaussianFrameSet:
    q = quat_from_axis_angle((0.0, 1.0, 0.0), angle)
    c, s = math.cos(angle), math.sin(angle)
    # rotation about +y matching the quaternion above
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    out = frame.copy()
    out.centers = (frame.centers - pivot) @ rot.T + pivot
    qs = quat_multiply(torch.as_tensor(np.broadcast_to(q, frame.rotations.shape).copy()),
                       torch.as_tensor(frame.rotations)).numpy()
    out.rotations = qs / np.linalg.norm(qs, axis=1, keepdims=True)
    return out


def _newborn(rng: np.random.Generator, frame: GaussianFrameSet) -> GaussianFrameSet:
    """A newly visible part of an existing primitive's object: same colour, placed beside it."""
    j = int(rng.integers(len(frame)))
    parent = frame.select([j])
    scale = float(np.exp(parent.log_scales[0]).max())
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    child = parent.copy()
    child.centers = parent.centers + 1.2 * scale * direction
    child.log_scales = parent.log_scales - 0.3
    child.sh = parent.sh.copy()
    child.opacity_logits = np.array([2.0])
    return child


def synth_scene(seed: int, n_frames: int, n_gaussians: int, n_views: int, motion_kind: str,
                sh_degree: int = 1, width: int = 64, height: int = 64) -> SyntheticScene:
    if n_frames < 2:
        raise ValueError("need at least two frames")
    if n_views < 2:
        raise ValueError("need at least two views")
    if n_gaussians < 4:
        raise ValueError("need at least four Gaussians")
    if motion_kind not in MOTION_KINDS:
        raise ValueError(f"motion kind must be one of {', '.join(MOTION_KINDS)}")
    rng = np.random.default_rng([seed, n_gaussians])
    first = _random_primitives(rng, n_gaussians, sh_degree)
    pivot = first.centers.mean(axis=0)
    # every scene gains one primitive so compensation always has work to do
    birth_frame = min(3, n_frames)

    frames = [first]
    for t in range(2, n_frames + 1):
        prev = frames[-1]
        cur = prev.copy(t)
        if motion_kind in ("translate", "mixed", "birth"):
            step = TRANSLATION if motion_kind != "birth" else 0.5 * TRANSLATION
            cur.centers = prev.centers + step
        if motion_kind in ("rotate", "mixed"):
            cur = _spin(cur, SPIN, pivot + (t - 1) * (TRANSLATION if motion_kind == "mixed" else 0))
        if t == birth_frame:
            cur = cur.concat(_newborn(rng, cur))
        cur.frame_index = t
        frames.append(cur)

    cameras = camera_ring(n_views, width, height)
    test_cam = camera_ring(n_views, width, height, offset=0.5)[0]
    test_cam.name = TEST_VIEW

    def shoot(frame, cam):
        # images travel as 8-bit PPM; supervise with exactly what is stored
        return decode_ppm(encode_ppm(render_image(frame, cam)))

    images = [[shoot(f, c) for c in cameras] for f in frames]
    test_images = [shoot(f, test_cam) for f in frames]
    return SyntheticScene(frames, cameras, test_cam, images, test_images, motion_kind, seed, birth_frame)


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------


def frame_dir(root, t: int) -> Path:
    return Path(root) / f"frame_{t:04d}"


def write_scene(scene: SyntheticScene, root) -> None:
    """``cameras.json``, ``scene.json``, ``frame_XXXX/<camera>.ppm`` and ground-truth ``.4dgs`` files."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_cameras(root / "cameras.json", [*scene.cameras, scene.test_camera])
    meta = {
        "seed": scene.seed,
        "frames": len(scene.frames),
        "motion": scene.motion_kind,
        "birth_frame": scene.birth_frame,
        "gaussians": [len(f) for f in scene.frames],
    }
    (root / "scene.json").write_text(json.dumps(meta, indent=2) + "\n")
    for t, frame in enumerate(scene.frames, start=1):
        d = frame_dir(root, t)
        d.mkdir(exist_ok=True)
        for cam, img in zip(scene.cameras, scene.images[t - 1]):
            (d / f"{cam.name}.ppm").write_bytes(encode_ppm(img))
        (d / f"{TEST_VIEW}.ppm").write_bytes(encode_ppm(scene.test_images[t - 1]))
        save_raw_frame(d / "truth.4dgs", frame)


def load_views(frame_directory, cameras) -> tuple[list[View], View | None]:
    """Training views and the held-out view (if present) for one frame directory."""
    d = Path(frame_directory)
    train, test = [], None
    for cam in cameras:
        path = d / f"{cam.name}.ppm"
        if not path.exists():
            continue
        view = View(cam, read_ppm(path))
        if cam.name == TEST_VIEW:
            test = view
        else:
            train.append(view)
    if not train:
        raise FileNotFoundError(f"no training images for the given cameras in {d}")
    return train, test


def load_truth(frame_directory, t: int) -> GaussianFrameSet:
    return load_raw_frame(Path(frame_directory) / "truth.4dgs", t)


def scene_cameras(root) -> list[Camera]:
    return load_cameras(Path(root) / "cameras.json")
