"""Differentiable pinhole splatting renderer and the photometric loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from numba import njit

from .gaussians import Camera, GaussianFrameSet, GaussianPrimitive, eval_sh, quat_normalize, quat_to_matrix
from .metrics import ssim_tensor

NEAR_PLANE = 0.01
LOW_PASS = 0.3
MAX_ALPHA = 0.99
MIN_ALPHA = 1.0 / 255.0
MIN_TRANSMITTANCE = 1e-4
MAX_CONDITION = 1e12


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    base_opacity: float


@dataclass
class RenderedImage:
    pixels: np.ndarray  # (H, W, 3)
    transmittance: np.ndarray  # (H, W)


def _camera_tensors(cam: Camera):
    r = torch.as_tensor(cam.rotation, dtype=torch.float64)
    t = torch.as_tensor(cam.translation, dtype=torch.float64)
    return r, t


def project_tensors(centers, rotations, log_scales, cam: Camera):
    """Batched projection. Returns mean2d (N,2), cov2d (N,2,2), depth (N,), visible (N,)."""
    r, t = _camera_tensors(cam)
    p = centers @ r.T + t
    z = p[:, 2]
    visible = z > NEAR_PLANE
    zs = torch.where(visible, z, torch.ones_like(z))
    x, y = p[:, 0], p[:, 1]
    mean2d = torch.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], dim=-1)
    zeros = torch.zeros_like(zs)
    jac = torch.stack(
        [
            torch.stack([cam.fx / zs, zeros, -cam.fx * x / zs**2], -1),
            torch.stack([zeros, cam.fy / zs, -cam.fy * y / zs**2], -1),
        ],
        dim=-2,
    )
    rot = quat_to_matrix(quat_normalize(rotations))
    m = rot * torch.exp(log_scales).unsqueeze(-2)
    cov3d = m @ m.transpose(-1, -2)
    jw = jac @ r
    cov2d = jw @ cov3d @ jw.transpose(-1, -2) + LOW_PASS * torch.eye(2, dtype=centers.dtype)
    return mean2d, cov2d, z, visible


def project_gaussian(g: GaussianPrimitive, cam: Camera, sh_degree: int = 1) -> Splat2D | None:
    """Project one primitive; ``None`` when it lies on or behind the near plane."""
    with torch.no_grad():
        c = torch.as_tensor(g.center, dtype=torch.float64)[None]
        mean2d, cov2d, z, visible = project_tensors(
            c,
            torch.as_tensor(g.rotation, dtype=torch.float64)[None],
            torch.as_tensor(g.log_scale, dtype=torch.float64)[None],
            cam,
        )
        if not bool(visible[0]):
            return None
        view = c[0] - torch.as_tensor(cam.position)
        view = view / torch.linalg.vector_norm(view)
        color = eval_sh(torch.as_tensor(g.sh)[None], sh_degree, view[None])[0]
    return Splat2D(mean2d[0].numpy(), cov2d[0].numpy(), float(z[0]), color.numpy(), g.opacity)


def composite_pixel(splats: Sequence[Splat2D], pixel, background) -> np.ndarray:
    """Front-to-back alpha blending of depth-sorted splats at one pixel."""
    pixel = np.asarray(pixel, dtype=np.float64)
    out = np.zeros(3)
    trans = 1.0
    for s in splats:
        if trans < MIN_TRANSMITTANCE:
            break
        cov = np.asarray(s.cov2d, dtype=np.float64)
        eig = np.linalg.eigvalsh(cov)
        if eig[0] <= 0 or eig[1] / eig[0] > MAX_CONDITION:
            continue
        d = pixel - s.mean2d
        power = -0.5 * d @ np.linalg.solve(cov, d)
        alpha = min(MAX_ALPHA, s.base_opacity * np.exp(power))
        if alpha < MIN_ALPHA:
            continue
        out += np.asarray(s.color) * alpha * trans
        trans *= 1.0 - alpha
    return out + np.asarray(background, dtype=np.float64) * trans


@njit(cache=True)
def _alpha(means, conics, opacity, i, px, py):
    dx = px - means[i, 0]
    dy = py - means[i, 1]
    power = -0.5 * (conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy)
    g = np.exp(power)
    a = opacity[i] * g
    clamped = a > MAX_ALPHA
    if clamped:
        a = MAX_ALPHA
    return a, g, dx, dy, clamped


@njit(cache=True)
def _composite_forward(means, conics, opacity, colors, bg, width, height):
    n = means.shape[0]
    img = np.empty((width * height, 3))
    trans_out = np.empty(width * height)
    for p in range(width * height):
        px = float(p % width)
        py = float(p // width)
        t = 1.0
        r0 = 0.0
        r1 = 0.0
        r2 = 0.0
        for i in range(n):
            if t < MIN_TRANSMITTANCE:
                break
            a, g, dx, dy, clamped = _alpha(means, conics, opacity, i, px, py)
            if a < MIN_ALPHA:
                continue
            wgt = a * t
            r0 += colors[i, 0] * wgt
            r1 += colors[i, 1] * wgt
            r2 += colors[i, 2] * wgt
            t *= 1.0 - a
        img[p, 0] = r0 + bg[0] * t
        img[p, 1] = r1 + bg[1] * t
        img[p, 2] = r2 + bg[2] * t
        trans_out[p] = t
    return img, trans_out


@njit(cache=True)
def _composite_backward(means, conics, opacity, colors, bg, width, height, grad_img):
    n = means.shape[0]
    g_means = np.zeros((n, 2))
    g_conics = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_colors = np.zeros((n, 3))
    t_before = np.empty(n)
    alphas = np.empty(n)
    used = np.zeros(n, dtype=np.bool_)
    for p in range(width * height):
        px = float(p % width)
        py = float(p // width)
        gr0 = grad_img[p, 0]
        gr1 = grad_img[p, 1]
        gr2 = grad_img[p, 2]
        # replay the forward decisions for this pixel
        t = 1.0
        for i in range(n):
            used[i] = False
        for i in range(n):
            if t < MIN_TRANSMITTANCE:
                break
            a, g, dx, dy, clamped = _alpha(means, conics, opacity, i, px, py)
            if a < MIN_ALPHA:
                continue
            used[i] = True
            alphas[i] = a
            t_before[i] = t
            t *= 1.0 - a
        # suffix colour behind splat i, starting from the background
        s0 = bg[0] * t
        s1 = bg[1] * t
        s2 = bg[2] * t
        for i in range(n - 1, -1, -1):
            if not used[i]:
                continue
            a = alphas[i]
            tb = t_before[i]
            g_colors[i, 0] += gr0 * a * tb
            g_colors[i, 1] += gr1 * a * tb
            g_colors[i, 2] += gr2 * a * tb
            inv = 1.0 / (1.0 - a)
            d_alpha = (
                gr0 * (colors[i, 0] * tb - s0 * inv)
                + gr1 * (colors[i, 1] * tb - s1 * inv)
                + gr2 * (colors[i, 2] * tb - s2 * inv)
            )
            s0 += colors[i, 0] * a * tb
            s1 += colors[i, 1] * a * tb
            s2 += colors[i, 2] * a * tb
            a_raw, g, dx, dy, clamped = _alpha(means, conics, opacity, i, px, py)
            if clamped:
                continue
            g_opacity[i] += d_alpha * g
            d_power = d_alpha * a
            g_means[i, 0] += d_power * (conics[i, 0] * dx + conics[i, 1] * dy)
            g_means[i, 1] += d_power * (conics[i, 1] * dx + conics[i, 2] * dy)
            g_conics[i, 0] += -0.5 * d_power * dx * dx
            g_conics[i, 1] += -d_power * dx * dy
            g_conics[i, 2] += -0.5 * d_power * dy * dy
    return g_means, g_conics, g_opacity, g_colors


class Composite(torch.autograd.Function):
    """Front-to-back compositing of depth-sorted splats over the pixel grid.

    Pixel (row r, column c) is sampled at image coordinates (c, r).
    """

    @staticmethod
    def forward(ctx, means, conics, opacity, colors, bg, width, height):
        args = [t.detach().numpy() for t in (means, conics, opacity, colors, bg)]
        img, trans = _composite_forward(*args, width, height)
        ctx.save_for_backward(means, conics, opacity, colors, bg)
        ctx.size = (width, height)
        return torch.from_numpy(img), torch.from_numpy(trans)

    @staticmethod
    def backward(ctx, grad_img, grad_trans):
        means, conics, opacity, colors, bg = ctx.saved_tensors
        width, height = ctx.size
        args = [t.detach().numpy() for t in (means, conics, opacity, colors, bg)]
        gm, gc, go, gcol = _composite_backward(
            *args, width, height, np.ascontiguousarray(grad_img.numpy())
        )
        return (torch.from_numpy(gm), torch.from_numpy(gc), torch.from_numpy(go),
                torch.from_numpy(gcol), None, None, None)


def render_tensors(
    centers: torch.Tensor,
    rotations: torch.Tensor,
    log_scales: torch.Tensor,
    opacity_logits: torch.Tensor,
    sh: torch.Tensor,
    sh_degree: int,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    mean2d_hook: list | None = None,
):
    """Differentiable forward pass. Returns (image (H,W,3), transmittance (H,W)).

    When ``mean2d_hook`` is a list, the full (N,2) projected-centre tensor is
    appended to it with ``retain_grad`` enabled so callers can read its
    gradient after ``backward``.
    """
    bg = torch.as_tensor(background, dtype=torch.float64)
    h, w = cam.height, cam.width
    n = centers.shape[0]
    if n == 0:
        img = bg.expand(h, w, 3).clone()
        return img, torch.ones(h, w, dtype=torch.float64)

    mean2d, cov2d, depth, visible = project_tensors(centers, rotations, log_scales, cam)
    if mean2d_hook is not None:
        mean2d.retain_grad()
        mean2d_hook.append(mean2d)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    half_tr = 0.5 * (a + c)
    disc = torch.sqrt(torch.clamp(half_tr**2 - det, min=0.0))
    lam_max, lam_min = half_tr + disc, half_tr - disc
    usable = visible & (lam_min > 0) & (lam_max < MAX_CONDITION * lam_min)

    idx = torch.nonzero(usable).reshape(-1)
    if idx.numel() == 0:
        img = bg.expand(h, w, 3).clone()
        return img, torch.ones(h, w, dtype=torch.float64)
    order = torch.sort(depth.detach()[idx], stable=True).indices
    idx = idx[order]

    cam_pos = torch.as_tensor(cam.position, dtype=torch.float64)
    view = centers[idx] - cam_pos
    view = view / torch.linalg.vector_norm(view, dim=-1, keepdim=True)
    colors = eval_sh(sh[idx], sh_degree, view)
    opacity = torch.sigmoid(opacity_logits[idx])

    det_i = det[idx]
    conic_a = c[idx] / det_i
    conic_b = -b[idx] / det_i
    conic_c = a[idx] / det_i

    conics = torch.stack([conic_a, conic_b, conic_c], dim=-1)
    img, t_final = Composite.apply(mean2d[idx], conics, opacity, colors, bg, w, h)
    img = torch.clamp(img, 0.0, 1.0)
    return img.reshape(h, w, 3), t_final.reshape(h, w)


def frame_tensors(frame: GaussianFrameSet) -> dict[str, torch.Tensor]:
    return {
        "centers": torch.as_tensor(frame.centers),
        "rotations": torch.as_tensor(frame.rotations),
        "log_scales": torch.as_tensor(frame.log_scales),
        "opacity_logits": torch.as_tensor(frame.opacity_logits),
        "sh": torch.as_tensor(frame.sh),
    }


def render(frame: GaussianFrameSet, cam: Camera, background=(0.0, 0.0, 0.0)) -> RenderedImage:
    with torch.no_grad():
        t = frame_tensors(frame)
        img, trans = render_tensors(
            t["centers"], t["rotations"], t["log_scales"], t["opacity_logits"], t["sh"],
            frame.sh_degree, cam, background,
        )
    return RenderedImage(img.numpy(), trans.numpy())


def render_image(frame: GaussianFrameSet, cam: Camera, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    return render(frame, cam, background).pixels


def loss_color(rendered, truth, lambda2: float = 0.2) -> torch.Tensor:
    """(1 - lambda2) * mean |rendered - truth| + lambda2 * (1 - SSIM) / 2."""
    if isinstance(rendered, RenderedImage):
        rendered = rendered.pixels
    rendered = torch.as_tensor(rendered, dtype=torch.float64)
    truth = torch.as_tensor(np.asarray(truth, dtype=np.float64)) if not isinstance(truth, torch.Tensor) else truth
    if tuple(rendered.shape) != tuple(truth.shape):
        raise ValueError(f"image shapes differ: {tuple(rendered.shape)} vs {tuple(truth.shape)}")
    if not 0.0 <= lambda2 <= 1.0:
        raise ValueError("lambda2 must lie in [0, 1]")
    l1 = (rendered - truth).abs().mean()
    if lambda2 == 0.0:
        return l1
    dssim = (1.0 - ssim_tensor(rendered, truth)) / 2.0
    return (1.0 - lambda2) * l1 + lambda2 * dssim
