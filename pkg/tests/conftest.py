import numpy as np
import pytest
import torch

from fourdgc.gaussians import Camera, GaussianFrameSet


def random_frame(rng, n, sh_degree=1, spread=0.5, frame_index=1):
    k = (sh_degree + 1) ** 2
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    return GaussianFrameSet(
        rng.uniform(-spread, spread, (n, 3)),
        rot,
        np.log(rng.uniform(0.1, 0.3, (n, 3))),
        rng.normal(1.0, 0.5, n),
        rng.normal(0.0, 0.5, (n, k, 3)),
        sh_degree,
        frame_index,
    )


def ring(n, size=16, radius=3.0, focal=None):
    focal = focal or 1.4 * size
    cams = []
    for i in range(n):
        a = 2 * np.pi * i / n
        eye = (radius * np.cos(a), 0.8, radius * np.sin(a))
        cams.append(Camera.look_at(eye, (0, 0, 0), (0, 1, 0), focal, focal, size, size, name=f"c{i}"))
    return cams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
