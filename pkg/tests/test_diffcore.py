import numpy as np
import pytest
import torch

from fourdgc.diffcore import Adam, finite_diff_check, finite_diff_errors


def test_quadratic():
    x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    assert finite_diff_check(lambda: (x**2).sum(), {"x": x}) < 1e-8


def test_unused_parameter_has_zero_gradient():
    x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    y = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    errs = finite_diff_errors(lambda: (x**3).sum(), {"x": x, "y": y})
    assert errs["y"] == 0.0


def test_wrong_gradient_is_caught():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**2

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x

    x = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    assert finite_diff_check(lambda: Bad.apply(x).sum(), {"x": x}) > 0.5


def test_epsilon_range():
    x = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    with pytest.raises(ValueError):
        finite_diff_check(lambda: x.sum(), {"x": x}, epsilon=0.1)


def test_zero_gradient_fixed_point():
    x = torch.tensor([0.5, -2.0], dtype=torch.float64, requires_grad=True)
    opt = Adam()
    opt.add("x", x, 0.1)
    x.grad = torch.zeros_like(x)
    opt.step()
    assert x.tolist() == [0.5, -2.0]


def test_first_step_size():
    x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    opt = Adam()
    opt.add("x", x, 0.1)
    x.grad = torch.ones_like(x)
    opt.step()
    assert x.item() == pytest.approx(0.9, abs=1e-6)


def test_quaternion_group_stays_unit():
    q = torch.tensor([[1.0, 0.2, 0.0, 0.0]], dtype=torch.float64, requires_grad=True)
    opt = Adam()
    opt.add("q", q, 0.05, quaternion=True)
    for _ in range(5):
        q.grad = torch.tensor([[0.3, -1.0, 0.5, 0.2]], dtype=torch.float64)
        opt.step()
        assert abs(torch.linalg.vector_norm(q).item() - 1) < 1e-12


def test_nan_gradient_raises_before_update():
    x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    opt = Adam()
    opt.add("x", x, 0.1)
    x.grad = torch.tensor([float("nan")], dtype=torch.float64)
    with pytest.raises(FloatingPointError):
        opt.step()
    assert x.item() == 1.0


def trajectory(seed):
    rng = np.random.default_rng(seed)
    target = torch.as_tensor(rng.normal(size=5))
    x = torch.zeros(5, dtype=torch.float64, requires_grad=True)
    opt = Adam()
    opt.add("x", x, 0.05)
    out = []
    for _ in range(30):
        opt.zero_grad()
        ((x - target) ** 2).sum().backward()
        opt.step()
        out.append(x.detach().clone())
    return torch.stack(out)


def test_deterministic_trajectories():
    assert torch.equal(trajectory(4), trajectory(4))
