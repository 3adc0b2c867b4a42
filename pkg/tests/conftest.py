import numpy as np
import pytest
import torch

from dynstat_ssc.scene import CameraIntrinsics, CameraPose

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def fd_rel_error(fn, inputs, eps=1e-6, seed=0):
    """Relative error between autograd and central differences of a random projection of fn.

    Inputs are float64 tensors; returns ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||)
    over all inputs that require grad.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    auto = torch.autograd.grad((out * w).sum(), inputs, allow_unused=True)
    num_err, num_ref, num_fd = 0.0, 0.0, 0.0
    with torch.no_grad():
        for x, ga in zip(inputs, auto):
            ga = torch.zeros_like(x) if ga is None else ga
            fd = torch.zeros_like(x)
            flat = x.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = (fn(*inputs) * w).sum().item()
                flat[i] = orig - eps
                minus = (fn(*inputs) * w).sum().item()
                flat[i] = orig
                fd.view(-1)[i] = (plus - minus) / (2 * eps)
            num_err += float(((ga - fd) ** 2).sum())
            num_ref += float((ga ** 2).sum())
            num_fd += float((fd ** 2).sum())
    denom = max(num_ref, num_fd) ** 0.5
    return (num_err ** 0.5) / denom if denom > 0 else 0.0


class _Call(torch.nn.Module):
    def __init__(self, module, fn):
        super().__init__()
        self.m = module
        self.fn = fn

    def forward(self, *xs):
        return self.fn(self.m, *xs)


def module_fd_rel_error(module, fn, inputs, eps=1e-6):
    """As fd_rel_error, also differentiating every parameter of `module` (cast to float64).

    `fn(module, *inputs)` produces the output tensor.
    """
    wrapper = _Call(module.double(), fn)
    names = [n for n, p in wrapper.named_parameters() if p.requires_grad]
    params = [p.detach() for n, p in wrapper.named_parameters() if p.requires_grad]
    n_in = len(inputs)

    def functional(*args):
        return torch.func.functional_call(wrapper, dict(zip(names, args[n_in:])), tuple(args[:n_in]))

    return fd_rel_error(functional, [*inputs, *params], eps=eps)


@pytest.fixture
def small_intr():
    return CameraIntrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)


@pytest.fixture
def identity_pose():
    return CameraPose()


def rng(seed=0):
    return np.random.default_rng(seed)
