import numpy as np
import pytest
import torch


def central_difference(fn, inputs, index, step=1e-3, chunk=2048):
    """Central-difference gradient of ``fn`` w.r.t. ``inputs[index]``.

    ``fn`` receives the inputs with an extra leading batch axis and must
    return one value per batch element; perturbations are evaluated in
    batches so 64x64 images stay cheap.
    """
    base = [t.detach().to(torch.float64) for t in inputs]
    target = base[index]
    n = target.numel()
    grad = torch.empty(n, dtype=torch.float64)
    eye_idx = torch.arange(n)
    for start in range(0, n, chunk):
        idx = eye_idx[start:start + chunk]
        k = len(idx)
        pert = torch.zeros(k, n, dtype=torch.float64)
        pert[torch.arange(k), idx] = step
        pert = pert.reshape(k, *target.shape)
        plus = [b.expand(k, *b.shape).clone() for b in base]
        minus = [b.expand(k, *b.shape).clone() for b in base]
        plus[index] = target + pert
        minus[index] = target - pert
        with torch.no_grad():
            grad[start:start + k] = (fn(*plus) - fn(*minus)) / (2 * step)
    return grad.reshape(target.shape)


def relative_error(a, b):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
