"""Central finite-difference gradient oracle used by the model tests."""

import numpy as np
import torch


def finite_difference_error(fn, inputs, eps=1e-4, floor=1e-6, params=(), n_param_samples=12, seed=0, stats=None,
                            kink_tol=1e-4):
    """Largest relative error between autograd and central differences.

    ``fn`` maps the input tensors to a tensor; the scalar checked is
    ``sum(fn(*inputs) * w)`` for a fixed random projection ``w`` so every
    output element contributes. All inputs are perturbed element by
    element; for ``params`` a random subset of entries is perturbed.

    The default step sits between the two float64 error regimes: at 1e-6
    roundoff in the summed output already shows up at the 1e-9 level,
    which matters for entries whose gradient is itself near 1e-6, while
    the O(eps^2) truncation error at 1e-4 is far below that.

    A larger step is more likely to straddle a kink (a LeakyReLU switch or a
    change of arg-max). When the central differences at ``eps`` and
    ``eps / 10`` disagree by more than ``kink_tol`` relative (a smooth
    function gives about 1e-8, plus roundoff near the floor), the entry is
    re-measured at ``eps / 100``. A wrong analytic gradient is off by the
    same amount at both steps, so this can not mask one. Pass a
    dict as ``stats`` to receive the number of checked and re-measured
    entries.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        w = torch.randn(fn(*inputs).shape, generator=gen, dtype=torch.float64)

    def scalar():
        return (fn(*inputs) * w).sum()

    for p in params:
        p.grad = None
    scalar().backward()
    worst = 0.0
    counts = {"checked": 0, "kinks": 0}

    def check(tensor, grad, indices):
        nonlocal worst
        flat = tensor.data.view(-1)
        g = grad.reshape(-1)
        for i in indices:
            orig = flat[i].item()

            def central(h):
                with torch.no_grad():
                    flat[i] = orig + h
                    up = scalar().item()
                    flat[i] = orig - h
                    down = scalar().item()
                    flat[i] = orig
                return (up - down) / (2 * h)

            numeric = central(eps)
            finer = central(eps / 10)
            if abs(numeric - finer) > kink_tol * max(abs(numeric), abs(finer), floor):
                numeric = central(eps / 100)
                counts["kinks"] += 1
            counts["checked"] += 1
            analytic = g[i].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, rel)

    for x in inputs:
        check(x, x.grad, range(x.numel()))
    rng = np.random.default_rng(seed)
    for p in params:
        idx = rng.choice(p.numel(), size=min(n_param_samples, p.numel()), replace=False)
        check(p, p.grad, [int(i) for i in idx])
    if stats is not None:
        stats.update(counts)
    return worst


def randomise(module, seed=0, gain=1.0, bias_std=0.1):
    """Overwrite every parameter (zero-initialised gate layers included) with noise.

    Weights are drawn with std ``gain / sqrt(fan_in)`` so activations stay
    order one and sigmoid gates are not driven into saturation, where their
    gradients shrink below what a float64 central difference can resolve.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            std = gain / np.sqrt(p[0].numel()) if p.dim() > 1 else bias_std
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return module
