"""Central finite-difference gradient oracle for torch modules (float64)."""
import numpy as np
import torch


def randomize_(module, seed, scale=0.3):
    """Give every parameter a random value so zero-initialized heads carry gradient."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def fd_relative_error(fn, tensors, seed=0, eps=1e-6, max_coords=24):
    """Relative L2 error between autograd and central differences.

    ``fn`` maps nothing to an output tensor (or tuple of tensors); the scalar
    checked is a fixed random projection of all outputs. For each tensor in
    ``tensors`` up to ``max_coords`` coordinates are probed.
    """
    rng = np.random.default_rng(seed)

    def flat_out():
        out = fn()
        out = out if isinstance(out, (tuple, list)) else (out,)
        return torch.cat([o.reshape(-1) for o in out])

    with torch.no_grad():
        proj = torch.tensor(rng.normal(size=flat_out().numel()), dtype=torch.float64)

    for t in tensors:
        t.grad = None
    loss = (flat_out() * proj).sum()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)

    analytic, numeric = [], []
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        n = t.numel()
        coords = rng.choice(n, size=min(n, max_coords), replace=False)
        flat = t.data.view(-1)
        for c in coords:
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + eps
                up = (flat_out() * proj).sum().item()
                flat[c] = orig - eps
                down = (flat_out() * proj).sum().item()
                flat[c] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(g.reshape(-1)[c].item())
    a, n = np.array(analytic), np.array(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return np.linalg.norm(a - n) / denom
