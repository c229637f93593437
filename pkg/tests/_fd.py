"""Central finite-difference checks shared by the gradient tests."""
import numpy as np


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def numeric_grad(f, p, idx, eps=1e-5):
    old = p.data[idx]
    p.data[idx] = old + eps
    fp = f().item()
    p.data[idx] = old - eps
    fm = f().item()
    p.data[idx] = old
    return (fp - fm) / (2 * eps)


def check_grads(f, params, rng=None, max_entries=None, eps=1e-5):
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.
    """
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        entries = np.ndindex(p.shape) if max_entries is None else [
            np.unravel_index(j, p.shape)
            for j in rng.choice(p.data.size, min(max_entries, p.data.size), replace=False)]
        for idx in entries:
            worst = max(worst, rel_err(numeric_grad(f, p, idx, eps), g[idx]))
    return worst
