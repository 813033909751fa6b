"""Independent reference implementations used by the tests."""

import math

import numpy as np
import torch


def finite_difference_check(fn, inputs, n_coords=40, eps=1e-6, seed=0):
    """Fraction of sampled coordinates whose analytic gradient matches central differences.

    ``fn`` maps the tuple of double tensors ``inputs`` to a scalar. Relative
    error is |g - fd| / max(|g|, |fd|, 1e-8); a coordinate passes below 1e-4.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    rng = np.random.default_rng(seed)
    ok = total = 0
    for k, (x, g) in enumerate(zip(inputs, grads)):
        g = torch.zeros_like(x) if g is None else g
        flat = x.detach().view(-1)
        picks = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        for i in picks:
            base = [y.detach().clone() for y in inputs]
            plus, minus = base[k].view(-1).clone(), base[k].view(-1).clone()
            plus[i] += eps
            minus[i] -= eps
            with torch.no_grad():
                fp = fn(*[plus.view_as(x) if j == k else b for j, b in enumerate(base)]).item()
                fm = fn(*[minus.view_as(x) if j == k else b for j, b in enumerate(base)]).item()
            fd = (fp - fm) / (2 * eps)
            a = g.reshape(-1)[i].item()
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            ok += rel < 1e-4
            total += 1
    return ok / total


def brute_info_nce(a, p, tau, symmetric=True):
    """Direct evaluation of the InfoNCE sum with Python floats."""
    a = np.asarray(a, dtype=float)
    p = np.asarray(p, dtype=float)
    b = len(a)

    def one(x, y):
        tot = 0.0
        for i in range(b):
            s = [float(x[i] @ y[j]) / tau for j in range(b)]
            m = max(s)
            tot += -(s[i] - m - math.log(sum(math.exp(v - m) for v in s)))
        return tot / b

    return 0.5 * (one(a, p) + one(p, a)) if symmetric else one(a, p)


def brute_fusion(tapped, weights, biases, grid):
    """Per-pixel dense matrix evaluation of summed 1x1 convolutions."""
    b, n, d = tapped[0].shape
    out = np.zeros((b, n, d))
    for t, w, bias in zip(tapped, weights, biases):
        for bi in range(b):
            for r in range(grid[0]):
                for c in range(grid[1]):
                    idx = r * grid[1] + c
                    out[bi, idx] += w @ t[bi, idx] + bias
    return out


def brute_boundary(mask):
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not mask[rr, cc]:
                    out[r, c] = True
                    break
    return out


def brute_asd(pred, gt, mm=1.0):
    """All-pairs symmetric mean nearest boundary distance."""
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    if not gt.any():
        return None
    if not pred.any():
        return math.hypot(*gt.shape) * mm
    bp = np.argwhere(brute_boundary(pred))
    bg = np.argwhere(brute_boundary(gt))
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()) * mm
