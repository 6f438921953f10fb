"""Shared test utilities: random factors and finite-difference checks."""
import numpy as np

from uae import autodiff as ad

FD_STEP = 1e-5
FD_RTOL = 1e-4


def random_lower(rng, n, diag_low=0.2, diag_high=2.0, off_scale=1.0):
    L = np.tril(rng.uniform(-off_scale, off_scale, (n, n)), -1)
    L[np.diag_indices(n)] = rng.uniform(diag_low, diag_high, n)
    return L


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_check(loss_fn, params, rng, directions=3, h=FD_STEP, kink_retry=False):
    """Worst relative error between reverse-mode and central-difference
    directional derivatives along random directions.

    ``loss_fn()`` rebuilds the scalar graph from the current values of the
    ``params`` nodes, which are perturbed in place. With ``kink_retry`` a
    direction that misses at ``h`` is repeated at ``h / 100``: stencil error
    (a straddled leaky-ReLU kink, or O(h^2) truncation) shrinks with the step,
    a wrong gradient does not.
    """
    root = loss_fn()
    grads = ad.grad_of(root, params)
    worst = 0.0
    for _ in range(directions):
        dirs = [rng.standard_normal(p.value.shape) for p in params]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        err = relative_error(_central(loss_fn, params, dirs, h), analytic)
        if kink_retry and err >= 1e-4:
            err = relative_error(_central(loss_fn, params, dirs, h / 100), analytic)
        worst = max(worst, err)
    return worst


def _central(loss_fn, params, dirs, h):
    for p, d in zip(params, dirs):
        p.value += h * d
    up = loss_fn().item()
    for p, d in zip(params, dirs):
        p.value -= 2 * h * d
    down = loss_fn().item()
    for p, d in zip(params, dirs):
        p.value += h * d
    return (up - down) / (2 * h)


def elementwise_check(fn, x, h=FD_STEP):
    """Reverse-mode gradient of ``sum(fn(x))`` against per-entry central differences."""
    node = ad.Node(np.array(x, dtype=np.float64))
    out = ad.sum_(fn(node))
    (grad,) = ad.grad_of(out, [node])
    fd = np.zeros_like(node.value)
    base = node.value.copy()
    for idx in np.ndindex(base.shape):
        hi, lo = base.copy(), base.copy()
        hi[idx] += h
        lo[idx] -= h
        fd[idx] = (ad.sum_(fn(ad.Node(hi))).item() - ad.sum_(fn(ad.Node(lo))).item()) / (2 * h)
    return grad, fd
