"""Independent reference implementations used to check the library.

Everything here is deliberately slow and simple: central finite
differences, golden-section search, and an O(N^2) double-loop contrastive
loss.  None of it shares code with the paths under test.
"""

import math

import numpy as np

from aeriallab.autodiff import Graph


def finite_difference_grad(f, x, step=1e-5):
    """Central finite differences of the scalar-valued ``f`` w.r.t. ``x``.

    ``f`` takes no arguments and must read the array ``x``, which is
    perturbed in place one element at a time.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_err(a, b):
    denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-10)
    return np.max(np.abs(a - b), initial=0.0) / denom


def grad_check(make_loss, leaves, step=1e-5):
    """Max relative error between autodiff and finite-difference gradients.

    ``make_loss`` rebuilds the forward pass from scratch on every call and
    returns a scalar Tensor; ``leaves`` are the requires_grad inputs to
    compare.  Calls outside a Graph are value-only, which is what the
    finite-difference side relies on.
    """
    for t in leaves:
        t.zero_grad()
    with Graph() as g:
        loss = make_loss()
        g.backward(loss)
    worst = 0.0
    for t in leaves:
        fd = finite_difference_grad(lambda: make_loss().item(), t.data, step=step)
        ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_err(ad, fd))
    return worst


def golden_section_max(f, lo, hi, iters=140):
    """Maximize a unimodal function on [lo, hi] without derivatives."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def brute_force_info_nce(feats_a, feats_b, tau):
    """Symmetric InfoNCE by explicit double loops, for small N only."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    a = a / np.sqrt((a * a).sum(axis=1, keepdims=True))
    b = b / np.sqrt((b * b).sum(axis=1, keepdims=True))
    n = a.shape[0]
    total = 0.0
    for left, right in ((a, b), (b, a)):
        for i in range(n):
            logits = [float(np.dot(left[i], right[j])) / tau for j in range(n)]
            m = max(logits)
            lse = m + math.log(sum(math.exp(l - m) for l in logits))
            total += lse - logits[i]
    return total / (2.0 * n)


def dft2_energy(img):
    """Direct 2-D DFT power spectrum via explicit basis sums (very slow)."""
    x = np.asarray(img, dtype=np.float64)
    n, m = x.shape
    out = np.zeros((n, m))
    for k in range(n):
        for l in range(m):
            acc = 0.0 + 0.0j
            for i in range(n):
                for j in range(m):
                    acc += x[i, j] * np.exp(-2j * np.pi * (k * i / n + l * j / m))
            out[k, l] = (acc * acc.conjugate()).real
    return out
