"""Slow, obviously-correct reference implementations used only by tests."""

import math

import numpy as np
import torch


def shift_loop(x, k, mode):
    """Element-by-element temporal shift of a (T, C, H, W) array."""
    x = np.asarray(x)
    T, C, H, W = x.shape
    out = np.zeros_like(x)
    for t in range(T):
        for c in range(C):
            if c < k:
                src = t - 1
            elif mode == "offline" and c < 2 * k:
                src = t + 1
            else:
                src = t
            if 0 <= src < T:
                for i in range(H):
                    for j in range(W):
                        out[t, c, i, j] = x[src, c, i, j]
    return out


def learnable_shift_loop(x, kern):
    x = np.asarray(x, dtype=np.float64)
    kern = np.asarray(kern, dtype=np.float64)
    T, C, H, W = x.shape
    out = np.zeros_like(x)
    for t in range(T):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    acc = kern[c, 1] * x[t, c, i, j]
                    if t > 0:
                        acc += kern[c, 0] * x[t - 1, c, i, j]
                    if t < T - 1:
                        acc += kern[c, 2] * x[t + 1, c, i, j]
                    out[t, c, i, j] = acc
    return out


def conv2d_loop(x, w, b, stride=1, padding=0, dilation=1):
    """Direct cross-correlation of one (C, H, W) image with (O, C, k, k) weights."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((C, H + 2 * padding, W + 2 * padding))
    xp[:, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o]
                for c in range(C):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, c, u, v] * xp[c, i * stride + u * dilation, j * stride + v * dilation]
                out[o, i, j] = acc
    return out


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def leaky(z, slope=0.2):
    return np.where(z >= 0, z, slope * z)


def attention_loop(x, wq, bq, wk, bk, wv, bv, gamma):
    """Per-position self-attention of one (C, H, W) frame with explicit sums."""
    x = np.asarray(x, dtype=np.float64)
    C, H, W = x.shape
    N = H * W
    f = x.reshape(C, N)
    q = wq @ f + bq[:, None]
    k = wk @ f + bk[:, None]
    v = wv @ f + bv[:, None]
    out = np.zeros((C, N))
    for i in range(N):
        logits = [sum(q[r, i] * k[r, j] for r in range(q.shape[0])) for j in range(N)]
        m = max(logits)
        e = [math.exp(z - m) for z in logits]
        s = sum(e)
        for c in range(C):
            out[c, i] = sum(e[j] / s * v[c, j] for j in range(N))
    return (gamma * out + f).reshape(C, H, W)


def central_fd(fn, x, eps=1e-6):
    """Central finite-difference gradient of scalar ``fn`` w.r.t. float64 tensor ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            hi = float(fn(x))
            flat[i] = old - eps
            lo = float(fn(x))
            flat[i] = old
            g[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), 1e-12))


def grad_rel_err(fn, x, eps=1e-6):
    """Relative error between autograd and central differences for ``fn(x)``."""
    x = x.detach().clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    numeric = central_fd(fn, x.detach(), eps)
    return rel_err(analytic, numeric)


def gaussian_kernel_2d(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_window_loop(x, y, data_range=1.0):
    """SSIM of two 2-D planes by explicit per-window weighted statistics."""
    w = gaussian_kernel_2d()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    H, W = x.shape
    vals = []
    for i in range(H - 10):
        for j in range(W - 10):
            px = x[i:i + 11, j:j + 11]
            py = y[i:i + 11, j:j + 11]
            mx = (w * px).sum()
            my = (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))
