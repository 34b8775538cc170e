"""
Independent reference implementations used as test oracles.

Everything here is written as plain loop nests or closed forms and shares no
code with the package kernels.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def conv2d_naive(x, w, b=None, stride=1, padding=0):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(n):
        for o in range(cout):
            for y in range(oh):
                for z in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += xp[i, c, y * stride + dy, z * stride + dx] * w[o, c, dy, dx]
                    out[i, o, y, z] = acc + (b[o] if b is not None else 0.0)
    return out


def max_pool2_naive(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2))
    for i in range(n):
        for k in range(c):
            for y in range(h // 2):
                for z in range(w // 2):
                    out[i, k, y, z] = max(x[i, k, 2 * y + a, 2 * z + b] for a in (0, 1) for b in (0, 1))
    return out


def batch_norm_naive(x, gamma, beta, eps=1e-5):
    n, c, h, w = x.shape
    out = np.empty_like(x)
    means, variances = np.empty(c), np.empty(c)
    m = n * h * w
    for k in range(c):
        vals = [x[i, k, y, z] for i in range(n) for y in range(h) for z in range(w)]
        mu = math.fsum(vals) / m
        var = math.fsum((v - mu) ** 2 for v in vals) / m
        means[k], variances[k] = mu, var
        out[:, k] = gamma[k] * (x[:, k] - mu) / math.sqrt(var + eps) + beta[k]
    return out, means, variances


def numeric_grad(f, x, step=1e-4):
    """Central differences of scalar ``f`` wrt every element of array ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b, floor=1e-6):
    """Elementwise relative error, with a floor so near-zero entries compare absolutely."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def pckh_scalar(pred, gt, visible, head_length, t):
    """Per keypoint: None if not counted, else True/False.

    Exact: coordinates and the threshold are compared as rationals.
    """
    r = Fraction(float(t)) * Fraction(float(head_length))
    out = []
    for (px, py), (gx, gy), v in zip(pred, gt, visible):
        if not v:
            out.append(None)
            continue
        dx = Fraction(float(px)) - Fraction(float(gx))
        dy = Fraction(float(py)) - Fraction(float(gy))
        out.append(dx * dx + dy * dy <= r * r)
    return out


def gaussian_heatmap_naive(cx, cy, side, sigma=1.0):
    hm = np.zeros((side, side))
    for y in range(side):
        for x in range(side):
            if abs(x - cx) <= 3 * sigma and abs(y - cy) <= 3 * sigma:
                hm[y, x] = math.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma * sigma))
    return hm


def residual_params(cin, cout):
    """Pre-activation bottleneck: BN, 1x1 to cout/2, BN, 3x3, BN, 1x1 to cout, optional 1x1 skip."""
    mid = cout // 2
    p = 2 * cin + (cin * mid + mid) + 2 * mid + (9 * mid * mid + mid) + 2 * mid + (mid * cout + cout)
    if cin != cout:
        p += cin * cout + cout
    return p


def hourglass_params(depth, c):
    if depth == 0:
        return residual_params(c, c)
    return 3 * residual_params(c, c) + hourglass_params(depth - 1, c)


def model_param_count(stacks, c, depth, joints=16, activities=21, variant="baseline", fusion_post=True):
    """Closed-form parameter census, assembled block by block."""
    stem = (3 * 49 * (c // 4) + c // 4) + 2 * (c // 4)
    stem += residual_params(c // 4, c // 2) + residual_params(c // 2, c // 2) + residual_params(c // 2, c)
    per_stack = hourglass_params(depth, c) + residual_params(c, c) + (c * c + c + 2 * c) + (c * joints + joints)
    remap = (c * c + c) + (joints * c + c)
    total = stem + stacks * per_stack + (stacks - 1) * remap
    if variant != "baseline":
        width = c + activities if variant == "contextual" else c
        total += width * c + c + (2 * c if fusion_post else 0)
    return total
