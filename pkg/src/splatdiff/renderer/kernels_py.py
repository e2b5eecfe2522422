"""Pure-numpy rasterization kernels (fallback backend).

Painter-style loop over depth-sorted splats, vectorized over each splat's
bounding box.  Per-pixel compositing order and inclusion rules are identical
to the compiled kernels: a splat contributes at a pixel iff its Mahalanobis
distance q <= qmax and the transmittance before it is >= t_min.
"""
from __future__ import annotations

import numpy as np


def _footprint(mean2d_i, conic_i, bbox_i):
    r0, r1, c0, c1 = bbox_i
    us = np.arange(c0, c1 + 1, dtype=np.float64) + 0.5
    vs = np.arange(r0, r1 + 1, dtype=np.float64) + 0.5
    dx = us[None, :] - mean2d_i[0]
    dy = vs[:, None] - mean2d_i[1]
    ca, cb, cc = conic_i
    q = ca * (dx * dx) + 2.0 * cb * (dx * dy) + cc * (dy * dy)
    return (slice(r0, r1 + 1), slice(c0, c1 + 1)), q, dx, dy


def forward(mean2d, conic, depth, opacity, color, bbox, H, W, bg, t_min, qmax):
    m = len(mean2d)
    T = np.ones((H, W))
    C = np.zeros((H, W, 3))
    zsum = np.zeros((H, W))
    med = np.full((H, W), np.inf)
    for i in range(m):
        sub, q, _, _ = _footprint(mean2d[i], conic[i], bbox[i])
        Tsub = T[sub]
        contrib = (q <= qmax) & (Tsub >= t_min)
        if not contrib.any():
            continue
        alpha = opacity[i] * np.exp(-0.5 * q)
        w = np.where(contrib, alpha * Tsub, 0.0)
        C[sub] += w[:, :, None] * color[i]
        zsum[sub] += w * depth[i]
        Tnew = Tsub * (1.0 - alpha)
        crossed = contrib & (Tsub >= 0.5) & (Tnew < 0.5)
        med_sub = med[sub]
        med_sub[crossed] = depth[i]
        T[sub] = np.where(contrib, Tnew, Tsub)
    alpha_img = 1.0 - T
    out_color = C + T[:, :, None] * np.asarray(bg)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth_exp = np.where(alpha_img > 1e-6, zsum / alpha_img, np.inf)
    return out_color, alpha_img, depth_exp, med


def backward(mean2d, conic, depth, opacity, color, bbox, H, W, bg, t_min, qmax, grad_color):
    """Gradients of sum(grad_color * rendered_color) w.r.t. per-splat projected
    quantities.  Two painter passes: the forward pass records each splat's
    entry transmittance; the reverse pass maintains suffix accumulators

        A = sum_{j>i} c_j a_j prod_{i<k<j} (1-a_k),   B = prod_{k>i} (1-a_k)

    giving the division-free dC/da_i = T_i (c_i - A - bg B), exact even at
    a_i = 1.
    """
    m = len(mean2d)
    g_color = np.zeros((m, 3))
    g_opacity = np.zeros(m)
    g_mean = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    if m == 0:
        return g_color, g_opacity, g_mean, g_conic

    bg = np.asarray(bg)
    T = np.ones((H, W))
    T_entry = []
    for i in range(m):
        sub, q, _, _ = _footprint(mean2d[i], conic[i], bbox[i])
        Tsub = T[sub]
        T_entry.append(Tsub.copy())
        contrib = (q <= qmax) & (Tsub >= t_min)
        if contrib.any():
            alpha = opacity[i] * np.exp(-0.5 * q)
            T[sub] = np.where(contrib, Tsub * (1.0 - alpha), Tsub)

    A = np.zeros((H, W, 3))
    B = np.ones((H, W))
    for i in range(m - 1, -1, -1):
        sub, q, dx, dy = _footprint(mean2d[i], conic[i], bbox[i])
        Ti = T_entry[i]
        contrib = (q <= qmax) & (Ti >= t_min)
        if not contrib.any():
            continue
        G = np.exp(-0.5 * q)
        alpha = opacity[i] * G
        g = grad_color[sub]
        Asub = A[sub]
        Bsub = B[sub]
        w = np.where(contrib, alpha * Ti, 0.0)
        g_color[i] = np.einsum("rc,rck->k", w, g)
        dalpha = Ti * np.einsum("rck,rck->rc", g, color[i][None, None, :] - Asub - bg * Bsub[:, :, None])
        dalpha = np.where(contrib, dalpha, 0.0)
        g_opacity[i] = np.sum(dalpha * G)
        gq = -0.5 * dalpha * alpha
        ca, cb, cc = conic[i]
        g_mean[i, 0] = np.sum(-2.0 * gq * (ca * dx + cb * dy))
        g_mean[i, 1] = np.sum(-2.0 * gq * (cb * dx + cc * dy))
        g_conic[i, 0] = np.sum(gq * dx * dx)
        g_conic[i, 1] = np.sum(gq * 2.0 * dx * dy)
        g_conic[i, 2] = np.sum(gq * dy * dy)
        A[sub] = np.where(contrib[:, :, None], color[i] * alpha[:, :, None] + (1.0 - alpha)[:, :, None] * Asub, Asub)
        B[sub] = np.where(contrib, (1.0 - alpha) * Bsub, Bsub)
    return g_color, g_opacity, g_mean, g_conic
