"""Shared screen-space projection math for the splat rasterizer backends.

Each 3D Gaussian (mean mu, covariance Sigma = Rq diag(s^2) Rq^T) projects to
an elliptical 2D footprint: with W the world-to-camera rotation and J the
perspective Jacobian at the camera-space mean,

    Sigma_2D = J W Sigma W^T J^T + blur_px2 * I.

The pixel weight is alpha = opacity * exp(-q/2) with q the Mahalanobis
distance under Sigma_2D^{-1}, truncated at q > footprint_sigma^2.  The
backward half of this module chains per-splat gradients w.r.t. the projected
mean and the conic (inverse 2D covariance) down to the 3D parameters,
including the quaternion-normalization Jacobian so finite differences on raw
quaternion components agree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..splat import SplatCloud, quat_to_rot, quat_to_rot_jacobian

# screen-space covariance floor (px^2); keeps sub-pixel splats rasterizable
BLUR_PX2 = 0.3
FOOTPRINT_SIGMA = 3.0   # footprint truncated at q > FOOTPRINT_SIGMA^2
T_MIN = 1e-4            # front-to-back termination transmittance
COND_MAX = 1e8          # 2D covariance condition-number cutoff
Z_NEAR = 0.05


@dataclass
class ProjectedSplats:
    """Depth-sorted surviving splats plus cached intermediates for backward."""

    mean2d: np.ndarray   # (m, 2)
    conic: np.ndarray    # (m, 3) entries (a, b, c) of Sigma_2D^{-1}
    depth: np.ndarray    # (m,) camera-space z of the center
    opacity: np.ndarray  # (m,)
    color: np.ndarray    # (m, 3)
    bbox: np.ndarray     # (m, 4) int32 [r0, r1, c0, c1], inclusive
    order: np.ndarray    # (m,) index into the original cloud
    n_skipped: int       # degenerate-covariance skips (diagnostic)
    cache: dict


def project_cloud(cloud: SplatCloud, cam, *, blur_px2: float = BLUR_PX2,
                  footprint_sigma: float = FOOTPRINT_SIGMA,
                  cond_max: float = COND_MAX, z_near: float = Z_NEAR) -> ProjectedSplats:
    n = len(cloud)
    empty = ProjectedSplats(
        mean2d=np.zeros((0, 2)), conic=np.zeros((0, 3)), depth=np.zeros(0),
        opacity=np.zeros(0), color=np.zeros((0, 3)),
        bbox=np.zeros((0, 4), dtype=np.int32), order=np.zeros(0, dtype=np.int64),
        n_skipped=0, cache={})
    if n == 0:
        return empty

    R = cam.rotation
    mu_cam = cloud.positions @ R.T + cam.translation
    z = mu_cam[:, 2]
    in_front = z > z_near

    qn = np.linalg.norm(cloud.rotations, axis=1)
    q_hat = cloud.rotations / np.where(qn[:, None] > 0, qn[:, None], 1.0)
    Rq = quat_to_rot(q_hat)
    s2 = cloud.scales ** 2
    # Sigma_world = Rq diag(s^2) Rq^T, then into camera frame
    Sigma_w = np.einsum("nik,nk,njk->nij", Rq, s2, Rq)
    M = np.einsum("ik,nkl,jl->nij", R, Sigma_w, R)

    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(z != 0, z, 1.0)
        inv_z = 1.0 / zs
        J = np.zeros((n, 2, 3))
        J[:, 0, 0] = cam.fx * inv_z
        J[:, 0, 2] = -cam.fx * mu_cam[:, 0] * inv_z ** 2
        J[:, 1, 1] = cam.fy * inv_z
        J[:, 1, 2] = -cam.fy * mu_cam[:, 1] * inv_z ** 2
        mean2d = np.stack([cam.fx * mu_cam[:, 0] * inv_z + cam.cx,
                           cam.fy * mu_cam[:, 1] * inv_z + cam.cy], axis=1)

    S = np.einsum("nij,njk,nlk->nil", J, M, J)
    S[:, 0, 0] += blur_px2
    S[:, 1, 1] += blur_px2
    a, b, c = S[:, 0, 0], S[:, 0, 1], S[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - det, 0.0))
    lam_max = mid + disc
    lam_min = mid - disc

    finite = np.isfinite(det) & np.isfinite(mean2d).all(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(lam_min > 0, lam_max / np.where(lam_min > 0, lam_min, 1.0), np.inf)
    degenerate = in_front & finite & ((det <= 0) | (lam_min <= 0) | (cond > cond_max))
    degenerate |= in_front & ~finite
    keep = in_front & finite & ~degenerate

    radius = footprint_sigma * np.sqrt(np.maximum(lam_max, 0.0))
    c0 = np.ceil(mean2d[:, 0] - radius - 0.5)
    c1 = np.floor(mean2d[:, 0] + radius - 0.5)
    r0 = np.ceil(mean2d[:, 1] - radius - 0.5)
    r1 = np.floor(mean2d[:, 1] + radius - 0.5)
    c0 = np.clip(c0, 0, cam.width - 1)
    c1 = np.clip(c1, 0, cam.width - 1)
    r0 = np.clip(r0, 0, cam.height - 1)
    r1 = np.clip(r1, 0, cam.height - 1)
    with np.errstate(invalid="ignore"):
        on_screen = (mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius < cam.width) & \
                    (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius < cam.height)
    keep &= on_screen

    idx = np.where(keep)[0]
    if len(idx) == 0:
        empty.n_skipped = int(np.count_nonzero(degenerate))
        return empty

    # depth sort with a full lexicographic tie-break over the raw parameters so
    # that permuting the input order can never permute the composited order
    p, s, q, o, col = (cloud.positions[idx], cloud.scales[idx], cloud.rotations[idx],
                       cloud.opacities[idx], cloud.colors[idx])
    keys = (col[:, 2], col[:, 1], col[:, 0], o,
            q[:, 3], q[:, 2], q[:, 1], q[:, 0],
            s[:, 2], s[:, 1], s[:, 0],
            p[:, 2], p[:, 1], p[:, 0], z[idx])
    srt = np.lexsort(keys)
    idx = idx[srt]

    K = np.stack([np.stack([c[idx] / det[idx], -b[idx] / det[idx]], axis=1),
                  np.stack([-b[idx] / det[idx], a[idx] / det[idx]], axis=1)], axis=1)
    bbox = np.stack([r0[idx], r1[idx], c0[idx], c1[idx]], axis=1).astype(np.int32)

    cache = {
        "mu_cam": mu_cam[idx], "J": J[idx], "M": M[idx], "Rq": Rq[idx],
        "q_hat": q_hat[idx], "q_norm": qn[idx], "scales": cloud.scales[idx],
        "K": K, "R_cam": R, "fx": cam.fx, "fy": cam.fy,
    }
    return ProjectedSplats(
        mean2d=np.ascontiguousarray(mean2d[idx]),
        conic=np.ascontiguousarray(np.stack([K[:, 0, 0], K[:, 0, 1], K[:, 1, 1]], axis=1)),
        depth=np.ascontiguousarray(z[idx]),
        opacity=np.ascontiguousarray(cloud.opacities[idx]),
        color=np.ascontiguousarray(cloud.colors[idx]),
        bbox=np.ascontiguousarray(bbox),
        order=idx,
        n_skipped=int(np.count_nonzero(degenerate)),
        cache=cache,
    )


def chain_to_params(proj: ProjectedSplats, n_total: int, g_mean2d: np.ndarray,
                    g_conic: np.ndarray, g_opacity: np.ndarray, g_color: np.ndarray) -> dict:
    """Chain kernel gradients (projected mean, conic, opacity, color) back to
    the 3D splat parameters of the original cloud ordering."""
    out = {
        "positions": np.zeros((n_total, 3)),
        "scales": np.zeros((n_total, 3)),
        "rotations": np.zeros((n_total, 4)),
        "opacities": np.zeros(n_total),
        "colors": np.zeros((n_total, 3)),
    }
    m = len(proj.order)
    if m == 0:
        return out
    ch = proj.cache
    J, M, Rq, K, R = ch["J"], ch["M"], ch["Rq"], ch["K"], ch["R_cam"]
    mu = ch["mu_cam"]
    fx, fy = ch["fx"], ch["fy"]

    # conic gradient -> 2D covariance gradient: dL/dS = -K (dL/dK) K
    GK = np.empty((m, 2, 2))
    GK[:, 0, 0] = g_conic[:, 0]
    GK[:, 0, 1] = GK[:, 1, 0] = 0.5 * g_conic[:, 1]
    GK[:, 1, 1] = g_conic[:, 2]
    GS = -np.einsum("nij,njk,nkl->nil", K, GK, K)

    dJ = 2.0 * np.einsum("nij,njk,nkl->nil", GS, J, M)
    GM = np.einsum("nji,njk,nkl->nil", J, GS, J)
    GSw = np.einsum("ia,nij,jb->nab", R, GM, R)

    GD = np.einsum("nia,nij,njb->nab", Rq, GSw, Rq)
    s = ch["scales"]
    out["scales"][proj.order] = 2.0 * s * GD[:, (0, 1, 2), (0, 1, 2)]

    gRq = 2.0 * np.einsum("nij,njk->nik", GSw, Rq) * (s ** 2)[:, None, :]
    Jq = quat_to_rot_jacobian(ch["q_hat"])
    g_qhat = np.einsum("nij,nkij->nk", gRq, Jq)
    qh = ch["q_hat"]
    proj_mat = (np.eye(4)[None] - qh[:, :, None] * qh[:, None, :]) / ch["q_norm"][:, None, None]
    out["rotations"][proj.order] = np.einsum("nij,nj->ni", proj_mat, g_qhat)

    g_mu = np.einsum("nji,nj->ni", J, g_mean2d)
    zz = mu[:, 2]
    g_mu[:, 0] += dJ[:, 0, 2] * (-fx / zz ** 2)
    g_mu[:, 1] += dJ[:, 1, 2] * (-fy / zz ** 2)
    g_mu[:, 2] += (dJ[:, 0, 0] * (-fx / zz ** 2) + dJ[:, 1, 1] * (-fy / zz ** 2)
                   + dJ[:, 0, 2] * (2.0 * fx * mu[:, 0] / zz ** 3)
                   + dJ[:, 1, 2] * (2.0 * fy * mu[:, 1] / zz ** 3))
    out["positions"][proj.order] = g_mu @ R

    out["opacities"][proj.order] = g_opacity
    out["colors"][proj.order] = g_color
    return out
