"""Optimization-based splat reconstruction from (possibly inconsistent) views.

Stands in for a learned feed-forward reconstructor: given per-view clean-image
estimates and cameras, fit a SplatCloud by adaptive-moment gradient descent on

    lambda1 * weighted MSE + lambda2 * multi-scale gradient difference
    + lambda3 * (opacity-entropy + anisotropy hinge) / n_splats

with scales kept positive through a softplus reparameterization, quaternions
renormalized every step, and a monotone line-search fallback so accepted steps
never increase the loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .camera import Camera
from .renderer import render, render_gradients
from .schedule import NoiseSchedule
from .splat import SplatCloud, regularizer, validate

__all__ = ["FitConfig", "FitResult", "DivergenceError", "init_from_views",
           "fit", "reconstruct", "snr_weight"]

_BETA1, _BETA2, _ADAM_EPS = 0.9, 0.999, 1e-8
_OP_EPS = 1e-6           # opacity clamp half-width: keeps entropy grad finite


class DivergenceError(RuntimeError):
    """Non-finite loss during fitting; carries the last finite cloud."""

    def __init__(self, msg, last_cloud, iteration):
        super().__init__(msg)
        self.last_cloud = last_cloud
        self.iteration = iteration


@dataclass
class FitConfig:
    n_splats: int = 48
    iterations: int = 200
    lr: dict = field(default_factory=lambda: {
        "positions": 1e-2, "colors": 1e-2,
        "scales": 5e-3, "rotations": 5e-3, "opacities": 5e-3})
    lambda1: float = 1.0          # data MSE
    lambda2: float = 1.0          # gradient-difference (perceptual substitute)
    lambda3: float = 100.0        # splat regularizer
    w_opacity: float = 1e-4       # regularizer internals, see notes
    w_aniso: float = 1e-3
    aniso_kappa: float = 10.0
    background: tuple = (1.0, 1.0, 1.0)
    footprint_sigma: float = 3.0  # widen to ~12 for finite-difference checks
    t_min: float = 1e-4
    view_weights: np.ndarray | None = None   # per target view; context is 1.0
    warm_start: SplatCloud | None = None
    snr_clamp: tuple = (0.05, 20.0)
    converge_mse: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.n_splats < 1:
            raise ValueError("n_splats must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class FitResult:
    cloud: SplatCloud
    mse: float
    percep: float
    reg: float
    iterations_used: int
    converged: bool

    @property
    def loss(self) -> float:
        return self.mse + self.percep + self.reg

    def csv_row(self) -> str:
        return (f"{self.iterations_used},{self.converged:d},"
                f"{self.mse:.10e},{self.percep:.10e},{self.reg:.10e}")


def snr_weight(t: int, sched: NoiseSchedule, clamp=(0.05, 20.0)) -> float:
    """Signal-to-noise ratio of the forward process at t, clamped."""
    ab = sched.abar(t)
    return float(np.clip(ab / (1.0 - ab), clamp[0], clamp[1]))


# ------------------------------------------------------------------ init

def init_from_views(x0_views: np.ndarray, cams: list[Camera], n_splats: int,
                    seed: int, background=(1.0, 1.0, 1.0),
                    fg_threshold: float = 0.05) -> SplatCloud:
    """Back-project random foreground pixels into a seed cloud.

    Seeds sit at each pixel ray's closest approach to the origin (the rig
    looks at the origin, so depth information is not needed), with mild
    longitudinal jitter. All-background inputs are an error.
    """
    x0_views = np.asarray(x0_views, dtype=np.float64)
    if x0_views.ndim != 4 or len(x0_views) != len(cams):
        raise ValueError("x0_views must be (V,H,W,3) aligned with cams")
    if n_splats < 1:
        raise ValueError("n_splats must be >= 1")
    bg = np.asarray(background, dtype=np.float64)
    rng = np.random.default_rng(seed)

    pts, cols = [], []
    for img, cam in zip(x0_views, cams):
        mask = np.abs(img - bg).max(axis=-1) > fg_threshold
        rows, cc = np.nonzero(mask)
        if rows.size == 0:
            continue
        take = rng.choice(rows.size, size=min(rows.size, 4 * n_splats),
                          replace=False)
        r, c = rows[take], cc[take]
        pix = np.stack([c + 0.5, r + 0.5], axis=1).astype(np.float64)
        origin = cam.position
        dirs = cam.unproject(pix, np.ones(len(pix))) - origin
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        s = -(origin @ dirs.T)              # closest approach to world origin
        pts.append(origin + s[:, None] * dirs)
        cols.append(img[r, c])
    if not pts:
        raise ValueError("empty scene: no foreground pixels in any view")
    pts = np.concatenate(pts)
    cols = np.concatenate(cols)

    pick = rng.choice(len(pts), size=n_splats, replace=len(pts) < n_splats)
    pos = pts[pick]
    centroid = pos.mean(axis=0)
    spread = float(np.sqrt(np.mean(np.sum((pos - centroid) ** 2, axis=1))))
    spread = max(spread, 0.05)
    pos = pos + rng.normal(0.0, 0.05 * spread, size=pos.shape)
    scale = max(spread / max(n_splats, 1) ** (1.0 / 3.0), 0.02)
    return SplatCloud(
        positions=pos,
        scales=np.full((n_splats, 3), scale),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n_splats, 1)),
        opacities=np.full(n_splats, 0.5),
        colors=np.clip(cols[pick], 0.0, 1.0),
        scene_scale=2.0 * spread,
    )


# ------------------------------------------------------ loss and gradients

def _down2(img):
    H, W = img.shape[:2]
    h2, w2 = H // 2, W // 2
    return img[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2, -1).mean(axis=(1, 3))


def _down2_adjoint(g, H, W):
    h2, w2 = g.shape[:2]
    out = np.zeros((H, W, g.shape[-1]))
    out[:2 * h2, :2 * w2] = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) / 4.0
    return out


def _graddiff_pair(a, b):
    """Gradient-difference loss at one scale; returns (value, dvalue/da)."""
    ex = (a[:, 1:] - a[:, :-1]) - (b[:, 1:] - b[:, :-1])
    ey = (a[1:, :] - a[:-1, :]) - (b[1:, :] - b[:-1, :])
    val = float(np.mean(ex ** 2) + np.mean(ey ** 2))
    ga = np.zeros_like(a)
    cx, cy = 2.0 / ex.size, 2.0 / ey.size
    ga[:, 1:] += cx * ex
    ga[:, :-1] -= cx * ex
    ga[1:, :] += cy * ey
    ga[:-1, :] -= cy * ey
    return val, ga


def _graddiff_multiscale(a, b, n_scales=3):
    """Mean over dyadic scales of _graddiff_pair, with backward to a."""
    levels = [(a, b)]
    for _ in range(n_scales - 1):
        if min(levels[-1][0].shape[:2]) < 4:
            break
        levels.append((_down2(levels[-1][0]), _down2(levels[-1][1])))
    val = 0.0
    grads = []
    for la, lb in levels:
        v, g = _graddiff_pair(la, lb)
        val += v
        grads.append(g)
    # chain coarse-scale grads back up through the pooling adjoints
    g_total = grads[-1]
    for lvl in range(len(levels) - 2, -1, -1):
        H, W = levels[lvl][0].shape[:2]
        g_total = _down2_adjoint(g_total, H, W) + grads[lvl]
    k = len(levels)
    return val / k, g_total / k


def _objective(cloud, views, cams, weights, cfg):
    """Full loss and per-splat parameter gradients."""
    n = len(cloud)
    wsum = float(np.sum(weights))
    grads = {k: 0.0 for k in ("positions", "scales", "rotations",
                              "opacities", "colors")}
    mse_total = 0.0
    percep_total = 0.0
    for img, cam, w in zip(views, cams, weights):
        if w == 0.0:
            continue
        out = render(cloud, cam, background=cfg.background,
                     footprint_sigma=cfg.footprint_sigma, t_min=cfg.t_min)
        diff = out.color - img
        mse_v = float(np.mean(diff ** 2))
        cot = (cfg.lambda1 * w / wsum) * (2.0 / diff.size) * diff
        mse_total += w / wsum * mse_v
        if cfg.lambda2 > 0:
            pv, pg = _graddiff_multiscale(out.color, img)
            percep_total += w / wsum * pv
            cot = cot + (cfg.lambda2 * w / wsum) * pg
        g, _ = render_gradients(cloud, cam, cot, background=cfg.background,
                                footprint_sigma=cfg.footprint_sigma,
                                t_min=cfg.t_min)
        for k in grads:
            grads[k] = grads[k] + g[k]
    reg_val, reg_g = regularizer(cloud, w_op=cfg.w_opacity,
                                 w_aniso=cfg.w_aniso, kappa=cfg.aniso_kappa)
    reg_scale = cfg.lambda3 / max(n, 1)
    grads["opacities"] = grads["opacities"] + reg_scale * reg_g["opacity"]
    grads["scales"] = grads["scales"] + reg_scale * reg_g["scale"]
    parts = (cfg.lambda1 * mse_total, cfg.lambda2 * percep_total,
             reg_scale * reg_val)
    return parts, grads, mse_total


def _loss_only(cloud, views, cams, weights, cfg):
    wsum = float(np.sum(weights))
    mse_total = percep_total = 0.0
    for img, cam, w in zip(views, cams, weights):
        if w == 0.0:
            continue
        out = render(cloud, cam, background=cfg.background,
                     footprint_sigma=cfg.footprint_sigma, t_min=cfg.t_min)
        mse_total += w / wsum * float(np.mean((out.color - img) ** 2))
        if cfg.lambda2 > 0:
            pv, _ = _graddiff_multiscale(out.color, img)
            percep_total += w / wsum * pv
    reg_val, _ = regularizer(cloud, w_op=cfg.w_opacity,
                             w_aniso=cfg.w_aniso, kappa=cfg.aniso_kappa)
    return (cfg.lambda1 * mse_total + cfg.lambda2 * percep_total
            + cfg.lambda3 / max(len(cloud), 1) * reg_val), mse_total


# ------------------------------------------------------------------- fit

def _softplus(u):
    return np.logaddexp(0.0, u)


def _softplus_inv(s):
    # log(expm1(s)), stable for small s
    return np.where(s > 20.0, s, np.log(np.expm1(np.maximum(s, 1e-12))))


def _params_to_cloud(p, scene_scale):
    q = p["rotations"]
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    return SplatCloud(
        positions=p["positions"].copy(),
        scales=_softplus(p["scales_u"]),
        rotations=qn,
        opacities=np.clip(p["opacities"], _OP_EPS, 1.0 - _OP_EPS),
        colors=np.clip(p["colors"], 0.0, 1.0),
        scene_scale=scene_scale,
    )


def fit(x0_views, cams, context_view, context_cam, cfg: FitConfig) -> FitResult:
    """Fit a cloud to the given views (context view, when present, weight 1)."""
    x0_views = np.asarray(x0_views, dtype=np.float64)
    views = list(x0_views)
    cam_list = list(cams)
    if cfg.view_weights is not None:
        weights = list(np.asarray(cfg.view_weights, dtype=np.float64))
        if len(weights) != len(views):
            raise ValueError("view_weights length != number of views")
    else:
        weights = [1.0] * len(views)
    if context_view is not None:
        views.append(np.asarray(context_view, dtype=np.float64))
        cam_list.append(context_cam)
        weights.append(1.0)
    if not views:
        raise ValueError("no views to fit")
    weights = np.asarray(weights)
    if weights.sum() <= 0:
        raise ValueError("view weights sum to zero")

    if cfg.warm_start is not None:
        problems = validate(cfg.warm_start)
        if problems:
            raise ValueError(f"warm_start cloud invalid: {problems[0]}")
        cloud0 = cfg.warm_start.copy()
    else:
        cloud0 = init_from_views(x0_views, cams, cfg.n_splats, cfg.seed,
                                 background=cfg.background)

    p = {
        "positions": cloud0.positions.copy(),
        "scales_u": _softplus_inv(cloud0.scales),
        "rotations": cloud0.rotations.copy(),
        "opacities": np.clip(cloud0.opacities, _OP_EPS, 1.0 - _OP_EPS),
        "colors": cloud0.colors.copy(),
    }
    lr = {"positions": cfg.lr["positions"], "scales_u": cfg.lr["scales"],
          "rotations": cfg.lr["rotations"], "opacities": cfg.lr["opacities"],
          "colors": cfg.lr["colors"]}
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v2 = {k: np.zeros_like(v) for k, v in p.items()}

    cloud = _params_to_cloud(p, cloud0.scene_scale)
    parts, grads, mse = _objective(cloud, views, cam_list, weights, cfg)
    loss = sum(parts)
    if not np.isfinite(loss):
        raise DivergenceError("initial loss is not finite", cloud, 0)
    best = (parts, mse)
    iterations_used = 0
    converged = mse < cfg.converge_mse

    for it in range(1, cfg.iterations + 1):
        if converged:
            break
        # map parameter-space grads into the raw optimization variables
        g = {
            "positions": grads["positions"],
            "scales_u": grads["scales"] * _dsoftplus(p["scales_u"]),
            "rotations": grads["rotations"],
            "opacities": grads["opacities"],
            "colors": grads["colors"],
        }
        step = {}
        for k in p:
            m[k] = _BETA1 * m[k] + (1 - _BETA1) * g[k]
            v2[k] = _BETA2 * v2[k] + (1 - _BETA2) * g[k] ** 2
            mh = m[k] / (1 - _BETA1 ** it)
            vh = v2[k] / (1 - _BETA2 ** it)
            step[k] = lr[k] * mh / (np.sqrt(vh) + _ADAM_EPS)
        if all(np.all(s == 0.0) for s in step.values()):
            iterations_used = it
            break                              # zero objective: fixed point

        scale_fac = 1.0
        accepted = False
        for _ in range(3):                     # monotone fallback: halve twice
            trial = {k: p[k] - scale_fac * step[k] for k in p}
            trial_cloud = _params_to_cloud(trial, cloud0.scene_scale)
            trial_loss, trial_mse = _loss_only(trial_cloud, views, cam_list,
                                               weights, cfg)
            if not np.isfinite(trial_loss):
                raise DivergenceError(f"loss diverged at iteration {it}",
                                      cloud, it)
            if trial_loss <= loss:
                accepted = True
                break
            scale_fac *= 0.5
        iterations_used = it
        if not accepted:
            continue                           # keep state; moments advance

        p = trial
        p["opacities"] = np.clip(p["opacities"], _OP_EPS, 1.0 - _OP_EPS)
        p["colors"] = np.clip(p["colors"], 0.0, 1.0)
        p["rotations"] = p["rotations"] / np.linalg.norm(
            p["rotations"], axis=1, keepdims=True)
        cloud = _params_to_cloud(p, cloud0.scene_scale)
        parts, grads, mse = _objective(cloud, views, cam_list, weights, cfg)
        loss = sum(parts)
        best = (parts, mse)
        converged = mse < cfg.converge_mse

    (l_mse, l_percep, l_reg), mse = best
    return FitResult(cloud=cloud, mse=l_mse, percep=l_percep, reg=l_reg,
                     iterations_used=iterations_used, converged=converged)


def _dsoftplus(u):
    return 1.0 / (1.0 + np.exp(-u))


# ------------------------------------------------------------- reconstruct

def reconstruct(xt_views, t: int, context_view, x0_tilde_views,
                cams, context_cam, sched: NoiseSchedule,
                cfg: FitConfig) -> FitResult:
    """Produce a cloud conditioned on the current diffusion state.

    Target images are the per-view clean estimates x0_tilde (diffusion value
    convention, [-1,1]), weighted by the clamped SNR at t; the context view
    enters at weight 1. When x0_tilde_views is None (prior ablation) the
    targets fall back to xt rescaled by 1/sqrt(abar) — the zero-noise-estimate
    limit.
    """
    xt_views = np.asarray(xt_views, dtype=np.float64)
    sched.check_step(t)
    if x0_tilde_views is None:
        targets = xt_views / np.sqrt(sched.abar(t))
    else:
        targets = np.asarray(x0_tilde_views, dtype=np.float64)
        if targets.shape != xt_views.shape:
            raise ValueError("x0_tilde_views shape mismatch")
    targets01 = np.clip((targets + 1.0) / 2.0, 0.0, 1.0)
    ctx01 = None
    if context_view is not None:
        ctx01 = np.clip((np.asarray(context_view) + 1.0) / 2.0, 0.0, 1.0)
    w = snr_weight(t, sched, cfg.snr_clamp)
    cfg_run = replace(cfg, view_weights=np.full(len(targets01), w))
    return fit(targets01, cams, ctx01, context_cam, cfg_run)
