"""Stand-in denoisers.

Two prediction heads share the x0/eps consistency contract:

* an oracle that knows the clean target views and corrupts them with a
  controllable per-view perturbation (smooth warp or low-frequency additive
  field) — a synthetic stressor for multi-view inconsistency;
* the exact posterior mean under a 1-D Gaussian-mixture prior, used to
  validate the reverse process statistically.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.special import logsumexp

from .schedule import NoiseSchedule, one_step_x0

__all__ = ["DenoiserOutput", "OracleDenoiserConfig", "oracle_predict",
           "GaussianMixture", "gm_predict_x0"]

WARP_CELL_DIV = 8       # displacement control grid: one cell per H/8 pixels


@dataclass(frozen=True)
class DenoiserOutput:
    eps_hat: np.ndarray   # (V,H,W,3)
    x0_hat: np.ndarray    # (V,H,W,3), equals one_step_x0(xt, eps_hat, t) exactly


@dataclass(frozen=True)
class OracleDenoiserConfig:
    gt_views: np.ndarray          # (V,H,W,3) clean targets in [-1,1]
    perturb_sigma: float = 0.0    # image-value units
    perturb_mode: str = "warp"    # "warp" | "additive-lowfreq"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "gt_views",
                           np.asarray(self.gt_views, dtype=np.float64))
        if self.gt_views.ndim != 4 or self.gt_views.shape[-1] != 3:
            raise ValueError(f"gt_views must be (V,H,W,3), got {self.gt_views.shape}")
        if self.perturb_sigma < 0:
            raise ValueError("perturb_sigma must be >= 0")
        if self.perturb_mode not in ("warp", "additive-lowfreq"):
            raise ValueError(f"unknown perturb_mode {self.perturb_mode!r}")


def _lowfreq_field(rng, H, W, channels):
    """Smooth random field, unit-ish scale before normalization."""
    ch = max(2, H // WARP_CELL_DIV + 1)
    cw = max(2, W // WARP_CELL_DIV + 1)
    coarse = rng.standard_normal((ch, cw, channels))
    ii = np.linspace(0.0, ch - 1.0, H)
    jj = np.linspace(0.0, cw - 1.0, W)
    coords = np.stack(np.meshgrid(ii, jj, indexing="ij"))
    out = np.empty((H, W, channels))
    for k in range(channels):
        out[:, :, k] = map_coordinates(coarse[:, :, k], coords, order=3,
                                       mode="nearest")
    return out


def _perturb_view(img, rng, sigma, mode):
    H, W = img.shape[:2]
    if mode == "additive-lowfreq":
        field = _lowfreq_field(rng, H, W, 3)
        std = field.std()
        if std > 0:
            field *= sigma / std
        return img + field
    # warp: smooth displacement, sigma in image-value units maps to pixels
    # via the image extent so inconsistency grows with resolution
    disp = _lowfreq_field(rng, H, W, 2)
    std = disp.std()
    if std > 0:
        disp *= (sigma * min(H, W)) / std
    rr, cc = np.meshgrid(np.arange(H, dtype=np.float64),
                         np.arange(W, dtype=np.float64), indexing="ij")
    coords = np.stack([rr + disp[:, :, 0], cc + disp[:, :, 1]])
    out = np.empty_like(img)
    for c in range(3):
        out[:, :, c] = map_coordinates(img[:, :, c], coords, order=1,
                                       mode="nearest")
    return out


def oracle_predict(xt: np.ndarray, t: int, sched: NoiseSchedule,
                   cfg: OracleDenoiserConfig, context=None) -> DenoiserOutput:
    """Per-view clean estimate = perturbed ground truth; eps back-solved.

    `context` is accepted (and ignored) so the call signature matches a
    conditional multi-view model. Deterministic in (cfg.seed, t, view index).
    """
    xt = np.asarray(xt, dtype=np.float64)
    if xt.shape != cfg.gt_views.shape:
        raise ValueError(f"xt shape {xt.shape} != gt_views {cfg.gt_views.shape}")
    sched.check_step(t)
    if cfg.perturb_sigma == 0.0:
        x0_deg = cfg.gt_views.copy()
    else:
        x0_deg = np.empty_like(cfg.gt_views)
        for v in range(len(cfg.gt_views)):
            rng = np.random.default_rng([cfg.seed, t, v])
            x0_deg[v] = _perturb_view(cfg.gt_views[v], rng, cfg.perturb_sigma,
                                      cfg.perturb_mode)
    ab = sched.abar(t)
    eps_hat = (xt - np.sqrt(ab) * x0_deg) / np.sqrt(1.0 - ab)
    # re-derive so the (eps_hat, x0_hat) pair is consistent to the last bit
    x0_hat = one_step_x0(xt, eps_hat, t, sched)
    return DenoiserOutput(eps_hat=eps_hat, x0_hat=x0_hat)


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        for name in ("weights", "means", "sigmas"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        k = len(self.weights)
        if k == 0 or len(self.means) != k or len(self.sigmas) != k:
            raise ValueError("weights/means/sigmas must be equal-length and non-empty")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        if np.any(self.sigmas < 0):
            raise ValueError("sigmas must be >= 0")


def gm_predict_x0(xt, t: int, sched: NoiseSchedule,
                  mixture: GaussianMixture) -> np.ndarray:
    """Exact E[x0 | xt] when x0 is mixture-distributed and xt = √ᾱ x0 + √(1-ᾱ) ε.

    Marginally xt | component i ~ N(√ᾱ μ_i, ᾱσ_i² + 1-ᾱ); responsibilities in
    log space, posterior mean per component by Gaussian conditioning.
    """
    sched.check_step(t)
    xt = np.asarray(xt, dtype=np.float64)
    ab = sched.abar(t)
    ra = np.sqrt(ab)
    var_t = ab * mixture.sigmas ** 2 + (1.0 - ab)          # (K,)
    d = xt[..., None] - ra * mixture.means                 # (...,K)
    with np.errstate(divide="ignore"):                     # zero weights ok
        log_w = np.log(mixture.weights)
    log_r = log_w - 0.5 * np.log(var_t) - 0.5 * d * d / var_t
    log_r -= logsumexp(log_r, axis=-1, keepdims=True)
    cond_mean = mixture.means + (ra * mixture.sigmas ** 2 / var_t) * d
    return np.sum(np.exp(log_r) * cond_mean, axis=-1)
