"""Multi-view reverse sampling, baseline and 3D-consistent.

Both samplers run the same reverse loop; the single difference is the source
of the clean estimate used in the posterior update at each step — the raw
denoiser output, or renders of a cloud reconstructed from it. Keeping one
loop makes that swap auditable: forcing the refined sampler's source back to
"denoiser" must reproduce the baseline bit for bit.

State convention: diffusion runs on (V, H, W, 3) arrays in [-1, 1]; rendered
images live in [0, 1] and are mapped linearly at the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .reconstructor import DivergenceError, FitConfig, fit, reconstruct
from .renderer import render
from .schedule import NoiseSchedule, ddim_step, ddim_timesteps, ddpm_step
from .splat import SplatCloud, regularizer

__all__ = ["StepRecord", "TrajectoryLog", "SamplerError", "sample_baseline",
           "sample_3d_consistent", "compute_joint_loss",
           "consistency_residual", "make_oracle_denoiser"]


class SamplerError(RuntimeError):
    """Failure mid-trajectory; carries the log recorded so far."""

    def __init__(self, msg, log):
        super().__init__(msg)
        self.log = log


@dataclass
class StepRecord:
    t: int
    phase: str                                # "step" | "final"
    x_t: np.ndarray | None = None             # state entering this step
    x0_tilde: np.ndarray | None = None        # denoiser estimate
    x0_hat: np.ndarray | None = None          # renders of the step's cloud
    cloud: SplatCloud | None = None
    residual_to_gt: np.ndarray | None = None  # per-view mean |err| if gt known
    consistency: float | None = None


@dataclass
class TrajectoryLog:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.t >= self.records[-1].t:
            raise ValueError(
                f"t must strictly decrease: {self.records[-1].t} -> {rec.t}")
        self.records.append(rec)

    def refinement_records(self) -> list[StepRecord]:
        return [r for r in self.records if r.phase == "step" and r.cloud is not None]

    def to_csv(self) -> str:
        nv = max((len(r.residual_to_gt) for r in self.records
                  if r.residual_to_gt is not None), default=0)
        head = "t,phase" + "".join(f",residual_v{i}" for i in range(nv)) + ",consistency"
        lines = [head]
        for r in self.records:
            row = [str(r.t), r.phase]
            res = list(r.residual_to_gt) if r.residual_to_gt is not None else []
            row += [f"{v:.10e}" for v in res] + [""] * (nv - len(res))
            row.append("" if r.consistency is None else f"{r.consistency:.10e}")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def save_contact_sheets(self, out_dir) -> list:
        """One PNG per record: rows x_t / x0_tilde / x0_hat, columns views."""
        from pathlib import Path
        from .images import contact_sheet, save_png
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for k, r in enumerate(self.records):
            rows = []
            for arr in (r.x_t, r.x0_tilde, r.x0_hat):
                if arr is not None:
                    rows.append([np.clip((v + 1.0) / 2.0, 0, 1) for v in arr])
            if not rows:
                continue
            path = out_dir / f"step_{k:03d}_t{r.t:04d}.png"
            save_png(path, contact_sheet(rows))
            written.append(path)
        return written


def make_oracle_denoiser(cfg):
    """Adapt an OracleDenoiserConfig to the sampler's denoiser callable."""
    from .denoiser import oracle_predict

    def fn(xt, t, sched, context=None):
        return oracle_predict(xt, t, sched, cfg, context=context)
    return fn


def _per_view_residual(est, gt_views):
    if gt_views is None:
        return None
    return np.abs(est - gt_views).mean(axis=(1, 2, 3))


def _reverse_loop(denoiser, context_view, context_cam, cams, sched,
                  steps, seed, *, method="ddim", recon_cfg=None,
                  first_iterations=None, final_iterations=None,
                  refine_below_t=None, gt_views=None, store_states=True,
                  _source="render"):
    if steps < 1 or steps > sched.T:
        raise ValueError(f"need 1 <= steps <= T, got {steps}")
    ts = ddim_timesteps(sched.T, steps)
    if method == "ddpm" and steps != sched.T:
        raise ValueError("ddpm stepping requires steps == T (unit stride)")
    if method not in ("ddim", "ddpm"):
        raise ValueError(f"unknown method {method!r}")
    if _source == "render" and recon_cfg is None:
        raise ValueError("reconstruction config required for refined sampling")

    V = len(cams)
    H, W = cams[0].height, cams[0].width
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((V, H, W, 3))
    log = TrajectoryLog()
    # caller-supplied warm start seeds the first refinement; afterwards the
    # running cloud carries over step to step
    cloud = recon_cfg.warm_start if recon_cfg is not None else None
    last_tilde = None

    for t, t_prev in ts:
        try:
            out = denoiser(x, t, sched, context_view)
        except Exception as e:
            raise SamplerError(f"denoiser failed at t={t}", log) from e
        x0_tilde = out.x0_hat
        last_tilde = x0_tilde

        refine_here = (_source == "render"
                       and (refine_below_t is None or t <= refine_below_t))
        x0_hat = None
        if refine_here:
            cfg_step = replace(recon_cfg, warm_start=cloud)
            if cloud is None and first_iterations is not None:
                cfg_step = replace(cfg_step, iterations=first_iterations)
            try:
                res = reconstruct(x, t, context_view, x0_tilde, cams,
                                  context_cam, sched, cfg_step)
            except DivergenceError as e:
                raise SamplerError(f"reconstruction diverged at t={t}", log) from e
            cloud = res.cloud
            x0_hat = np.stack([
                render(cloud, c, background=recon_cfg.background).color
                for c in cams]) * 2.0 - 1.0
            x0_used = x0_hat
        else:
            x0_used = x0_tilde
        x0_used = np.clip(x0_used, -1.0, 1.0)

        rec = StepRecord(
            t=t, phase="step",
            x_t=x.copy() if store_states else None,
            x0_tilde=x0_tilde.copy() if store_states else None,
            x0_hat=x0_hat.copy() if (store_states and x0_hat is not None) else None,
            cloud=cloud.copy() if (refine_here and cloud is not None) else None,
            residual_to_gt=_per_view_residual(x0_used, gt_views),
        )
        log.append(rec)

        if method == "ddim":
            x = ddim_step(x, x0_used, t, t_prev, sched)
        else:
            x = ddpm_step(x, x0_used, t, sched, rng)

    if _source == "render":
        # terminal reconstruction conditioned on the reached t=0 state and
        # the last clean estimate, equally weighted
        targets01 = np.clip((np.concatenate([x, last_tilde]) + 1.0) / 2.0, 0, 1)
        ctx01 = None
        if context_view is not None:
            ctx01 = np.clip((np.asarray(context_view) + 1.0) / 2.0, 0, 1)
        cfg_fin = replace(recon_cfg, warm_start=cloud,
                          view_weights=np.ones(2 * V))
        if final_iterations is not None:
            cfg_fin = replace(cfg_fin, iterations=final_iterations)
        try:
            res = fit(targets01, list(cams) * 2, ctx01, context_cam, cfg_fin)
        except DivergenceError as e:
            raise SamplerError("final reconstruction diverged", log) from e
        cloud = res.cloud
        final_renders = np.stack([
            render(cloud, c, background=recon_cfg.background).color
            for c in cams]) * 2.0 - 1.0
        log.append(StepRecord(
            t=0, phase="final",
            x_t=x.copy() if store_states else None,
            x0_hat=final_renders.copy() if store_states else None,
            cloud=cloud.copy(),
            residual_to_gt=_per_view_residual(final_renders, gt_views)))
        return cloud, final_renders, log

    log.append(StepRecord(
        t=0, phase="final",
        x_t=x.copy() if store_states else None,
        residual_to_gt=_per_view_residual(x, gt_views)))
    return None, x, log


def sample_baseline(denoiser, context_view, cams, sched: NoiseSchedule,
                    steps: int = 50, seed: int = 0, *, context_cam=None,
                    method: str = "ddim", gt_views=None, store_states=True):
    """Plain multi-view reverse sampling; no 3D model in the loop."""
    _, views, log = _reverse_loop(
        denoiser, context_view, context_cam, cams, sched, steps, seed,
        method=method, gt_views=gt_views, store_states=store_states,
        _source="denoiser")
    return views, log


def sample_3d_consistent(denoiser, recon_cfg: FitConfig, context_view, cams,
                         sched: NoiseSchedule, steps: int = 50, seed: int = 0,
                         *, context_cam=None, method: str = "ddim",
                         first_iterations=None, final_iterations=None,
                         refine_below_t=None, gt_views=None,
                         store_states=True, _source="render"):
    """Trajectory-refined sampling: each posterior update is driven by renders
    of a cloud fitted to the running clean estimates (warm-started step to
    step), and the returned cloud comes from a terminal reconstruction.

    `_source` exists for instrumentation: forcing "denoiser" disables every
    3D call and must reproduce sample_baseline exactly.
    """
    cloud, views, log = _reverse_loop(
        denoiser, context_view, context_cam, cams, sched, steps, seed,
        method=method, recon_cfg=recon_cfg, first_iterations=first_iterations,
        final_iterations=final_iterations, refine_below_t=refine_below_t,
        gt_views=gt_views, store_states=store_states, _source=_source)
    if _source != "render":
        return views, log
    return cloud, log


def compute_joint_loss(eps_true, eps_hat, renders, gt_views, cloud: SplatCloud,
                       lambda1: float = 1.0, lambda2: float = 1.0,
                       lambda3: float = 100.0, *, w_opacity: float = 1e-4,
                       w_aniso: float = 1e-3, kappa: float = 10.0) -> dict:
    """Diffusion noise MSE plus the splat-fitting objective, as one breakdown."""
    from .reconstructor import _graddiff_multiscale
    eps_true = np.asarray(eps_true, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_true.shape != eps_hat.shape:
        raise ValueError("eps shapes differ")
    renders = np.asarray(renders, dtype=np.float64)
    gt_views = np.asarray(gt_views, dtype=np.float64)
    if renders.shape != gt_views.shape:
        raise ValueError("render/gt shapes differ")
    l_eps = float(np.mean((eps_true - eps_hat) ** 2))
    l_mse = float(np.mean((renders - gt_views) ** 2))
    l_percep = float(np.mean([
        _graddiff_multiscale(r, g)[0] for r, g in zip(renders, gt_views)]))
    reg_val, _ = regularizer(cloud, w_op=w_opacity, w_aniso=w_aniso, kappa=kappa)
    l_reg = reg_val / max(len(cloud), 1)
    total = l_eps + lambda1 * l_mse + lambda2 * l_percep + lambda3 * l_reg
    return {"eps": l_eps, "mse": lambda1 * l_mse,
            "percep": lambda2 * l_percep, "reg": lambda3 * l_reg,
            "total": total}


def consistency_residual(views, cams, budget: FitConfig | None = None) -> float:
    """How well one scene explains the views: photometric MSE of a fresh
    fixed-budget fit. Views are render-convention [0,1]; exact duplicate
    (view, camera) pairs are collapsed first so repetition cannot change
    the answer.
    """
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 4 or len(views) != len(cams):
        raise ValueError("views must be (V,H,W,3) aligned with cams")
    if len(views) < 1:
        raise ValueError("need at least one view")
    seen = set()
    keep_views, keep_cams = [], []
    for img, cam in zip(views, cams):
        key = (img.tobytes(), cam.rotation.tobytes(), cam.translation.tobytes(),
               cam.fx, cam.fy, cam.cx, cam.cy)
        if key in seen:
            continue
        seen.add(key)
        keep_views.append(img)
        keep_cams.append(cam)
    if budget is None:
        budget = FitConfig(n_splats=48, iterations=120, seed=0)
    budget = replace(budget, lambda1=1.0, lambda2=0.0, lambda3=0.0,
                     view_weights=None, warm_start=None)
    res = fit(np.stack(keep_views), keep_cams, None, None, budget)
    resid = np.mean([
        (render(res.cloud, c, background=budget.background).color - v) ** 2
        for v, c in zip(keep_views, keep_cams)])
    return float(resid)
