"""Experiment runner: scene synthesis, A/B sampling, meshing, evaluation.

Output layout under the chosen root (fixed so tooling can rely on it):

    scene/                   cloud.ply, cameras.txt, views.npy, PNGs, meta.json
    runs/<mode>/<seed>/      trajectory.csv, final_views.npy, sheet.png,
                             summary.json, cloud.ply (refined runs)
    runs/ab_summary.csv      paired table when both modes run
    mesh/                    mesh.ply, report.json
    eval/                    report.json, report.csv
    report/                  report.md

Option precedence: command-line flag > SPLATDIFF_OUT (output root only)
> config file > built-in default. Nothing written contains timestamps, so
re-running a command with the same config is byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .camera import cameras_from_text, cameras_to_text, orthogonal_target_rig, spiral_path
from .denoiser import OracleDenoiserConfig
from .images import contact_sheet, save_png
from .meshing import extract_textured_mesh, save_mesh_ply
from .metrics import MetricReport, chamfer, fscore, normal_consistency, p2s, psnr, sample_mesh_points, ssim
from .reconstructor import FitConfig
from .renderer import render
from .sampler import SamplerError, consistency_residual, make_oracle_denoiser, sample_3d_consistent, sample_baseline
from .scenes import make_scene
from .schedule import make_linear_schedule
from .splat import load_ply, save_ply

BACKGROUND = (1.0, 1.0, 1.0)
ENV_OUT = "SPLATDIFF_OUT"
CONFIG_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    # scene
    shape: str = "blobs"
    n_splats: int = 32
    scene_seed: int = 0
    # camera rig
    image_size: int = 48
    rig_radius: float = 2.0
    n_novel: int = 12
    # diffusion schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # sampler
    steps: int = 12
    mode: str = "both"
    perturb_sigma: float = 0.05
    perturb_mode: str = "warp"
    seeds: tuple[int, ...] = (0, 1, 2)
    # reconstructor budgets
    recon_splats: int = 24
    recon_iterations: int = 12
    first_iterations: int = 40
    final_iterations: int = 60
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 100.0
    # consistency-residual fit budget
    residual_splats: int = 32
    residual_iterations: int = 80
    # meshing
    mesh_views: int = 36
    voxel_size: float = 0.01
    # output root (may be overridden by flag or env)
    out: str = "splatdiff_out"

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version}; "
                             f"this build reads version {CONFIG_VERSION}")
        if self.shape not in ("sphere", "blobs"):
            raise ValueError(f"unknown scene shape {self.shape!r}")
        if self.mode not in ("baseline", "refined", "both"):
            raise ValueError(f"mode must be baseline/refined/both, "
                             f"got {self.mode!r}")
        if not self.seeds:
            raise ValueError("seeds list is empty")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise ValueError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"config {path} is not valid JSON: {e}") from e
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"config {path} has unknown keys: {sorted(unknown)}")
    if "seeds" in data:
        data["seeds"] = tuple(int(s) for s in data["seeds"])
    cfg = ExperimentConfig(**data)
    cfg.validate()
    return cfg


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for f in fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[f.name] = tuple(v) if f.name == "seeds" else v
    if getattr(args, "out", None) is None and os.environ.get(ENV_OUT):
        overrides["out"] = os.environ[ENV_OUT]
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _float(x) -> float:
    return float(np.asarray(x, dtype=np.float64))


# ----------------------------------------------------------------- commands

def _scene_cameras(cfg: ExperimentConfig):
    targets = orthogonal_target_rig(radius=cfg.rig_radius, size=cfg.image_size)
    novel = spiral_path(cfg.n_novel, "training", radius=cfg.rig_radius,
                        size=cfg.image_size)
    return targets, novel


def cmd_make_scene(cfg: ExperimentConfig, errors: list) -> None:
    out = Path(cfg.out) / "scene"
    try:
        cloud = make_scene(cfg.shape, cfg.n_splats, cfg.scene_seed)
        targets, novel = _scene_cameras(cfg)
        cams = targets + novel
        views = np.stack([render(cloud, c, background=BACKGROUND).color
                          for c in cams])
        out.mkdir(parents=True, exist_ok=True)
        (out / "cloud.ply").write_bytes(save_ply(cloud))
        (out / "cameras.txt").write_text(cameras_to_text(cams))
        np.save(out / "views.npy", views)
        for i in range(len(targets)):
            save_png(out / f"target_{i:02d}.png", views[i])
        for i in range(len(novel)):
            save_png(out / f"novel_{i:02d}.png", views[len(targets) + i])
        _write_json(out / "meta.json", {
            "version": CONFIG_VERSION,
            "shape": cfg.shape,
            "n_splats": cfg.n_splats,
            "seed": cfg.scene_seed,
            "image_size": cfg.image_size,
            "n_targets": len(targets),
            "n_novel": len(novel),
            "radius": 0.5 if cfg.shape == "sphere" else None,
            "background": list(BACKGROUND),
        })
    except (ValueError, OSError) as e:
        errors.append({"command": "make-scene", "context": str(out),
                       "message": str(e)})


def _load_scene(out_root: Path):
    scene = out_root / "scene"
    if not scene.is_dir():
        raise FileNotFoundError(
            f"scene directory not found: {scene} (run make-scene first)")
    cloud = load_ply((scene / "cloud.ply").read_bytes())
    cams = cameras_from_text((scene / "cameras.txt").read_text())
    views = np.load(scene / "views.npy")
    meta = json.loads((scene / "meta.json").read_text())
    n_t = meta.get("n_targets", 4)
    return cloud, cams[:n_t], cams[n_t:], views, meta


def _run_one(mode: str, seed: int, cfg: ExperimentConfig, sched, cams,
             gt01) -> dict:
    gt_pm1 = gt01 * 2.0 - 1.0
    den = make_oracle_denoiser(OracleDenoiserConfig(
        gt_views=gt_pm1, perturb_sigma=cfg.perturb_sigma,
        perturb_mode=cfg.perturb_mode, seed=seed))
    fit_cfg = FitConfig(n_splats=cfg.recon_splats,
                        iterations=cfg.recon_iterations,
                        lambda1=cfg.lambda1, lambda2=cfg.lambda2,
                        lambda3=cfg.lambda3, background=BACKGROUND, seed=seed)
    if mode == "baseline":
        views, log = sample_baseline(den, None, cams, sched, steps=cfg.steps,
                                     seed=seed, gt_views=gt_pm1,
                                     store_states=False)
        views01 = np.clip((views + 1.0) / 2.0, 0.0, 1.0)
        cloud = None
    else:
        cloud, log = sample_3d_consistent(
            den, fit_cfg, None, cams, sched, steps=cfg.steps, seed=seed,
            first_iterations=cfg.first_iterations,
            final_iterations=cfg.final_iterations, gt_views=gt_pm1,
            store_states=False)
        views01 = np.stack([render(cloud, c, background=BACKGROUND).color
                            for c in cams])
    resid = consistency_residual(
        views01, cams,
        FitConfig(n_splats=cfg.residual_splats,
                  iterations=cfg.residual_iterations,
                  background=BACKGROUND, seed=0))
    per_view = [psnr(views01[v], gt01[v]) for v in range(len(cams))]
    return {"mode": mode, "seed": seed, "views01": views01, "cloud": cloud,
            "log": log, "residual": resid, "psnr_db": float(np.mean(per_view)),
            "per_view_psnr": per_view}


def cmd_sample(cfg: ExperimentConfig, errors: list) -> None:
    out_root = Path(cfg.out)
    try:
        _, targets, _, views, _ = _load_scene(out_root)
    except (OSError, ValueError, FileNotFoundError) as e:
        errors.append({"command": "sample", "context": str(out_root),
                       "message": str(e)})
        return
    gt01 = views[:len(targets)]
    sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    modes = ("baseline", "refined") if cfg.mode == "both" else (cfg.mode,)

    results: dict[tuple[str, int], dict] = {}
    for mode in modes:
        for seed in cfg.seeds:
            run_dir = out_root / "runs" / mode / str(seed)
            try:
                r = _run_one(mode, seed, cfg, sched, targets, gt01)
            except (SamplerError, ValueError, FloatingPointError) as e:
                errors.append({"command": "sample",
                               "context": f"{mode}/seed={seed}",
                               "message": str(e)})
                continue
            results[(mode, seed)] = r
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "trajectory.csv").write_text(r["log"].to_csv())
            np.save(run_dir / "final_views.npy", r["views01"])
            save_png(run_dir / "sheet.png",
                     contact_sheet([list(gt01), list(r["views01"])]))
            if r["cloud"] is not None:
                (run_dir / "cloud.ply").write_bytes(save_ply(r["cloud"]))
            _write_json(run_dir / "summary.json", {
                "mode": mode, "seed": seed,
                "consistency_residual": r["residual"],
                "psnr_db": r["psnr_db"],
                "per_view_psnr": r["per_view_psnr"],
            })

    if cfg.mode == "both":
        rows = []
        for seed in cfg.seeds:
            b = results.get(("baseline", seed))
            r = results.get(("refined", seed))
            if b is None or r is None:
                continue
            rows.append([seed, repr(b["residual"]), repr(r["residual"]),
                         int(r["residual"] < b["residual"]),
                         repr(b["psnr_db"]), repr(r["psnr_db"])])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "baseline_residual", "refined_residual",
                    "refined_lower", "baseline_psnr_db", "refined_psnr_db"])
        w.writerows(rows)
        (out_root / "runs").mkdir(parents=True, exist_ok=True)
        (out_root / "runs" / "ab_summary.csv").write_text(buf.getvalue())


def cmd_mesh(cfg: ExperimentConfig, errors: list, cloud_path=None) -> None:
    out_root = Path(cfg.out)
    mesh_dir = out_root / "mesh"
    try:
        if cloud_path is None:
            candidates = [out_root / "runs" / "refined" / str(s) / "cloud.ply"
                          for s in cfg.seeds]
            candidates.append(out_root / "scene" / "cloud.ply")
            cloud_path = next((c for c in candidates if c.is_file()), None)
            if cloud_path is None:
                raise FileNotFoundError(
                    f"no cloud.ply found under {out_root} "
                    f"(run make-scene or sample first)")
        cloud = load_ply(Path(cloud_path).read_bytes())
        mesh = extract_textured_mesh(
            cloud, n_views=cfg.mesh_views, voxel_size=cfg.voxel_size,
            background=BACKGROUND, radius=cfg.rig_radius)
        mesh_dir.mkdir(parents=True, exist_ok=True)
        save_mesh_ply(mesh, mesh_dir / "mesh.ply")
        report = {"source": str(cloud_path),
                  "n_vertices": mesh.n_vertices,
                  "n_triangles": mesh.n_triangles,
                  "voxel_size": cfg.voxel_size,
                  "n_views": cfg.mesh_views}
        meta_path = out_root / "scene" / "meta.json"
        if meta_path.is_file():
            meta = json.loads(meta_path.read_text())
            if meta.get("shape") == "sphere" and meta.get("radius"):
                r = np.linalg.norm(mesh.vertices, axis=1)
                report["mean_radial_error_m"] = _float(
                    np.abs(r - meta["radius"]).mean())
        _write_json(mesh_dir / "report.json", report)
    except (OSError, ValueError, FileNotFoundError) as e:
        errors.append({"command": "mesh", "context": str(cloud_path),
                       "message": str(e)})


def _load_eval_side(path: Path):
    """A directory with any of cloud.ply / mesh.ply / *views.npy."""
    from .meshing import load_mesh_ply
    if not path.is_dir():
        raise FileNotFoundError(f"eval input is not a directory: {path}")
    side = {"cloud": None, "mesh": None, "views": None}
    if (path / "cloud.ply").is_file():
        side["cloud"] = load_ply((path / "cloud.ply").read_bytes())
    if (path / "mesh.ply").is_file():
        side["mesh"] = load_mesh_ply(path / "mesh.ply")
    for name in ("final_views.npy", "views.npy"):
        if (path / name).is_file():
            side["views"] = np.load(path / name)
            break
    if all(v is None for v in side.values()):
        raise ValueError(f"nothing evaluable in {path} "
                         f"(need cloud.ply, mesh.ply, or views)")
    return side


def cmd_eval(cfg: ExperimentConfig, errors: list, pred=None, gt=None) -> None:
    out_root = Path(cfg.out)
    pred_path = Path(pred) if pred else out_root / "scene"
    gt_path = Path(gt) if gt else out_root / "scene"
    try:
        ps = _load_eval_side(pred_path)
        gs = _load_eval_side(gt_path)
        rep = MetricReport()
        if ps["cloud"] is not None and gs["cloud"] is not None:
            rep.cd_cm = chamfer(ps["cloud"].positions, gs["cloud"].positions)
            rep.fscore = fscore(ps["cloud"].positions, gs["cloud"].positions)
        if ps["mesh"] is not None and gs["mesh"] is not None:
            pts, _ = sample_mesh_points(ps["mesh"], 2000, seed=0)
            rep.p2s_cm = p2s(pts, gs["mesh"])
            rep.nc = normal_consistency(ps["mesh"], gs["mesh"], samples=2000)
        if ps["views"] is not None and gs["views"] is not None:
            k = min(len(ps["views"]), len(gs["views"]))
            vals = []
            for v in range(k):
                a = np.clip(ps["views"][v], 0.0, 1.0)
                b = np.clip(gs["views"][v], 0.0, 1.0)
                vals.append({"view": v, "psnr_db": psnr(a, b),
                             "ssim": ssim(a, b)})
            rep.per_view = vals
            rep.psnr_db = float(np.mean([r["psnr_db"] for r in vals]))
            rep.ssim = float(np.mean([r["ssim"] for r in vals]))
        rep = MetricReport(**{k: getattr(rep, k) for k in rep._SCALARS},
                           per_view=rep.per_view)   # re-run range clamps
        eval_dir = out_root / "eval"
        eval_dir.mkdir(parents=True, exist_ok=True)
        (eval_dir / "report.json").write_text(rep.to_json() + "\n")
        (eval_dir / "report.csv").write_text(rep.to_csv())
    except (OSError, ValueError, FileNotFoundError) as e:
        errors.append({"command": "eval",
                       "context": f"pred={pred_path} gt={gt_path}",
                       "message": str(e)})


def cmd_report(cfg: ExperimentConfig, errors: list) -> None:
    out_root = Path(cfg.out)
    lines = ["# Experiment report", ""]
    ab = out_root / "runs" / "ab_summary.csv"
    try:
        if ab.is_file():
            rows = list(csv.DictReader(ab.read_text().splitlines()))
            if rows:
                wins = sum(int(r["refined_lower"]) for r in rows)
                d_psnr = np.mean([float(r["refined_psnr_db"])
                                  - float(r["baseline_psnr_db"])
                                  for r in rows])
                lines += [
                    "## A/B sampling",
                    "",
                    f"- paired seeds: {len(rows)}",
                    f"- refined residual lower in {wins}/{len(rows)} pairs",
                    f"- mean target-view PSNR gain: {d_psnr:+.3f} dB",
                    "",
                    "| seed | baseline residual | refined residual | baseline PSNR | refined PSNR |",
                    "|---|---|---|---|---|",
                ]
                for r in rows:
                    lines.append(
                        f"| {r['seed']} | {float(r['baseline_residual']):.3e} "
                        f"| {float(r['refined_residual']):.3e} "
                        f"| {float(r['baseline_psnr_db']):.2f} "
                        f"| {float(r['refined_psnr_db']):.2f} |")
                lines.append("")
        mesh_rep = out_root / "mesh" / "report.json"
        if mesh_rep.is_file():
            m = json.loads(mesh_rep.read_text())
            lines += ["## Mesh", ""]
            lines += [f"- {k}: {m[k]}" for k in sorted(m)]
            lines.append("")
        eval_rep = out_root / "eval" / "report.json"
        if eval_rep.is_file():
            e = json.loads(eval_rep.read_text())
            lines += ["## Metrics", ""]
            lines += [f"- {k}: {e[k]}" for k in MetricReport._SCALARS]
            lines.append("")
        if lines[-1] != "":
            lines.append("")
        report_dir = out_root / "report"
        report_dir.mkdir(parents=True, exist_ok=True)
        text = "\n".join(lines)
        (report_dir / "report.md").write_text(text)
        print(text)
    except (OSError, ValueError, KeyError) as e:
        errors.append({"command": "report", "context": str(out_root),
                       "message": str(e)})


# --------------------------------------------------------------- arg parsing

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (see ExperimentConfig)")
    p.add_argument("--out", help="output root directory")
    for f in fields(ExperimentConfig):
        if f.name in ("version", "out", "seeds"):
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                       type=type(f.default), default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=None)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="splatdiff",
        description="3D-consistent diffusion sampling experiments on "
                    "splat scenes")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("make-scene", "sample", "mesh", "eval", "report"):
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name == "mesh":
            p.add_argument("--cloud", help="explicit cloud.ply to mesh")
        if name == "eval":
            p.add_argument("--pred", help="prediction directory")
            p.add_argument("--gt", help="ground-truth directory")
    args = parser.parse_args(argv)

    errors: list[dict] = []
    try:
        cfg = _resolve_config(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    if args.command == "make-scene":
        cmd_make_scene(cfg, errors)
    elif args.command == "sample":
        cmd_sample(cfg, errors)
    elif args.command == "mesh":
        cmd_mesh(cfg, errors, cloud_path=args.cloud)
    elif args.command == "eval":
        cmd_eval(cfg, errors, pred=args.pred, gt=args.gt)
    elif args.command == "report":
        cmd_report(cfg, errors)

    marker = Path(cfg.out) / "errors.json"
    if errors:
        marker.parent.mkdir(parents=True, exist_ok=True)
        _write_json(marker, errors)
        for err in errors:
            print(f"error [{err['command']}] {err['context']}: "
                  f"{err['message']}", file=sys.stderr)
        return 1
    if marker.is_file():
        marker.unlink()
    return 0


if __name__ == "__main__":
    sys.exit(main())
