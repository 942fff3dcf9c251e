"""Three-stage training orchestration.

Stage 1 fits the trajectory model to the RGB pose track.  Stage 2 trains
the scene field on RGB rays alone.  Stage 3 refines scene and trajectory
jointly: depth frames have no measured pose, so their rays are built
in-graph from the trajectory model (or from per-frame free poses for the
initialization ablations) and depth residuals push gradients through ray
geometry into the pose parameters.  Depth supervision ramps in linearly
from zero so an immature field cannot corrupt near-correct poses.

Batches mix RGB and depth rays proportionally to frame counts within one
optimizer step; strict per-modality alternation is available as a config
switch and is equivalent in expectation.
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from . import geom, synth, timepose, field, metrics, diffgeom
from .diffcore import graph
from .diffcore.nn import ParamStore
from .diffcore.optim import AdamState, SgdState, adam_step, sgd_step
from .diffcore import serialize
from .field import RadianceFieldGrid, FieldConfig, RenderConfig
from .geom import Pose
from .timepose import TimePoseModel, TimePoseConfig


@dataclass(frozen=True)
class StageConfig:
    iters_bootstrap: int = 2500
    iters_joint: int = 1500
    lr_theta: float = 5e-3
    # pose-net steps are norm-clipped, so lr_phi is roughly meters of pose
    # motion per step divided by the net's output sensitivity (~1e2 m per
    # unit of parameter norm); far smaller than lr_theta by design since
    # poses start near-correct and aggressive updates destabilize rendering
    lr_phi: float = 2e-6
    lr_emb: float = 5e-3
    batch_rays: int = 128
    lambda_color: float = 1.0
    lambda_depth_max: float = 0.1
    ramp_frac: float = 0.3
    phi_delay_frac: float = -1.0   # <0: hold poses until the ramp completes
    phi_momentum: float = 0.9
    phi_clip: float = 1.0          # grad-norm cap for pose steps, 0 = off
    strict_alternation: bool = False
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.iters_bootstrap < 1 or self.iters_joint < 1:
            raise ValueError("iteration counts must be positive")
        if self.batch_rays < 2:
            raise ValueError("need at least 2 rays per batch")
        if not 0 < self.ramp_frac <= 1:
            raise ValueError(f"ramp_frac must be in (0, 1], got {self.ramp_frac}")
        if self.phi_delay_frac > 1:
            raise ValueError(f"phi_delay_frac must be <= 1, got {self.phi_delay_frac}")
        if not 0 <= self.phi_momentum < 1:
            raise ValueError(f"phi_momentum must be in [0, 1), got {self.phi_momentum}")
        if self.phi_clip < 0:
            raise ValueError(f"phi_clip must be >= 0, got {self.phi_clip}")
        if min(self.lr_theta, self.lr_phi, self.lr_emb) <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_color < 0 or self.lambda_depth_max < 0:
            raise ValueError("loss weights must be non-negative")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    field: FieldConfig
    render: RenderConfig
    timepose: TimePoseConfig
    stage: StageConfig
    val_every: int = 10        # every n-th RGB frame held out for image metrics
    eval_depth_stride: int = 4  # every n-th depth frame scored for depth metrics
    bounds_pad: float = 2.0

    def __post_init__(self):
        if self.val_every < 2:
            raise ValueError("val_every must be >= 2 so training keeps frames")
        if self.eval_depth_stride < 1:
            raise ValueError("eval_depth_stride must be >= 1")

    def to_dict(self) -> dict:
        return {
            "field": asdict(self.field),
            "render": asdict(self.render),
            "timepose": asdict(self.timepose),
            "stage": asdict(self.stage),
            "val_every": self.val_every,
            "eval_depth_stride": self.eval_depth_stride,
            "bounds_pad": self.bounds_pad,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        f = dict(d["field"])
        f["trunk"] = tuple(f["trunk"])
        f["color"] = tuple(f["color"])
        r = dict(d["render"])
        r["background"] = tuple(r["background"])
        t = dict(d["timepose"])
        t["hidden"] = tuple(t["hidden"])
        t["skip_at"] = tuple(t["skip_at"])
        return ExperimentConfig(
            field=FieldConfig(**f), render=RenderConfig(**r),
            timepose=TimePoseConfig(**t), stage=StageConfig(**d["stage"]),
            val_every=d.get("val_every", 10),
            eval_depth_stride=d.get("eval_depth_stride", 4),
            bounds_pad=d.get("bounds_pad", 2.0))

    @staticmethod
    def from_json(s: str) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(s))


class RunReport:
    """Loss curves, depth-pose error track, final metrics, wall clock."""

    def __init__(self, variant: str = "full", config: dict | None = None):
        self.variant = variant
        self.config = config or {}
        self.curves: dict[str, list] = {}
        self.pose_track: list = []
        self.wall_clock: dict[str, float] = {}
        self.final: metrics.MetricsBundle | None = None
        self.view_rows: list = []
        self.notes: dict = {}
        self.artifacts: dict = {}  # in-memory handles, never serialized

    def log_curve(self, stage: str, step: int, values: dict):
        curve = self.curves.setdefault(stage, [])
        if curve and step <= curve[-1]["step"]:
            raise ValueError(f"non-monotone step {step} after {curve[-1]['step']} in '{stage}'")
        curve.append({"step": int(step), **{k: float(v) for k, v in values.items()}})

    def log_pose(self, step: int, rot_deg: float, trans_m: float):
        if self.pose_track and step <= self.pose_track[-1]["step"]:
            raise ValueError(f"non-monotone pose-track step {step}")
        self.pose_track.append({"step": int(step), "rot_deg": float(rot_deg),
                                "trans_m": float(trans_m)})

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "config": self.config,
            "curves": self.curves,
            "pose_track": self.pose_track,
            "wall_clock_s": self.wall_clock,
            "final_metrics": None if self.final is None else self.final.to_dict(),
            "lpips": "n/a",
            "notes": self.notes,
        }

    def save(self, outdir):
        import os
        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, "report.json"), "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
        for stage, curve in self.curves.items():
            if not curve:
                continue
            keys = list(curve[0])
            with open(os.path.join(outdir, f"curve_{stage}.csv"), "w") as fh:
                fh.write(",".join(keys) + "\n")
                for row in curve:
                    fh.write(",".join(repr(row[k]) for k in keys) + "\n")
        if self.pose_track:
            with open(os.path.join(outdir, "pose_track.csv"), "w") as fh:
                fh.write("step,rot_deg,trans_m\n")
                for row in self.pose_track:
                    fh.write(f"{row['step']},{row['rot_deg']!r},{row['trans_m']!r}\n")
        if self.view_rows:
            metrics.write_view_csv(os.path.join(outdir, "views.csv"),
                                   [r[1] for r in self.view_rows],
                                   [r[0] for r in self.view_rows])


def save_metrics_json(path, bundle: metrics.MetricsBundle, extra: dict | None = None):
    doc = {k: (None if isinstance(v, float) and np.isnan(v) else v)
           for k, v in bundle.to_dict().items()}
    doc["lpips"] = "n/a"
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")))
        fh.write("\n")


# ---------------------------------------------------------------------------
# scene extent helpers


def suggest_bounds(ds: synth.AsyncDataset, pad: float = 2.0) -> np.ndarray:
    """Axis-aligned field bounds from scene extent and camera track."""
    extent = float(ds.provenance["scene"]["extent"])
    zs = [p.x[2] for p in ds.rgb_poses]
    half = extent / 2.0 + pad
    return np.array([[-half, -half, -pad], [half, half, max(zs) + pad]])


def suggest_far(ds: synth.AsyncDataset, slack: float = 1.15) -> float:
    mx = max(float(r.max()) for r in ds.depth_rasters)
    return slack * mx


# ---------------------------------------------------------------------------
# ray banks: precomputed per-frame rays and targets


class RayBank:
    """Flattened supervision data with a train/val RGB split.

    RGB poses are trusted inputs, so their world-space rays are baked once.
    Depth rays stay in camera space; world placement happens in-graph from
    whichever pose source the stage uses.
    """

    def __init__(self, ds: synth.AsyncDataset, val_every: int):
        if len(ds.rgb_t) == 0 or len(ds.depth_t) == 0:
            raise ValueError("dataset has an empty stream")
        self.ds = ds
        self.cam_dirs = geom.camera_dirs(ds.intrinsics)      # (P, 3) camera frame
        self.n_pix = self.cam_dirs.shape[0]

        idx = np.arange(len(ds.rgb_t))
        self.val_idx = idx[val_every // 2::val_every]
        self.train_idx = np.setdiff1d(idx, self.val_idx)
        if self.train_idx.size == 0:
            raise ValueError("val split consumed every RGB frame")

        self.rgb_origins = np.stack([ds.rgb_poses[i].x for i in self.train_idx])
        self.rgb_dirs = np.stack([geom.quat_rotate(ds.rgb_poses[i].q, self.cam_dirs)
                                  for i in self.train_idx])  # (F, P, 3)
        self.rgb_targets = np.stack([ds.rgb_images[i].reshape(-1, 3)
                                     for i in self.train_idx]).astype(np.float64)
        self.depth_targets = np.stack([r.reshape(-1) for r in ds.depth_rasters]).astype(np.float64)
        self.n_rgb_frames = self.train_idx.size
        self.n_depth_frames = len(ds.depth_t)

    def sample_rgb(self, n: int, rng) -> tuple:
        fi = rng.integers(0, self.n_rgb_frames, n)
        pi = rng.integers(0, self.n_pix, n)
        return (self.rgb_origins[fi], self.rgb_dirs[fi, pi],
                self.rgb_targets[fi, pi], self.train_idx[fi])

    def sample_depth(self, n: int, rng) -> tuple:
        fi = rng.integers(0, self.n_depth_frames, n)
        pi = rng.integers(0, self.n_pix, n)
        return fi, pi, self.cam_dirs[pi], self.depth_targets[fi, pi]


# ---------------------------------------------------------------------------
# depth pose sources


class PhiPoseSource:
    """Depth poses parameterized by the trajectory model composed with the
    rig extrinsic; gradients reach the model through quaternion algebra."""

    def __init__(self, model: TimePoseModel, extrinsic: Pose, depth_t: np.ndarray):
        self.model = model
        self.extrinsic = extrinsic
        self.depth_t = np.asarray(depth_t, dtype=np.float64)
        self.store = model.store
        out = (self.depth_t < model.t_min) | (self.depth_t > model.t_max)
        if out.any():
            warnings.warn(f"{int(out.sum())} depth timestamps outside the trajectory "
                          "model's span; they are clamped to its endpoints")

    def poses_nodes(self, frame_idx: np.ndarray) -> tuple:
        uniq, inv = np.unique(frame_idx, return_inverse=True)
        x, q, _ = self.model.forward_nodes(self.depth_t[uniq])
        b = uniq.size
        eq = diffgeom.as_batch_const(self.extrinsic.q, b)
        ex = diffgeom.as_batch_const(self.extrinsic.x, b)
        qd = diffgeom.quat_mul_nodes(q, eq)
        xd = x + diffgeom.quat_rotate_nodes(q, ex)
        return graph.gather(xd, inv), graph.gather(qd, inv)

    def current_poses(self) -> list:
        return [geom.rgb_to_depth_pose(self.model.forward(t), self.extrinsic)
                for t in self.depth_t]


class FreePoseSource:
    """Independent per-frame depth poses (initialization ablations)."""

    def __init__(self, seeds: list):
        self.store = ParamStore()
        self.store.add("x", np.stack([p.x for p in seeds]))
        self.store.add("q", np.stack([p.q for p in seeds]))

    def poses_nodes(self, frame_idx: np.ndarray) -> tuple:
        x = graph.gather(self.store["x"], frame_idx)
        q = diffgeom.normalize_rows(graph.gather(self.store["q"], frame_idx))
        return x, q

    def current_poses(self) -> list:
        xs, qs = self.store["x"].value, self.store["q"].value
        return [Pose(q, x) for q, x in zip(qs, xs)]


def source_pose_errors(source, gt_poses: list) -> tuple:
    rots, trans = [], []
    for est, gt in zip(source.current_poses(), gt_poses):
        r, tr = geom.pose_error(est, gt)
        rots.append(r)
        trans.append(tr)
    return float(np.mean(rots)), float(np.mean(trans))


# ---------------------------------------------------------------------------
# losses


def _mse(pred, target: np.ndarray):
    d = pred - graph.constant(target)
    return graph.nmean(d * d)


def _masked_depth_mse(pred, target: np.ndarray, valid: np.ndarray):
    d = pred - graph.constant(target)
    m = valid.astype(np.float64)
    return graph.nsum(d * d * graph.constant(m)) * (1.0 / m.sum())


def depth_weight_schedule(step: int, cfg: StageConfig) -> float:
    """Linear 0 -> lambda_depth_max over the first ramp_frac of stage 3."""
    if step < 0:
        raise ValueError("step must be >= 0")
    ramp_end = cfg.ramp_frac * cfg.iters_joint
    if ramp_end <= 0:
        return cfg.lambda_depth_max
    return cfg.lambda_depth_max * min(step / ramp_end, 1.0)


# ---------------------------------------------------------------------------
# stage 2: RGB bootstrap


def bootstrap_train(grid: RadianceFieldGrid, ds: synth.AsyncDataset,
                    xcfg: ExperimentConfig, report: RunReport | None = None) -> RunReport:
    """Photometric-only field training; depth data is never touched."""
    cfg = xcfg.stage
    bank = RayBank(ds, xcfg.val_every)
    rng = np.random.default_rng(cfg.seed)
    report = report or RunReport()
    theta = [n for n in grid.store.names() if n != "appearance"]
    opt_theta = AdamState(lr=cfg.lr_theta)
    opt_emb = AdamState(lr=cfg.lr_emb)
    has_emb = "appearance" in grid.store

    t0 = time.perf_counter()
    for i in range(cfg.iters_bootstrap):
        o, d, target, fi = bank.sample_rgb(cfg.batch_rays, rng)
        grid.store.zero_grad()
        out, _ = field.render_rays_nodes(grid, o, d, xcfg.render, img_ids=fi, rng=rng)
        loss = cfg.lambda_color * _mse(out["color"], target)
        graph.backward(loss)
        adam_step(grid.store, opt_theta, theta)
        if has_emb:
            adam_step(grid.store, opt_emb, ["appearance"])
        if i % cfg.log_every == 0 or i == cfg.iters_bootstrap - 1:
            report.log_curve("bootstrap", i, {"total": loss.value, "rgb": loss.value})
    report.wall_clock["bootstrap"] = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# stage 3: joint refinement


def joint_optimize(grid: RadianceFieldGrid, source, ds: synth.AsyncDataset,
                   xcfg: ExperimentConfig, report: RunReport | None = None,
                   train_phi: bool = True, use_depth: bool = True,
                   track_gt: list | None = None) -> RunReport:
    """Mixed RGB+depth optimization of the field and the pose source.

    `source` is a PhiPoseSource (the method) or FreePoseSource (ablations);
    train_phi=False freezes it, use_depth=False drops the depth term (the
    "w/o depth input" ablation).  `track_gt` enables the pose-error track
    against evaluation-only ground truth.
    """
    if grid is None or source is None:
        raise ValueError("joint refinement needs a bootstrapped field and a pose source")
    cfg = xcfg.stage
    bank = RayBank(ds, xcfg.val_every)
    rng = np.random.default_rng(cfg.seed + 1)
    report = report or RunReport()

    theta = [n for n in grid.store.names() if n != "appearance"]
    opt_theta = AdamState(lr=cfg.lr_theta)
    opt_emb = AdamState(lr=cfg.lr_emb)
    # SGD for the pose net: Adam's per-parameter normalization turns batch
    # noise into fixed-size pose jitter regardless of residual scale, which
    # random-walks the trajectory.  SGD steps shrink with the residuals, so
    # near-correct poses stay put.
    opt_phi = SgdState(lr=cfg.lr_phi, momentum=cfg.phi_momentum, clip=cfg.phi_clip)
    delay = cfg.phi_delay_frac if cfg.phi_delay_frac >= 0 else cfg.ramp_frac
    phi_start = int(round(delay * cfg.iters_joint))
    has_emb = "appearance" in grid.store

    n_frames = bank.n_rgb_frames + bank.n_depth_frames
    n_depth = int(round(cfg.batch_rays * bank.n_depth_frames / n_frames))
    n_depth = min(max(n_depth, 1), cfg.batch_rays - 1) if use_depth else 0
    n_rgb = cfg.batch_rays - n_depth

    frozen_rays = None
    if not train_phi:
        # poses are constants for the whole stage; bake world rays once
        poses = source.current_poses()
        frozen_rays = (np.stack([p.x for p in poses]),
                       np.stack([geom.quat_rotate(p.q, bank.cam_dirs) for p in poses]))

    t0 = time.perf_counter()
    for i in range(cfg.iters_joint):
        lam_d = depth_weight_schedule(i, cfg) if use_depth else 0.0
        do_rgb, do_depth = True, use_depth and lam_d > 0 and n_depth > 0
        if cfg.strict_alternation and do_depth:
            do_rgb = i % 2 == 0
            do_depth = not do_rgb

        grid.store.zero_grad()
        source.store.zero_grad()
        terms = {}
        loss = None
        did_depth = False
        if do_rgb:
            o, d, target, fi = bank.sample_rgb(max(n_rgb, 1), rng)
            out, _ = field.render_rays_nodes(grid, o, d, xcfg.render, img_ids=fi, rng=rng)
            rgb_term = cfg.lambda_color * _mse(out["color"], target)
            terms["rgb"] = float(rgb_term.value)
            loss = rgb_term
        if do_depth:
            fi, pi, cam_d, target = bank.sample_depth(n_depth, rng)
            valid = target > 0
            if valid.any():
                if frozen_rays is None:
                    x_r, q_r = source.poses_nodes(fi)
                    d_world = diffgeom.quat_rotate_nodes(q_r, graph.constant(cam_d))
                    o_world = x_r
                else:
                    o_world = graph.constant(frozen_rays[0][fi])
                    d_world = graph.constant(frozen_rays[1][fi, pi])
                out_d, _ = field.render_rays_nodes(grid, o_world, d_world, xcfg.render, rng=rng)
                depth_term = lam_d * _masked_depth_mse(out_d["depth"], target, valid)
                terms["depth"] = float(depth_term.value)
                loss = depth_term if loss is None else loss + depth_term
                did_depth = True
        if loss is None:
            continue
        graph.backward(loss)
        adam_step(grid.store, opt_theta, theta)
        if has_emb:
            adam_step(grid.store, opt_emb, ["appearance"])
        if train_phi and did_depth and i >= phi_start:
            # poses hold still while the depth ramp re-shapes the geometry;
            # moving them against a half-formed field only injects noise
            sgd_step(source.store, opt_phi)

        if i % cfg.log_every == 0 or i == cfg.iters_joint - 1:
            vals = {"total": float(loss.value), "lambda_depth": lam_d, **terms}
            # same batch re-weighted at the final lambda: a ramp-independent
            # progress series (the ramped total necessarily grows early on)
            if "depth" in terms and lam_d > 0:
                vals["total_final_weight"] = (terms.get("rgb", 0.0)
                                              + cfg.lambda_depth_max / lam_d * terms["depth"])
            report.log_curve("joint", i, vals)
            if track_gt is not None:
                rot, tr = source_pose_errors(source, track_gt)
                report.log_pose(i, rot, tr)
    report.wall_clock["joint"] = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# evaluation


def evaluate(grid: RadianceFieldGrid, ds: synth.AsyncDataset, xcfg: ExperimentConfig,
             source=None) -> tuple:
    """(MetricsBundle, per-view rows) on held-out RGB views and depth frames.

    Depth is rendered at ground-truth depth poses so the score isolates
    scene geometry; pose quality is reported separately from `source`.
    """
    bank = RayBank(ds, xcfg.val_every)
    k = ds.intrinsics
    rows = []
    psnrs, ssims = [], []
    for i in bank.val_idx:
        res = field.render_image(grid, ds.rgb_poses[i], k, xcfg.render, chunk=2048)
        gt = ds.rgb_images[i].astype(np.float64)
        p = metrics.psnr(res.color, gt)
        s = metrics.ssim(res.color, gt)
        psnrs.append(p)
        ssims.append(s)
        rows.append((f"rgb_{i}", metrics.MetricsBundle(psnr=p, ssim=s)))

    if ds.gt_depth_poses is None:
        raise ValueError("evaluation needs ground-truth depth poses")
    f_all, g_all, m_all = [], [], []
    n_valid = n_total = 0
    for j in range(0, len(ds.depth_t), xcfg.eval_depth_stride):
        res = field.render_image(grid, ds.gt_depth_poses[j], k, xcfg.render, chunk=2048)
        gt_d = ds.depth_rasters[j].astype(np.float64)
        mask = (gt_d > 0) & res.depth_valid(xcfg.render.opacity_valid_min) & (res.depth > 0)
        n_valid += int(mask.sum())
        n_total += mask.size
        if mask.any():
            f_all.append(res.depth[mask])
            g_all.append(gt_d[mask])
    if not f_all:
        raise ValueError("no valid depth pixels to evaluate")
    rmse, rmse_log, d1, d2, d3 = metrics.depth_metrics(
        np.concatenate(f_all), np.concatenate(g_all),
        np.ones(sum(len(f) for f in f_all), dtype=bool))

    rot = tr = float("nan")
    if source is not None:
        rot, tr = source_pose_errors(source, ds.gt_depth_poses)
    bundle = metrics.MetricsBundle(
        psnr=float(np.mean(psnrs)), ssim=float(np.mean(ssims)),
        depth_rmse=rmse, depth_rmse_log=rmse_log, delta1=d1, delta2=d2, delta3=d3,
        rot_err_deg=rot, trans_err_m=tr, valid_frac=n_valid / max(n_total, 1))
    return bundle, rows


# ---------------------------------------------------------------------------
# stage 1 wrapper and ablations


def fit_stage1(ds: synth.AsyncDataset, xcfg: ExperimentConfig) -> tuple:
    """Trajectory model from the RGB pose track; returns (model, report dict)."""
    samples = list(zip(ds.rgb_t.tolist(), ds.rgb_poses))
    return timepose.fit_timepose(samples, xcfg.timepose)


VARIANTS = ("full", "no_depth", "no_joint", "rgb_init", "linear_interp_init")


def _seed_poses(ds: synth.AsyncDataset, model: TimePoseModel, how: str) -> list:
    if how == "rgb_init":
        seeds = []
        for t in ds.depth_t:
            i = int(np.argmin(np.abs(ds.rgb_t - t)))
            seeds.append(geom.rgb_to_depth_pose(ds.rgb_poses[i], ds.extrinsic))
        return seeds
    if how == "linear_interp_init":
        keys = list(zip(ds.rgb_t.tolist(), ds.rgb_poses))
        return [geom.rgb_to_depth_pose(timepose.linear_interp_pose(keys, t), ds.extrinsic)
                for t in ds.depth_t]
    if how == "phi":
        return [geom.rgb_to_depth_pose(model.forward(t), ds.extrinsic) for t in ds.depth_t]
    raise ValueError(f"unknown seeding '{how}'")


def run_ablation(ds: synth.AsyncDataset, variant: str, xcfg: ExperimentConfig,
                 stage1: TimePoseModel | None = None,
                 stage2_state: dict | None = None) -> RunReport:
    """One pipeline variant end to end; stage-1/2 artifacts are reused when
    given so paired comparisons share their starting point."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}', expected one of {VARIANTS}")
    report = RunReport(variant=variant, config=xcfg.to_dict())
    t_all = time.perf_counter()

    if stage1 is None:
        stage1, s1_report = fit_stage1(ds, xcfg)
        report.notes["stage1"] = {k: v for k, v in s1_report.items() if k != "curve"}
    if stage2_state is None:
        grid = RadianceFieldGrid(suggest_bounds(ds, xcfg.bounds_pad), xcfg.field,
                                 n_images=len(ds.rgb_t),
                                 rng=np.random.default_rng(xcfg.stage.seed))
        bootstrap_train(grid, ds, xcfg, report)
    else:
        grid = RadianceFieldGrid.from_state(stage2_state)

    if variant in ("rgb_init", "linear_interp_init"):
        source = FreePoseSource(_seed_poses(ds, stage1, variant))
    else:
        source = PhiPoseSource(stage1, ds.extrinsic, ds.depth_t)
    rot0, tr0 = source_pose_errors(source, ds.gt_depth_poses)
    report.notes["init_pose_err"] = {"rot_deg": rot0, "trans_m": tr0}

    joint_optimize(grid, source, ds, xcfg, report,
                   train_phi=(variant != "no_joint"),
                   use_depth=(variant != "no_depth"),
                   track_gt=ds.gt_depth_poses)

    bundle, rows = evaluate(grid, ds, xcfg, source)
    report.final = bundle
    report.view_rows = rows
    report.wall_clock["total"] = time.perf_counter() - t_all
    report.artifacts = {"grid": grid, "source": source, "stage1": stage1}
    return report


# ---------------------------------------------------------------------------
# checkpoint plumbing


def save_stage3(path, grid: RadianceFieldGrid, source):
    state = {f"field/{k}": v for k, v in grid.to_state().items()}
    if isinstance(source, PhiPoseSource):
        state.update({f"tp/{k}": v for k, v in source.model.to_state().items()})
        state["meta/source"] = np.array([0.0])
    else:
        state["free/x"] = source.store["x"].value
        state["free/q"] = source.store["q"].value
        state["meta/source"] = np.array([1.0])
    serialize.write_checkpoint(path, state)


def load_stage3(path, extrinsic: Pose, depth_t: np.ndarray) -> tuple:
    state = serialize.read_checkpoint(path)
    grid = RadianceFieldGrid.from_state(
        {k[len("field/"):]: v for k, v in state.items() if k.startswith("field/")})
    if int(state["meta/source"][0]) == 0:
        model = TimePoseModel.from_state(
            {k[len("tp/"):]: v for k, v in state.items() if k.startswith("tp/")})
        source = PhiPoseSource(model, extrinsic, depth_t)
    else:
        seeds = [Pose(q, x) for q, x in zip(state["free/q"], state["free/x"])]
        source = FreePoseSource(seeds)
    return grid, source
