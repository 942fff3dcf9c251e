"""Training pipeline tests: schedules, ray banks, pose sources, stage wiring.

Full-scale convergence behavior lives in the acceptance suite; here the
runs are tiny and assert structural properties (what moves, what stays
frozen, what round-trips) rather than reconstruction quality.
"""
from __future__ import annotations

import numpy as np
import pytest

from asrf import geom, synth, timepose, pipeline
from asrf.geom import Intrinsics, Pose
from asrf.synth import SceneSpec, TrajectorySpec, ResampleProtocol
from asrf.field import FieldConfig, RenderConfig, RadianceFieldGrid
from asrf.timepose import TimePoseConfig, TimePoseModel
from asrf.pipeline import (ExperimentConfig, FreePoseSource, PhiPoseSource,
                           RayBank, RunReport, StageConfig, bootstrap_train,
                           depth_weight_schedule, evaluate, fit_stage1,
                           joint_optimize, load_stage3, run_ablation,
                           save_stage3, source_pose_errors, suggest_bounds,
                           suggest_far, _seed_poses, VARIANTS)


@pytest.fixture(scope="module")
def tiny_ds():
    k = Intrinsics(fx=20.0, fy=20.0, cx=8.0, cy=8.0, width=16, height=16)
    ext = Pose(geom.quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), 0.01),
               np.array([0.05, 0.0, 0.0]))
    return synth.make_dataset(
        SceneSpec(seed=1, extent=40.0, n_boxes=2, box_height=(2.0, 6.0)),
        TrajectorySpec(kind="simple", duration_s=8.0, rate_hz=25.0,
                       altitude=(13.0, 15.0), legs=2, pitch_deg=-55.0),
        ResampleProtocol(mode="fixed", rgb_stride=10, x_pct=30.0),
        k, ext, seed=0)


def tiny_xcfg(ds, iters_joint=40, **stage_kw):
    kw = dict(iters_bootstrap=30, iters_joint=iters_joint, batch_rays=64,
              log_every=10)
    kw.update(stage_kw)
    return ExperimentConfig(
        field=FieldConfig(nx=1, ny=1, trunk=(16, 16), color=(12,), pos_freqs=3,
                          dir_freqs=2, emb_dim=2),
        render=RenderConfig(near=1.0, far=suggest_far(ds), n_coarse=12, n_fine=8),
        timepose=TimePoseConfig(levels=3, base_resolution=4, iters=150, seed=0),
        stage=StageConfig(**kw))


def fresh_grid(ds, xcfg, seed=0):
    return RadianceFieldGrid(suggest_bounds(ds), xcfg.field, n_images=len(ds.rgb_t),
                             rng=np.random.default_rng(seed))


class TestDepthSchedule:
    def test_linear_ramp_endpoints_and_midpoint(self):
        cfg = StageConfig(iters_joint=1000, lambda_depth_max=0.4, ramp_frac=0.5)
        assert depth_weight_schedule(0, cfg) == 0.0
        assert depth_weight_schedule(250, cfg) == pytest.approx(0.2)
        assert depth_weight_schedule(500, cfg) == 0.4
        assert depth_weight_schedule(999, cfg) == 0.4

    def test_full_length_ramp(self):
        cfg = StageConfig(iters_joint=200, lambda_depth_max=1.0, ramp_frac=1.0)
        assert depth_weight_schedule(100, cfg) == pytest.approx(0.5)
        assert depth_weight_schedule(200, cfg) == 1.0

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError, match="step"):
            depth_weight_schedule(-1, StageConfig())


class TestConfigs:
    def test_stage_validation(self):
        with pytest.raises(ValueError, match="iteration"):
            StageConfig(iters_joint=0)
        with pytest.raises(ValueError, match="batch"):
            StageConfig(batch_rays=1)
        with pytest.raises(ValueError, match="ramp_frac"):
            StageConfig(ramp_frac=0.0)
        with pytest.raises(ValueError, match="phi_delay"):
            StageConfig(phi_delay_frac=1.5)
        with pytest.raises(ValueError, match="phi_momentum"):
            StageConfig(phi_momentum=1.0)
        with pytest.raises(ValueError, match="phi_clip"):
            StageConfig(phi_clip=-0.1)
        with pytest.raises(ValueError, match="learning"):
            StageConfig(lr_phi=0.0)
        with pytest.raises(ValueError, match="weights"):
            StageConfig(lambda_depth_max=-1.0)

    def test_experiment_json_round_trip(self, tiny_ds):
        xc = tiny_xcfg(tiny_ds)
        back = ExperimentConfig.from_json(xc.to_json())
        assert back.to_dict() == xc.to_dict()
        assert back.stage == xc.stage
        assert back.render == xc.render

    def test_val_every_validation(self, tiny_ds):
        xc = tiny_xcfg(tiny_ds)
        with pytest.raises(ValueError, match="val_every"):
            ExperimentConfig(field=xc.field, render=xc.render, timepose=xc.timepose,
                             stage=xc.stage, val_every=1)


class TestRayBank:
    def test_val_split_disjoint_and_centered(self, tiny_ds):
        bank = RayBank(tiny_ds, val_every=5)
        n = len(tiny_ds.rgb_t)
        assert np.array_equal(bank.val_idx, np.arange(n)[2::5])
        assert np.intersect1d(bank.val_idx, bank.train_idx).size == 0
        assert bank.val_idx.size + bank.train_idx.size == n

    def test_rgb_samples_trace_back_to_frames(self, tiny_ds):
        bank = RayBank(tiny_ds, val_every=5)
        o, d, target, fids = bank.sample_rgb(32, np.random.default_rng(0))
        for j in range(32):
            pose = tiny_ds.rgb_poses[fids[j]]
            assert np.array_equal(o[j], pose.x)
            dirs = geom.quat_rotate(pose.q, bank.cam_dirs)
            hit = np.all(dirs == d[j], axis=1)
            assert hit.any()
            px = tiny_ds.rgb_images[fids[j]].reshape(-1, 3)[hit]
            assert np.any(np.all(px == target[j], axis=1))

    def test_depth_samples_stay_in_camera_frame(self, tiny_ds):
        bank = RayBank(tiny_ds, val_every=5)
        fi, pi, cam_d, target = bank.sample_depth(32, np.random.default_rng(1))
        assert np.array_equal(cam_d, bank.cam_dirs[pi])
        want = np.array([tiny_ds.depth_rasters[f].reshape(-1)[p]
                         for f, p in zip(fi, pi)])
        assert np.array_equal(target, want)

    def test_same_rng_same_batch(self, tiny_ds):
        bank = RayBank(tiny_ds, val_every=5)
        a = bank.sample_rgb(16, np.random.default_rng(7))
        b = bank.sample_rgb(16, np.random.default_rng(7))
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


class TestPoseSources:
    def test_phi_source_matches_composed_forward(self, tiny_ds):
        model, _ = fit_stage1(tiny_ds, tiny_xcfg(tiny_ds))
        src = PhiPoseSource(model, tiny_ds.extrinsic, tiny_ds.depth_t)
        poses = src.current_poses()
        for j in (0, 3, len(poses) - 1):
            want = geom.rgb_to_depth_pose(model.forward(tiny_ds.depth_t[j]),
                                          tiny_ds.extrinsic)
            r, t = geom.pose_error(poses[j], want)
            assert r < 1e-12 and t < 1e-12

    def test_phi_nodes_agree_with_current_poses_on_duplicates(self, tiny_ds):
        model, _ = fit_stage1(tiny_ds, tiny_xcfg(tiny_ds))
        src = PhiPoseSource(model, tiny_ds.extrinsic, tiny_ds.depth_t)
        idx = np.array([2, 0, 2, 5, 0])
        x, q = src.poses_nodes(idx)
        poses = src.current_poses()
        for row, f in enumerate(idx):
            assert np.allclose(x.value[row], poses[f].x, atol=1e-12)
            assert min(np.abs(q.value[row] - poses[f].q).max(),
                       np.abs(q.value[row] + poses[f].q).max()) < 1e-12

    def test_phi_source_warns_on_out_of_span_times(self, tiny_ds):
        model, _ = fit_stage1(tiny_ds, tiny_xcfg(tiny_ds))
        times = np.append(tiny_ds.depth_t, tiny_ds.depth_t[-1] + 100.0)
        with pytest.warns(UserWarning, match="clamped"):
            PhiPoseSource(model, tiny_ds.extrinsic, times)

    def test_free_source_normalizes_rows_in_graph(self, tiny_ds):
        seeds = [tiny_ds.gt_depth_poses[i] for i in range(4)]
        src = FreePoseSource(seeds)
        src.store["q"].value *= 3.0   # as if optimizer steps denormalized it
        _, q = src.poses_nodes(np.array([0, 2]))
        assert np.allclose(np.linalg.norm(q.value, axis=1), 1.0, atol=1e-12)
        r, _ = geom.pose_error(src.current_poses()[2], seeds[2])
        assert r < 1e-9


class TestJointWiring:
    def test_zero_depth_weight_is_pure_bootstrap(self, tiny_ds):
        """lambda_depth_max = 0 must reduce stage 3 to RGB-only training:
        the pose source never moves and no depth term is logged."""
        xc = tiny_xcfg(tiny_ds, iters_joint=20, lambda_depth_max=0.0)
        grid = fresh_grid(tiny_ds, xc)
        model, _ = fit_stage1(tiny_ds, xc)
        src = PhiPoseSource(model, tiny_ds.extrinsic, tiny_ds.depth_t)
        before = {n: src.store[n].value.copy() for n in src.store.names()}
        field_before = grid.store["t0/sigma/W"].value.copy()
        rep = joint_optimize(grid, src, tiny_ds, xc)
        for n, v in before.items():
            assert np.array_equal(src.store[n].value, v), n
        assert not np.array_equal(grid.store["t0/sigma/W"].value, field_before)
        assert all("depth" not in e for e in rep.curves["joint"])

    def test_use_depth_false_freezes_poses(self, tiny_ds):
        xc = tiny_xcfg(tiny_ds, iters_joint=16)
        grid = fresh_grid(tiny_ds, xc)
        model, _ = fit_stage1(tiny_ds, xc)
        src = PhiPoseSource(model, tiny_ds.extrinsic, tiny_ds.depth_t)
        before = {n: src.store[n].value.copy() for n in src.store.names()}
        joint_optimize(grid, src, tiny_ds, xc, use_depth=False)
        for n, v in before.items():
            assert np.array_equal(src.store[n].value, v), n

    def test_train_phi_false_freezes_free_poses(self, tiny_ds):
        xc = tiny_xcfg(tiny_ds, iters_joint=16, ramp_frac=0.25)
        grid = fresh_grid(tiny_ds, xc)
        src = FreePoseSource(list(tiny_ds.gt_depth_poses))
        xb, qb = src.store["x"].value.copy(), src.store["q"].value.copy()
        rep = joint_optimize(grid, src, tiny_ds, xc, train_phi=False)
        assert np.array_equal(src.store["x"].value, xb)
        assert np.array_equal(src.store["q"].value, qb)
        assert any("depth" in e for e in rep.curves["joint"])

    def test_missing_inputs_rejected(self, tiny_ds):
        xc = tiny_xcfg(tiny_ds)
        grid = fresh_grid(tiny_ds, xc)
        with pytest.raises(ValueError, match="pose source"):
            joint_optimize(grid, None, tiny_ds, xc)
        with pytest.raises(ValueError, match="bootstrapped"):
            joint_optimize(None, FreePoseSource(list(tiny_ds.gt_depth_poses)),
                           tiny_ds, xc)

    def test_oracle_poses_are_not_degraded(self, tiny_ds):
        """Stability invariant: injecting perfect depth poses, stage 3 must
        leave them within 0.1 m / 0.2 deg of where they started."""
        xc = tiny_xcfg(tiny_ds, iters_joint=150, ramp_frac=0.2)
        grid = fresh_grid(tiny_ds, xc)
        bootstrap_train(grid, tiny_ds, xc)
        src = FreePoseSource(list(tiny_ds.gt_depth_poses))
        joint_optimize(grid, src, tiny_ds, xc)
        rot, tr = source_pose_errors(src, tiny_ds.gt_depth_poses)
        assert rot < 0.2
        assert tr < 0.1

    def test_trajectory_poses_move_slowly(self, tiny_ds):
        """Norm-clipped pose steps bound drift through the trajectory net's
        output amplification; a short stage 3 must not walk the fitted poses
        by more than a small fraction of a degree or a few centimeters."""
        xc = tiny_xcfg(tiny_ds, iters_joint=150, ramp_frac=0.2)
        grid = fresh_grid(tiny_ds, xc)
        bootstrap_train(grid, tiny_ds, xc)
        model, _ = fit_stage1(tiny_ds, xc)
        src = PhiPoseSource(model, tiny_ds.extrinsic, tiny_ds.depth_t)
        start = src.current_poses()
        joint_optimize(grid, src, tiny_ds, xc)
        drift = [geom.pose_error(a, b) for a, b in zip(start, src.current_poses())]
        assert max(d[0] for d in drift) < 0.5
        assert max(d[1] for d in drift) < 0.05


class TestStagePersistence:
    def test_phi_stage3_round_trip(self, tiny_ds, tmp_path):
        xc = tiny_xcfg(tiny_ds)
        grid = fresh_grid(tiny_ds, xc)
        model, _ = fit_stage1(tiny_ds, xc)
        src = PhiPoseSource(model, tiny_ds.extrinsic, tiny_ds.depth_t)
        p = tmp_path / "s3.ckpt"
        save_stage3(p, grid, src)
        g2, s2 = load_stage3(p, tiny_ds.extrinsic, tiny_ds.depth_t)
        assert isinstance(s2, PhiPoseSource)
        for n in grid.store.names():
            assert np.array_equal(grid.store[n].value, g2.store[n].value), n
        for a, b in zip(src.current_poses(), s2.current_poses()):
            r, t = geom.pose_error(a, b)
            assert r < 1e-12 and t < 1e-12

    def test_free_stage3_round_trip(self, tiny_ds, tmp_path):
        xc = tiny_xcfg(tiny_ds)
        grid = fresh_grid(tiny_ds, xc)
        src = FreePoseSource(list(tiny_ds.gt_depth_poses))
        p = tmp_path / "s3f.ckpt"
        save_stage3(p, grid, src)
        _, s2 = load_stage3(p, tiny_ds.extrinsic, tiny_ds.depth_t)
        assert isinstance(s2, FreePoseSource)
        assert np.array_equal(s2.store["x"].value, src.store["x"].value)

    def test_run_report_round_trip(self, tmp_path):
        rep = RunReport(variant="full", config={"a": 1})
        rep.log_curve("joint", 0, {"total": 1.0})
        rep.log_curve("joint", 10, {"total": 0.5, "depth": 0.1})
        rep.log_pose(10, 0.4, 0.02)
        rep.save(tmp_path)
        assert (tmp_path / "report.json").exists()


class TestEvaluate:
    def test_untrained_grid_produces_complete_bundle(self, tiny_ds):
        xc = tiny_xcfg(tiny_ds)
        grid = fresh_grid(tiny_ds, xc)
        src = FreePoseSource(list(tiny_ds.gt_depth_poses))
        bundle, rows = evaluate(grid, tiny_ds, xc, src)
        assert np.isfinite(bundle.psnr)
        assert 0.0 <= bundle.valid_frac <= 1.0
        assert bundle.rot_err_deg < 1e-9 and bundle.trans_err_m < 1e-9
        assert rows and rows[0][0].startswith("rgb_")

    def test_missing_gt_depth_poses_rejected(self, tiny_ds):
        xc = tiny_xcfg(tiny_ds)
        grid = fresh_grid(tiny_ds, xc)
        saved = tiny_ds.gt_depth_poses
        tiny_ds.gt_depth_poses = None
        try:
            with pytest.raises(ValueError, match="ground-truth"):
                evaluate(grid, tiny_ds, xc)
        finally:
            tiny_ds.gt_depth_poses = saved


class TestSeeding:
    def test_rgb_init_picks_nearest_anchor(self, tiny_ds):
        seeds = _seed_poses(tiny_ds, None, "rgb_init")
        for j in (0, 5, len(tiny_ds.depth_t) - 1):
            i = int(np.argmin(np.abs(tiny_ds.rgb_t - tiny_ds.depth_t[j])))
            want = geom.rgb_to_depth_pose(tiny_ds.rgb_poses[i], tiny_ds.extrinsic)
            r, t = geom.pose_error(seeds[j], want)
            assert r < 1e-12 and t < 1e-12

    def test_linear_interp_matches_key_interpolation(self, tiny_ds):
        seeds = _seed_poses(tiny_ds, None, "linear_interp_init")
        keys = list(zip(tiny_ds.rgb_t.tolist(), tiny_ds.rgb_poses))
        j = 3
        want = geom.rgb_to_depth_pose(
            timepose.linear_interp_pose(keys, tiny_ds.depth_t[j]), tiny_ds.extrinsic)
        r, t = geom.pose_error(seeds[j], want)
        assert r < 1e-12 and t < 1e-12

    def test_unknown_labels_rejected(self, tiny_ds):
        with pytest.raises(ValueError, match="seeding"):
            _seed_poses(tiny_ds, None, "midpoint")
        with pytest.raises(ValueError, match="variant"):
            run_ablation(tiny_ds, "fancy", tiny_xcfg(tiny_ds))
        assert "full" in VARIANTS and len(VARIANTS) == 5


class TestSuggest:
    def test_far_is_slack_times_max_raster(self, tiny_ds):
        mx = max(float(r.max()) for r in tiny_ds.depth_rasters)
        assert suggest_far(tiny_ds) == pytest.approx(1.15 * mx, rel=1e-12)

    def test_bounds_contain_track_and_scene(self, tiny_ds):
        b = suggest_bounds(tiny_ds)
        assert b.shape == (2, 3)
        for p in tiny_ds.rgb_poses:
            assert np.all(p.x <= b[1] + 1e-9)
        assert b[0, 0] <= -20.0 and b[1, 0] >= 20.0
