"""Command-line entry point.

Subcommands cover the full experiment flow in order: gen, fit-timepose,
bootstrap, joint, eval, render, ablate.  Each takes a JSON config and an
output directory, and every run drops a provenance.json recording the
resolved config, seeds, and content hashes of its file inputs.

Config resolution: values come from the config file, overridden by
ASRF_* environment variables (ASRF_STAGE_ITERS_JOINT=500 targets
experiment.stage.iters_joint), overridden by repeated --set KEY=VALUE
flags using the same dotted paths.  --threads must act before numpy
loads, so this module defers all numeric imports into the handlers.

Exit codes: 0 success, 1 bad configuration or arguments, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys


class CliError(Exception):
    """Configuration or argument problem; maps to exit code 1."""


# ---------------------------------------------------------------------------
# config plumbing


def _parse_literal(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    cur = cfg
    for k in keys[:-1]:
        if not isinstance(cur.get(k), dict):
            cur[k] = {}
        cur = cur[k]
    cur[keys[-1]] = value


def apply_env_overrides(cfg: dict, environ=None) -> list:
    """ASRF_A_B_C=value sets cfg[a][b][c]; returns the applied assignments."""
    environ = os.environ if environ is None else environ
    applied = []
    for key in sorted(environ):
        if not key.startswith("ASRF_") or key == "ASRF_THREADS":
            continue
        dotted = key[len("ASRF_"):].lower().replace("_", ".")
        value = _parse_literal(environ[key])
        _set_path(cfg, dotted, value)
        applied.append(f"{dotted}={environ[key]}")
    return applied


def apply_flag_overrides(cfg: dict, pairs: list) -> list:
    applied = []
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--set expects KEY=VALUE, got '{pair}'")
        dotted, _, raw = pair.partition("=")
        _set_path(cfg, dotted.strip(), _parse_literal(raw))
        applied.append(pair)
    return applied


def load_config(path: str, set_flags: list) -> tuple:
    if not os.path.isfile(path):
        raise CliError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise CliError(f"config {path} is not valid JSON: {e}")
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must hold a JSON object")
    overrides = apply_env_overrides(cfg)
    overrides += apply_flag_overrides(cfg, set_flags)
    return cfg, overrides


def content_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_inputs(paths: list) -> dict:
    out = {}
    for p in paths:
        if os.path.isdir(p):
            for root, _, files in os.walk(p):
                for f in sorted(files):
                    fp = os.path.join(root, f)
                    out[os.path.relpath(fp, p)] = content_hash(fp)
        elif os.path.isfile(p):
            out[p] = content_hash(p)
    return out


def write_provenance(outdir: str, command: str, cfg: dict, overrides: list,
                     inputs: list):
    from . import __version__
    os.makedirs(outdir, exist_ok=True)
    doc = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "overrides": overrides,
        "input_hashes": hash_inputs(inputs),
    }
    with open(os.path.join(outdir, "provenance.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)


def _experiment_config(cfg: dict):
    from .pipeline import ExperimentConfig
    if "experiment" not in cfg:
        raise CliError("config needs an 'experiment' section for this command")
    try:
        return ExperimentConfig.from_dict(cfg["experiment"])
    except (KeyError, TypeError, ValueError) as e:
        raise CliError(f"bad experiment config: {e}")


def _require_file(path: str, what: str) -> str:
    if not path or not os.path.isfile(path):
        raise CliError(f"{what} not found: {path!r}")
    return path


# ---------------------------------------------------------------------------
# dataset construction from the config's "dataset" section


def _dataset_specs(cfg: dict):
    import numpy as np
    from . import synth, geom
    if "dataset" not in cfg:
        raise CliError("config needs a 'dataset' section for gen")
    d = cfg["dataset"]
    try:
        scene = synth.SceneSpec(**d.get("scene", {}))
        tr = d.get("trajectory", {})
        tr = dict(tr, altitude=tuple(tr.get("altitude", (28.0, 32.0))))
        traj = synth.TrajectorySpec(**tr)
        proto = synth.ResampleProtocol(**d.get("protocol", {}))
        k = geom.Intrinsics(**d.get("intrinsics", {
            "width": 64, "height": 64, "fx": 55.4, "fy": 55.4, "cx": 32.0, "cy": 32.0}))
        ext_row = d.get("extrinsic")
        if ext_row is None:
            ext = geom.Pose.identity()
        else:
            _, ext = geom.parse_pose_row([str(v) for v in ext_row])
        seed = int(d.get("seed", 0))
    except (TypeError, ValueError) as e:
        raise CliError(f"bad dataset config: {e}")
    return scene, traj, proto, k, ext, seed


def _load_dataset(path: str, need_gt: bool = False):
    from . import synth
    if not os.path.isdir(path):
        raise CliError(f"dataset directory not found: {path!r}")
    try:
        ds = synth.load_dataset(path)
        if need_gt:
            ds.gt_depth_poses = synth.load_gt_depth_poses(path)[1]
    except synth.DatasetError as e:
        raise CliError(f"cannot load dataset: {e}")
    return ds


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_gen(args) -> int:
    from . import synth
    cfg, overrides = load_config(args.config, args.set)
    scene, traj, proto, k, ext, seed = _dataset_specs(cfg)
    ds = synth.make_dataset(scene, traj, proto, k, ext, seed=seed)
    synth.save_dataset(ds, args.out)
    write_provenance(args.out, "gen", cfg, overrides, [args.config])
    print(f"wrote {len(ds.rgb_t)} RGB and {len(ds.depth_t)} depth frames to {args.out}")
    return 0


def cmd_fit_timepose(args) -> int:
    from . import pipeline
    from .diffcore import serialize
    cfg, overrides = load_config(args.config, args.set)
    xcfg = _experiment_config(cfg)
    ds = _load_dataset(args.data)
    model, rep = pipeline.fit_stage1(ds, xcfg)
    os.makedirs(args.out, exist_ok=True)
    serialize.write_checkpoint(os.path.join(args.out, "stage1.ckpt"), model.to_state())
    report = pipeline.RunReport("fit-timepose", xcfg.to_dict())
    for row in rep.pop("curve"):
        report.log_curve("timepose", row["step"],
                         {k: v for k, v in row.items() if k != "step"})
    report.notes["stage1"] = rep
    report.save(args.out)
    write_provenance(args.out, "fit-timepose", cfg, overrides, [args.config, args.data])
    holdout = f"{rep.get('holdout_rot_deg', float('nan')):.4f} deg / " \
              f"{rep.get('holdout_trans_m', float('nan')):.4f} m"
    print(f"stage 1 done; holdout error {holdout}; checkpoint in {args.out}")
    return 0


def cmd_bootstrap(args) -> int:
    import numpy as np
    from . import pipeline, field, report as figs
    from .diffcore import serialize
    cfg, overrides = load_config(args.config, args.set)
    xcfg = _experiment_config(cfg)
    ds = _load_dataset(args.data)
    grid = field.RadianceFieldGrid(pipeline.suggest_bounds(ds, xcfg.bounds_pad),
                                   xcfg.field, n_images=len(ds.rgb_t),
                                   rng=np.random.default_rng(xcfg.stage.seed))
    rep = pipeline.RunReport("bootstrap", xcfg.to_dict())
    pipeline.bootstrap_train(grid, ds, xcfg, rep)
    os.makedirs(args.out, exist_ok=True)
    serialize.write_checkpoint(os.path.join(args.out, "stage2.ckpt"), grid.to_state())
    rep.save(args.out)
    figs.loss_curves_figure(rep.curves, os.path.join(args.out, "loss_curves.png"))
    write_provenance(args.out, "bootstrap", cfg, overrides, [args.config, args.data])
    print(f"stage 2 done; final loss {rep.curves['bootstrap'][-1]['total']:.6f}; "
          f"checkpoint in {args.out}")
    return 0


def cmd_joint(args) -> int:
    import numpy as np
    from . import pipeline, field, timepose, report as figs
    from .diffcore import serialize
    cfg, overrides = load_config(args.config, args.set)
    xcfg = _experiment_config(cfg)
    ds = _load_dataset(args.data, need_gt=args.track_gt)
    s1 = _require_file(args.stage1, "stage-1 checkpoint (fit-timepose output)")
    s2 = _require_file(args.stage2, "stage-2 checkpoint (bootstrap output)")
    model = timepose.TimePoseModel.from_state(serialize.read_checkpoint(s1))
    grid = field.RadianceFieldGrid.from_state(serialize.read_checkpoint(s2))
    source = pipeline.PhiPoseSource(model, ds.extrinsic, ds.depth_t)
    rep = pipeline.RunReport("joint", xcfg.to_dict())
    pipeline.joint_optimize(grid, source, ds, xcfg, rep,
                            track_gt=ds.gt_depth_poses if args.track_gt else None)
    os.makedirs(args.out, exist_ok=True)
    pipeline.save_stage3(os.path.join(args.out, "stage3.ckpt"), grid, source)
    rep.save(args.out)
    figs.loss_curves_figure(rep.curves, os.path.join(args.out, "loss_curves.png"))
    if rep.pose_track:
        figs.pose_track_figure(rep.pose_track, os.path.join(args.out, "pose_track.png"))
    write_provenance(args.out, "joint", cfg, overrides,
                     [args.config, args.data, s1, s2])
    print(f"stage 3 done; checkpoint in {args.out}")
    return 0


def cmd_eval(args) -> int:
    from . import pipeline, report as figs
    cfg, overrides = load_config(args.config, args.set)
    xcfg = _experiment_config(cfg)
    ds = _load_dataset(args.data, need_gt=True)
    ckpt = _require_file(args.ckpt, "stage-3 checkpoint")
    grid, source = pipeline.load_stage3(ckpt, ds.extrinsic, ds.depth_t)
    bundle, rows = pipeline.evaluate(grid, ds, xcfg, source)
    os.makedirs(args.out, exist_ok=True)
    pipeline.save_metrics_json(os.path.join(args.out, "metrics.json"), bundle)
    from . import metrics as M
    M.write_view_csv(os.path.join(args.out, "views.csv"),
                     [r[1] for r in rows], [r[0] for r in rows])
    figs.trajectory_figure(ds.gt_depth_poses, source.current_poses(),
                           os.path.join(args.out, "trajectory.png"),
                           title="depth poses: estimate vs ground truth")
    write_provenance(args.out, "eval", cfg, overrides, [args.config, args.data, ckpt])
    print(bundle.to_json())
    return 0


def cmd_render(args) -> int:
    from . import pipeline, field, report as figs
    cfg, overrides = load_config(args.config, args.set)
    xcfg = _experiment_config(cfg)
    ds = _load_dataset(args.data, need_gt=True)
    ckpt = _require_file(args.ckpt, "checkpoint")
    from .diffcore import serialize
    state = serialize.read_checkpoint(ckpt)
    if any(k.startswith("field/") for k in state):
        grid, _ = pipeline.load_stage3(ckpt, ds.extrinsic, ds.depth_t)
    else:
        grid = field.RadianceFieldGrid.from_state(state)
    try:
        views = [int(v) for v in args.views.split(",")] if args.views else None
    except ValueError:
        raise CliError(f"--views expects comma-separated integers, got {args.views!r}")
    bank = pipeline.RayBank(ds, xcfg.val_every)
    views = list(bank.val_idx) if views is None else views
    os.makedirs(args.out, exist_ok=True)
    far = xcfg.render.far
    for i in views:
        if not 0 <= i < len(ds.rgb_t):
            raise CliError(f"view {i} out of range (dataset has {len(ds.rgb_t)} RGB frames)")
        res = field.render_image(grid, ds.rgb_poses[i], ds.intrinsics, xcfg.render)
        figs.view_pair_pngs(args.out, f"view{i:04d}", res.color, res.depth, vmax=far)
    write_provenance(args.out, "render", cfg, overrides, [args.config, args.data, ckpt])
    print(f"rendered {len(views)} view pairs to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from . import pipeline, report as figs
    from .diffcore import serialize
    from . import timepose
    cfg, overrides = load_config(args.config, args.set)
    xcfg = _experiment_config(cfg)
    ds = _load_dataset(args.data, need_gt=True)
    stage1 = None
    stage2_state = None
    if args.stage1:
        stage1 = timepose.TimePoseModel.from_state(
            serialize.read_checkpoint(_require_file(args.stage1, "stage-1 checkpoint")))
    if args.stage2:
        stage2_state = serialize.read_checkpoint(
            _require_file(args.stage2, "stage-2 checkpoint"))
    try:
        rep = pipeline.run_ablation(ds, args.variant, xcfg, stage1, stage2_state)
    except ValueError as e:
        raise CliError(str(e))
    os.makedirs(args.out, exist_ok=True)
    rep.save(args.out)
    pipeline.save_metrics_json(os.path.join(args.out, "metrics.json"), rep.final,
                               extra={"variant": args.variant})
    figs.loss_curves_figure(rep.curves, os.path.join(args.out, "loss_curves.png"))
    if rep.pose_track:
        figs.pose_track_figure(rep.pose_track, os.path.join(args.out, "pose_track.png"))
    src = rep.artifacts.get("source")
    if src is not None:
        figs.trajectory_figure(ds.gt_depth_poses, src.current_poses(),
                               os.path.join(args.out, "trajectory.png"),
                               title=f"{args.variant}: depth poses vs ground truth")
    pipeline.save_stage3(os.path.join(args.out, "stage3.ckpt"),
                         rep.artifacts["grid"], rep.artifacts["source"])
    write_provenance(args.out, "ablate", cfg, overrides,
                     [p for p in (args.config, args.data, args.stage1, args.stage2) if p])
    print(f"{args.variant}: {rep.final.to_json()}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asrf", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS/OpenMP thread count; 1 gives bit-reproducible runs")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", required=True, help="JSON config path")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="config override, dotted path (repeatable)")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")

    sp = sub.add_parser("gen", help="generate a synthetic asynchronous dataset")
    common(sp, data=False)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("fit-timepose", help="stage 1: fit the trajectory model")
    common(sp)
    sp.set_defaults(fn=cmd_fit_timepose)

    sp = sub.add_parser("bootstrap", help="stage 2: RGB-only field training")
    common(sp)
    sp.set_defaults(fn=cmd_bootstrap)

    sp = sub.add_parser("joint", help="stage 3: joint field + trajectory refinement")
    common(sp)
    sp.add_argument("--stage1", required=True, help="stage-1 checkpoint path")
    sp.add_argument("--stage2", required=True, help="stage-2 checkpoint path")
    sp.add_argument("--track-gt", action="store_true",
                    help="log depth-pose error against ground truth during training")
    sp.set_defaults(fn=cmd_joint)

    sp = sub.add_parser("eval", help="metrics on held-out views and depth frames")
    common(sp)
    sp.add_argument("--ckpt", required=True, help="stage-3 checkpoint path")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("render", help="write PNG pairs (color + depth) per view")
    common(sp)
    sp.add_argument("--ckpt", required=True, help="stage-2 or stage-3 checkpoint")
    sp.add_argument("--views", default=None, help="comma-separated RGB frame indices")
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("ablate", help="run one pipeline variant end to end")
    common(sp)
    sp.add_argument("--variant", required=True,
                    help="full | no_depth | no_joint | rgb_init | linear_interp_init")
    sp.add_argument("--stage1", default=None, help="reuse a stage-1 checkpoint")
    sp.add_argument("--stage2", default=None, help="reuse a stage-2 checkpoint")
    sp.set_defaults(fn=cmd_ablate)
    return p


def _apply_threads(argv: list):
    # must happen before numpy's first import anywhere in the process
    threads = None
    if "ASRF_THREADS" in os.environ:
        threads = os.environ["ASRF_THREADS"]
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    if threads is None:
        return
    if "numpy" in sys.modules:
        raise CliError("--threads must be handled before numpy loads; "
                       "invoke through the asrf entry point")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        _apply_threads(argv)
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # runtime failure, distinct from bad usage
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
