"""``handrecon`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/schema error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import io, metrics, solver, synth, trackflow
from .errors import DataError, HandReconError, NumericalError, SchemaError
from .lbfgs import SolverOptions
from .losses import BiomechLimits, FrameObservations, LossWeights
from .skeleton import HAND21, HandPose3D

log = logging.getLogger("handrecon")

THREADS_ENV = "HANDRECON_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str, n: int, name: str) -> list[float]:
    try:
        vals = [float(x) for x in str(text).split(",")]
    except ValueError:
        raise UsageError(f"{name}: expected {n} comma-separated numbers, got {text!r}")
    if len(vals) != n:
        raise UsageError(f"{name}: expected {n} comma-separated numbers, got {text!r}")
    return vals


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


# --- commands -------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.cameras < 2:
        raise UsageError("--cameras must be at least 2")
    if args.frames < 1:
        raise UsageError("--frames must be at least 1")
    if args.rig == "benchmark":
        b = synth.BENCHMARK_RIG
        rig = synth.generate_rig(synth.RigSpec(args.cameras, b.radius, b.height, b.look_at, b.focal, b.width, b.image_height))
    else:
        w, h = _image_size(args.image_size)
        rig = synth.generate_rig(synth.RigSpec(args.cameras, args.radius, args.cam_height, (0.0, 0.0, 0.0), args.focal, w, h))
    motion = synth.NEAR_STATIC_MOTION if args.motion == "near-static" else synth.MotionSpec()
    seeds = np.random.SeedSequence(args.seed).spawn(2 * args.hands)
    sides = ["right", "left"][: args.hands]
    gt_frames = [dict() for _ in range(args.frames)]
    kp_frames = [{c.id: [] for c in rig} for _ in range(args.frames)]
    for k, side in enumerate(sides):
        offset = np.array([0.0 if args.hands == 1 else (120.0 if side == "right" else -120.0), 0.0, 0.0])
        mspec = synth.MotionSpec(**{**motion.__dict__, "center": tuple(offset)})
        traj = synth.generate_motion(args.frames, HAND21, int(seeds[2 * k].generate_state(1)[0]), mspec, side)
        obs = synth.render_observations(
            traj, rig, synth.NoiseSpec(args.noise_px, args.dropout, int(seeds[2 * k + 1].generate_state(1)[0]))
        )
        for t in range(args.frames):
            gt_frames[t][side] = traj[t]
            for cam, o in zip(rig, obs[t].views):
                if o.present.any():
                    kp_frames[t][cam.id].append(io.HandEntry(side, side, o))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.dump_json(io.calibration_to_json(rig), out / "calibration.json")
    io.dump_json(io.keypoints_to_json(io.KeypointData(kp_frames, args.fps)), out / "keypoints.json")
    io.dump_json(io.trajectory_to_json(io.TrajectoryData(gt_frames)), out / "ground_truth.json")
    return 0


def _image_size(text):
    try:
        w, h = (int(x) for x in str(text).lower().split("x"))
    except ValueError:
        raise UsageError(f"--image-size: expected WIDTHxHEIGHT, got {text!r}")
    return w, h


def _load_inputs(args):
    cams = io.load_calibration(args.calib)
    kd = io.load_keypoints(args.keypoints)
    io.check_views(kd, cams, str(args.keypoints))
    return cams, kd


def cmd_triangulate(args) -> int:
    if args.min_views < 2:
        raise UsageError("--min-views must be at least 2")
    cams, kd = _load_inputs(args)
    frames = [dict() for _ in kd.frames]
    for hid in kd.hand_ids():
        for t, fo in enumerate(kd.hand_sequence(hid, cams)):
            if not any(o is not None for o in fo.views):
                continue
            fo = solver._prepare(fo, args.min_confidence, False)
            frames[t][hid] = solver.triangulate_pose(fo, cams, args.min_views)[0]
    io.dump_json(io.trajectory_to_json(io.TrajectoryData(frames)), args.out)
    return 0


def _solver_options(args) -> SolverOptions:
    if args.window <= args.overlap:
        raise UsageError("--window must be larger than --overlap")
    try:
        return SolverOptions(
            learning_rate=args.lr,
            max_iterations=args.max_iter,
            tolerance=args.tol,
            window_size=args.window,
            window_overlap=args.overlap,
            history_size=args.history,
        )
    except ValueError as exc:
        raise UsageError(str(exc))


def cmd_optimize(args) -> int:
    r, s, sh, b = _floats(args.weights, 4, "--weights")
    try:
        weights = LossWeights(r, s, sh, b)
    except ValueError as exc:
        raise UsageError(str(exc))
    opts = _solver_options(args)
    limits = BiomechLimits.from_json(Path(args.limits).read_text()) if args.limits else None
    cams, kd = _load_inputs(args)
    hand_ids = kd.hand_ids()

    def run(hid):
        return solver.solve_sequence(
            kd.hand_sequence(hid, cams), cams, weights, opts, HAND21, limits,
            args.keypoint_threshold, not args.no_wrist_override,
        )

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(run, hand_ids))
    frames = [dict() for _ in kd.frames]
    hands_report = []
    for hid, (poses, rep) in zip(hand_ids, results):
        for t, p in enumerate(poses):
            if p.valid.any():
                frames[t][hid] = p
        hands_report.append({"hand_id": hid, **rep.to_dict()})
    io.dump_json(io.trajectory_to_json(io.TrajectoryData(frames)), args.out)
    if args.report:
        io.dump_json(
            {
                "weights": {"reproj": r, "smooth": s, "shape": sh, "biomech": b},
                "options": opts.__dict__,
                "hands": hands_report,
            },
            args.report,
        )
    return 0


def cmd_fit_gt(args) -> int:
    if args.lambda_bone < 0 or args.lambda_reproj < 0:
        raise UsageError("--lambda-bone and --lambda-reproj must be >= 0")
    opts = SolverOptions(max_iterations=args.max_iter, tolerance=args.tol)
    cams = io.load_calibration(args.calib)
    kd = io.load_keypoints(args.annotations)
    io.check_views(kd, cams, str(args.annotations))
    instances, keys, groups = [], [], []
    for hid in kd.hand_ids():
        for t, fo in enumerate(kd.hand_sequence(hid, cams)):
            if any(o is not None for o in fo.views):
                instances.append(fo)
                keys.append((t, hid))
                groups.append(hid if args.per_hand_lengths else "all")
    poses, nominal, rep = solver.fit_ground_truth(
        instances, cams, HAND21, args.lambda_reproj, args.lambda_bone, opts, groups
    )
    frames = [dict() for _ in kd.frames]
    for (t, hid), p in zip(keys, poses):
        frames[t][hid] = p
    io.dump_json(io.trajectory_to_json(io.TrajectoryData(frames)), args.out)
    nominal_out = args.nominal_out or str(Path(args.out).with_suffix("")) + "_bones.json"
    payload = io.nominal_to_json(nominal, HAND21.bones)
    payload["optimizer"] = {
        "iterations": rep.iterations,
        "initial_objective": rep.initial_value,
        "final_objective": rep.final_value,
        "converged": rep.converged,
        "reason": rep.reason,
    }
    io.dump_json(payload, nominal_out)
    return 0


def _parse_mask(text):
    if text is None:
        return metrics.default_joint_mask()
    mask = np.ones(21, dtype=bool)
    if str(text).strip().lower() in ("", "none"):
        return mask
    try:
        excluded = [int(x) for x in str(text).split(",")]
    except ValueError:
        raise UsageError(f"--mask: expected comma-separated joint indices to exclude, got {text!r}")
    if any(not 0 <= j < 21 for j in excluded):
        raise UsageError("--mask: joint indices must lie in [0, 20]")
    mask[excluded] = False
    if not mask.any():
        raise UsageError("--mask excludes every joint")
    return mask


def _aligned_3d(pred: io.TrajectoryData, gt: io.TrajectoryData):
    if len(pred.frames) != len(gt.frames):
        raise DataError(f"pred has {len(pred.frames)} frames, gt has {len(gt.frames)}")
    pairs = []  # (frame, pred_hand_id, gt_hand_id)
    for t, (pf, gf) in enumerate(zip(pred.frames, gt.frames)):
        pk, gk = list(pf), list(gf)
        for i, j in metrics.match_hands([pf[k] for k in pk], [gf[k] for k in gk]):
            pairs.append((t, pk[i], gk[j]))
    return pairs


def cmd_evaluate(args) -> int:
    wanted = {m.strip() for m in args.metrics.split(",")} if args.metrics else {"all"}
    unknown = wanted - {"all", "3d", "2d", "ap"}
    if unknown:
        raise UsageError(f"--metrics: unknown groups {sorted(unknown)} (use 3d, 2d, ap, all)")
    pred_raw, gt_raw = io.load_json(args.pred), io.load_json(args.gt)
    pred_is_3d, gt_is_3d = io.is_trajectory(pred_raw), io.is_trajectory(gt_raw)
    cams = io.load_calibration(args.calib) if args.calib else None
    want_2d = bool(wanted & {"all", "2d", "ap"})
    explicit_2d = bool(wanted & {"2d", "ap"})
    if explicit_2d and cams is None and (pred_is_3d or gt_is_3d):
        raise UsageError("2D metrics with 3D inputs need --calib")
    if "3d" in wanted and not (pred_is_3d and gt_is_3d):
        raise UsageError("3D metrics need 3D pred and gt trajectories")
    sigma = float(args.oks_sigma)
    cfg = metrics.MetricsConfig(oks_sigma=np.full(21, sigma), joint_mask=_parse_mask(args.mask), coco_ap=args.coco_ap)

    pred3d = gt3d = pred2d = gt2d = None
    ap_sets = None
    if pred_is_3d and gt_is_3d:
        pt, gtt = io.parse_trajectory(pred_raw, str(args.pred)), io.parse_trajectory(gt_raw, str(args.gt))
        pairs = _aligned_3d(pt, gtt)
        if wanted & {"all", "3d"}:
            pred3d = [pt.frames[t][p] for t, p, _ in pairs]
            gt3d = [gtt.frames[t][g] for t, _, g in pairs]
        if want_2d and cams is not None:
            p3 = [pt.frames[t][p] for t, p, _ in pairs]
            g2 = [metrics.project_observations(gtt.frames[t][g], cams) for t, _, g in pairs]
            rep2 = metrics.evaluate(cfg, pred3d=p3, gt2d=g2, cams=cams)
        else:
            rep2 = None
        rep = metrics.evaluate(cfg, pred3d=pred3d, gt3d=gt3d)
        if rep2 is not None:
            for k in ("mre", "mje", "pck2d", "mpck2d", "ap", "pck2d_source"):
                setattr(rep, k, getattr(rep2, k))
            rep.counts.update(rep2.counts)
    else:
        # at least one side is 2D
        if pred_is_3d or gt_is_3d:
            if cams is None:
                raise UsageError("mixing 3D and 2D files needs --calib")
        if pred_is_3d:
            pt = io.parse_trajectory(pred_raw, str(args.pred))
            pred_views = _project_traj(pt, cams)
        else:
            pred_views = _views_from_keypoints(io.parse_keypoints(pred_raw, str(args.pred)))
        if gt_is_3d:
            gtt = io.parse_trajectory(gt_raw, str(args.gt))
            gt_views = _project_traj(gtt, cams)
        else:
            gt_views = _views_from_keypoints(io.parse_keypoints(gt_raw, str(args.gt)))
        if len(pred_views) != len(gt_views):
            raise DataError(f"pred has {len(pred_views)} frames, gt has {len(gt_views)}")
        pred2d, gt2d, ap_pred, ap_gt = [], [], [], []
        for pf, gf in zip(pred_views, gt_views):
            for vid in sorted(set(pf) | set(gf)):
                ph, gh = pf.get(vid, {}), gf.get(vid, {})
                ap_pred.append([metrics.instance_from_observation(o) for o in ph.values() if o.present.any()])
                ap_gt.append([metrics.instance_from_observation(o) for o in gh.values() if o.present.any()])
                for hid in gh:
                    if hid in ph:
                        pred2d.append(FrameObservations((ph[hid],)))
                        gt2d.append(FrameObservations((gh[hid],)))
        rep = metrics.evaluate(cfg, pred2d=pred2d, gt2d=gt2d, ap_sets=(ap_pred, ap_gt))
        if not (wanted & {"all", "ap"}):
            rep.ap = None
    if args.csv and pred3d is not None:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "pred_hand", "gt_hand", "joint", "error_mm"])
            for (t, p, g), pp, gp in zip(pairs, pred3d, gt3d):
                for j in np.flatnonzero(cfg.joint_mask & pp.valid & gp.valid):
                    w.writerow([t, p, g, int(j), repr(float(np.linalg.norm(pp.joints[j] - gp.joints[j])))])
    out = rep.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(out)
    else:
        sys.stdout.write(out)
    return 0


def _project_traj(td: io.TrajectoryData, cams):
    """Per frame: view id -> {hand id -> projected observation}."""
    out = []
    for fr in td.frames:
        views = {c.id: {} for c in cams}
        for hid, pose in fr.items():
            for cam, o in zip(cams, metrics.project_observations(pose, cams).views):
                views[cam.id][hid] = o
        out.append(views)
    return out


def _views_from_keypoints(kd: io.KeypointData):
    return [{vid: {e.hand_id: e.obs for e in entries} for vid, entries in fr.items()} for fr in kd.frames]


def _load_confidences(args):
    if args.keypoints:
        kd = io.load_keypoints(args.keypoints)
        hands, views = kd.hand_ids(), kd.view_ids()
        conf = np.zeros((len(kd.frames), len(hands), len(views)))
        for t, fr in enumerate(kd.frames):
            for v, vid in enumerate(views):
                for e in fr.get(vid, []):
                    conf[t, hands.index(e.hand_id), v] = e.obs.mean_confidence
        return conf, hands, views
    path = Path(args.confidences)
    if path.suffix.lower() == ".csv":
        rows = list(csv.DictReader(path.open()))
        try:
            recs = [(int(r["frame"]), r["hand"], r["view"], float(r["confidence"])) for r in rows]
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"expected columns frame,hand,view,confidence ({exc})", str(path))
        hands = list(dict.fromkeys(r[1] for r in recs))
        views = list(dict.fromkeys(r[2] for r in recs))
        n = max((r[0] for r in recs), default=-1) + 1
        conf = np.zeros((n, len(hands), len(views)))
        for t, h, v, c in recs:
            conf[t, hands.index(h), views.index(v)] = c
        return conf, hands, views
    data = io.load_json(path)
    try:
        conf = np.asarray(data["confidences"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"expected {{'confidences': [frames][hands][views]}} ({exc})", str(path))
    if conf.ndim != 3:
        raise SchemaError("confidences must be a [frames][hands][views] array", f"{path}.confidences")
    return conf, data.get("hands", list(range(conf.shape[1]))), data.get("views", list(range(conf.shape[2])))


def cmd_schedule(args) -> int:
    if bool(args.keypoints) == bool(args.confidences):
        raise UsageError("give exactly one of --keypoints or --confidences")
    conf, hands, views = _load_confidences(args)
    if np.any((conf < 0) | (conf > 1)):
        raise DataError("confidences must lie in [0, 1]")
    tracker = trackflow.StubTracker(args.max_steps)
    plan = trackflow.schedule_tracking(conf, args.threshold, tracker)
    data = json.loads(plan.to_json())
    for tr in data["tracks"]:
        tr["hand"], tr["view"] = hands[tr["hand"]], views[tr["view"]]
    io.dump_json(data, args.out)
    return 0


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="handrecon", description="Multi-view 3D hand pose reconstruction and evaluation.")
    p.add_argument("--config", help="YAML/JSON file with option defaults (keys use flag names)")
    p.add_argument("--json-errors", action="store_true", help="emit errors as JSON on stderr")
    p.add_argument("--log-level", default="WARNING")
    # accept the global flags after the subcommand too
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--json-errors", action="store_true", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--log-level", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic scene")
    s.add_argument("--cameras", type=int, default=4)
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--noise-px", type=float, default=0.0)
    s.add_argument("--dropout", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--hands", type=int, choices=(1, 2), default=1)
    s.add_argument("--radius", type=float, default=2000.0, help="camera ring radius, mm")
    s.add_argument("--cam-height", type=float, default=600.0, help="camera height above the hand, mm")
    s.add_argument("--focal", type=float, default=1500.0, help="focal length, px")
    s.add_argument("--image-size", default="1920x1080")
    s.add_argument("--rig", choices=("ring", "benchmark"), default="ring", help="'benchmark' uses the 4K preset (ignores geometry flags)")
    s.add_argument("--motion", choices=("moving", "near-static"), default="moving")
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("triangulate", parents=[common], help="per-frame weighted DLT triangulation")
    t.add_argument("--calib", required=True)
    t.add_argument("--keypoints", required=True)
    t.add_argument("--min-views", type=int, default=2)
    t.add_argument("--min-confidence", type=float, default=trackflow.KEYPOINT_THRESHOLD)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_triangulate)

    o = sub.add_parser("optimize", parents=[common], help="temporally constrained 3D optimisation")
    o.add_argument("--calib", required=True)
    o.add_argument("--keypoints", required=True)
    o.add_argument("--weights", default="1,20,50,0", help="reproj,smooth,shape,biomech")
    o.add_argument("--window", type=int, default=50)
    o.add_argument("--overlap", type=int, default=25)
    o.add_argument("--max-iter", type=int, default=100)
    o.add_argument("--tol", type=float, default=1e-5)
    o.add_argument("--lr", type=float, default=1.0)
    o.add_argument("--history", type=int, default=10)
    o.add_argument("--keypoint-threshold", type=float, default=trackflow.KEYPOINT_THRESHOLD)
    o.add_argument("--no-wrist-override", action="store_true")
    o.add_argument("--limits", help="joint-limit JSON for the biomechanical term")
    o.add_argument("--out", required=True)
    o.add_argument("--report")
    o.set_defaults(func=cmd_optimize)

    g = sub.add_parser("fit-gt", parents=[common], help="fit 3D ground truth to manual 2D annotations")
    g.add_argument("--calib", required=True)
    g.add_argument("--annotations", required=True)
    g.add_argument("--lambda-bone", type=float, default=100.0)
    g.add_argument("--lambda-reproj", type=float, default=1.0)
    g.add_argument("--per-hand-lengths", action="store_true", help="estimate nominal lengths per hand id")
    g.add_argument("--max-iter", type=int, default=100)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--out", required=True)
    g.add_argument("--nominal-out")
    g.set_defaults(func=cmd_fit_gt)

    e = sub.add_parser("evaluate", parents=[common], help="compute evaluation metrics")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--calib")
    e.add_argument("--mask", help="comma-separated joints to exclude ('none' keeps all; default 0,1)")
    e.add_argument("--metrics", help="comma-separated groups: 3d, 2d, ap, all (default all computable)")
    e.add_argument("--oks-sigma", type=float, default=0.035)
    e.add_argument("--coco-ap", action="store_true", help="101-point interpolated AP")
    e.add_argument("--csv", help="write per-joint 3D errors")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    k = sub.add_parser("schedule", parents=[common], help="plan keyframe tracking episodes")
    k.add_argument("--keypoints")
    k.add_argument("--confidences", help="JSON {confidences: [frames][hands][views]} or CSV frame,hand,view,confidence")
    k.add_argument("--threshold", type=float, default=trackflow.KEYFRAME_THRESHOLD)
    k.add_argument("--max-steps", type=int, default=None, help="stub tracker step budget (default unlimited)")
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_schedule)
    return p


def _apply_config(parser, argv):
    pre_p = argparse.ArgumentParser(add_help=False)
    pre_p.add_argument("--config")
    pre, _ = pre_p.parse_known_args(argv)
    if not pre.config:
        return
    try:
        cfg = yaml.safe_load(Path(pre.config).read_text()) or {}
    except yaml.YAMLError as exc:
        raise SchemaError(f"cannot parse config: {exc}", pre.config)
    if not isinstance(cfg, dict):
        raise SchemaError("config must be a mapping", pre.config)
    defaults = {str(k).replace("-", "_"): v for k, v in cfg.items()}
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                known = {a.dest for a in sp._actions}
                sp.set_defaults(**{k: v for k, v in defaults.items() if k in known})
                for a in sp._actions:
                    if a.dest in defaults:
                        a.required = False


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    json_errors = "--json-errors" in argv
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
        if not args.command:
            raise UsageError("missing command")
        return args.func(args)
    except UsageError as exc:
        return _fail(1, "usage", str(exc), json_errors, parser)
    except (DataError, OSError, ValueError) as exc:
        return _fail(2, "data", str(exc), json_errors, path=getattr(exc, "path", None))
    except NumericalError as exc:
        return _fail(3, "numerical", str(exc), json_errors)
    except HandReconError as exc:
        return _fail(2, "data", str(exc), json_errors)


def _fail(code, kind, message, json_errors, parser=None, path=None):
    if json_errors:
        payload = {"error": kind, "message": message, "exit_code": code}
        if path:
            payload["path"] = path
        sys.stderr.write(json.dumps(payload) + "\n")
    else:
        if parser is not None:
            parser.print_usage(sys.stderr)
        sys.stderr.write(f"handrecon: {kind} error: {message}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
