"""Acceptance criteria 1-10.

Each test prints a single ``CRITERION n: PASS|FAIL ...`` line; the lines are
repeated in the terminal summary. Tolerances are pinned to the criteria.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from handrecon import io, metrics
from handrecon.cli import main
from handrecon.lbfgs import SolverOptions, lbfgs_minimize
from handrecon.losses import (
    BiomechLimits,
    FrameObservations,
    HandObservation2D,
    LossWeights,
    biomech_loss,
    bone_loss,
    procrustes_rotation,
    reproj_loss,
    shape_loss,
    smooth_loss,
)
from handrecon.metrics import (
    OKS_THRESHOLDS,
    PCK2D_THRESHOLDS,
    PCK3D_THRESHOLDS,
    KeypointInstance,
    MetricsConfig,
)
from handrecon.skeleton import HAND21, HandPose3D, NominalBoneLengths, bone_lengths, canonical_hand
from handrecon.solver import fit_ground_truth, solve_sequence, triangulate_pose
from handrecon.synth import (
    BENCHMARK_RIG,
    NEAR_STATIC_MOTION,
    NoiseSpec,
    RigSpec,
    generate_motion,
    generate_rig,
    render_observations,
)
from handrecon.trackflow import StubTracker, schedule_tracking

from _oracles import (
    ap_oracle,
    bone_loss_oracle,
    errors2d_oracle,
    fd_gradient,
    mpjpe_oracle,
    pck_oracle,
    random_pose,
    random_rig,
    rel_err,
    reproj_errors_oracle,
)

ALL = np.ones(21, bool)
N_SEEDS = 100
BENCH_FRAMES = 40


def cli(*args):
    code = main([str(a) for a in args])
    assert code == 0, f"command failed with exit code {code}: {args}"


def traj_mpjpe(pred_path, gt_path):
    p, g = io.load_trajectory(pred_path), io.load_trajectory(gt_path)
    keys = [(t, h) for t, f in enumerate(g.frames) for h in f]
    return metrics.mpjpe([p.frames[t][h] for t, h in keys], [g.frames[t][h] for t, h in keys], ALL)


def velocity_variance(path):
    """Mean over joint coordinates of the across-frame variance of frame-to-frame velocity."""
    td = io.load_trajectory(path)
    X = np.array([next(iter(f.values())).joints for f in td.frames])
    return float(np.nanmean(np.nanvar(np.diff(X, axis=0), axis=0)))


def bench_scene(directory, seed, frames=BENCH_FRAMES):
    cli("simulate", "--rig", "benchmark", "--cameras", BENCHMARK_RIG.n_cameras, "--motion", "near-static",
        "--frames", frames, "--noise-px", 2, "--dropout", 0.2, "--seed", seed, "--out-dir", directory)
    return directory / "calibration.json", directory / "keypoints.json", directory / "ground_truth.json"


# --- 1 ----------------------------------------------------------------------


def test_c1_oracle_round_trip(tmp_path, record):
    t0 = time.perf_counter()
    cli("simulate", "--cameras", 4, "--frames", 100, "--seed", 2024, "--out-dir", tmp_path)
    cal, kp, gt = tmp_path / "calibration.json", tmp_path / "keypoints.json", tmp_path / "ground_truth.json"
    cli("triangulate", "--calib", cal, "--keypoints", kp, "--out", tmp_path / "tri.json")
    cli("optimize", "--calib", cal, "--keypoints", kp, "--weights", "1,0,0,0", "--out", tmp_path / "opt.json")
    elapsed = time.perf_counter() - t0
    e_tri = traj_mpjpe(tmp_path / "tri.json", gt)
    e_opt = traj_mpjpe(tmp_path / "opt.json", gt)
    ok = e_tri <= 1e-6 and e_opt <= 1e-3 and elapsed <= 60
    record(1, ok, f"triangulate MPJPE={e_tri:.3e} mm (<=1e-6), optimize(1,0,0,0) MPJPE={e_opt:.3e} mm (<=1e-3), {elapsed:.1f}s (<=60)")
    assert ok


# --- 2 ----------------------------------------------------------------------


def test_c2_gradient_suite(record):
    t0 = time.perf_counter()
    worst = dict(reproj=0.0, smooth=0.0, bone=0.0, shape=0.0, biomech=0.0)
    tight = BiomechLimits(np.tile([[0.3, 0.5], [0.2, 0.4], [0.1, 0.3]], (5, 1)), np.tile([[-0.05, 0.05]], (5, 1)))
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        cams = random_rig(rng, 3)
        pose, prev = random_pose(rng, 8), random_pose(rng, 8)
        obs = FrameObservations(tuple(
            HandObservation2D(
                np.array([[c.intrinsics[0, 2], c.intrinsics[1, 2]]]) + rng.normal(0, 80, (21, 2)),
                rng.uniform(0, 1, 21),
            )
            for c in cams
        ))
        nominal = NominalBoneLengths(bone_lengths(canonical_hand()) * rng.uniform(0.9, 1.1, 20))
        X = pose.joints
        checks = {
            "reproj": (lambda Y: reproj_loss(HandPose3D(Y), obs, cams), ),
            "smooth": (lambda Y: smooth_loss(HandPose3D(Y), prev), ),
            "shape": (lambda Y: shape_loss(HandPose3D(Y), prev), ),
            "biomech": (lambda Y: biomech_loss(HandPose3D(Y), HAND21, tight), ),
            "bone": (lambda Y: bone_loss([HandPose3D(Y)], nominal), ),
        }
        for name, (fn,) in checks.items():
            _, g = fn(X)
            fd = fd_gradient(lambda Y: fn(Y)[0], X, h=1e-4)
            worst[name] = max(worst[name], rel_err(np.asarray(g).reshape(X.shape), fd))
    elapsed = time.perf_counter() - t0
    ok = (
        worst["reproj"] < 1e-5 and worst["smooth"] < 1e-5 and worst["bone"] < 1e-5
        and worst["shape"] < 1e-4 and worst["biomech"] < 1e-4 and elapsed <= 30
    )
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(2, ok, f"worst relative FD error over 100 instances: {detail}; {elapsed:.1f}s (<=30)")
    assert ok


# --- 3 ----------------------------------------------------------------------


def test_c3_procrustes_invariance(record):
    rng = np.random.default_rng(3)
    worst_loss = worst_orth = worst_det = 0.0
    reflections_guarded = 0
    for i in range(1000):
        kind = i % 4
        if kind == 0:
            X = random_pose(rng, 10).joints
        elif kind == 1:
            X = canonical_hand().joints.copy()  # exactly planar
        elif kind == 2:
            X = canonical_hand().joints + np.c_[np.zeros((21, 2)), rng.normal(0, 1e-7, 21)]  # near-planar
        else:
            X = canonical_hand().joints * [1.0, 1.0, 0.0] + np.c_[rng.normal(0, 1e-3, (21, 1)), np.zeros((21, 2))]
        R = Rotation.random(random_state=rng).as_matrix()
        t = rng.normal(0, 500, 3)
        pose = HandPose3D(X)
        moved = pose.transformed(R, t)
        worst_loss = max(worst_loss, shape_loss(pose, moved)[0])
        A, B = X - X[0], moved.joints - moved.joints[0]
        Rh = procrustes_rotation(A, B)
        worst_orth = max(worst_orth, np.abs(Rh @ Rh.T - np.eye(3)).max())
        worst_det = max(worst_det, abs(np.linalg.det(Rh) - 1.0))
        U, _, Vt = np.linalg.svd(A.T @ B)
        reflections_guarded += np.linalg.det(Vt.T @ U.T) < 0
    ok = worst_loss <= 1e-9 and worst_orth <= 1e-9 and worst_det <= 1e-9 and reflections_guarded > 0
    record(3, ok, f"max shape_loss={worst_loss:.1e} (<=1e-9), |RR^T-I|={worst_orth:.1e}, |det-1|={worst_det:.1e}, "
                  f"sign correction exercised {reflections_guarded}/1000")
    assert ok


# --- 4 ----------------------------------------------------------------------


def test_c4_smoothing_efficacy(tmp_path, record):
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in range(N_SEEDS):
        d = tmp_path / f"s{seed}"
        cal, kp, gt = bench_scene(d, seed)
        cli("triangulate", "--calib", cal, "--keypoints", kp, "--out", d / "tri.json")
        cli("optimize", "--calib", cal, "--keypoints", kp, "--weights", "1,20,50,0", "--out", d / "opt.json")
        e_tri, e_opt = traj_mpjpe(d / "tri.json", gt), traj_mpjpe(d / "opt.json", gt)
        v_tri, v_opt = velocity_variance(d / "tri.json"), velocity_variance(d / "opt.json")
        wins += e_opt < e_tri and v_opt < v_tri
        rows.append((e_tri, e_opt, v_tri, v_opt))
    elapsed = time.perf_counter() - t0
    r = np.array(rows)
    ok = wins >= 95 and elapsed <= 600
    record(4, ok, f"{wins}/{N_SEEDS} seeds better on both (>=95); mean MPJPE tri {r[:, 0].mean():.3f} -> opt "
                  f"{r[:, 1].mean():.3f} mm, velocity variance {r[:, 2].mean():.3f} -> {r[:, 3].mean():.4f}; "
                  f"{elapsed:.0f}s (<=600)")
    assert ok


# --- 5 ----------------------------------------------------------------------


def test_c5_biomech_comparison(tmp_path, record):
    comparison = []
    for seed in range(5):
        d = tmp_path / f"s{seed}"
        cal, kp, gt = bench_scene(d, 500 + seed)
        row = {"seed": 500 + seed}
        for lam in (0, 5):
            out = d / f"opt_b{lam}.json"
            cli("optimize", "--calib", cal, "--keypoints", kp, "--weights", f"1,20,50,{lam}", "--out", out,
                "--report", d / f"rep_b{lam}.json")
            row[f"mpjpe_biomech_{lam}"] = traj_mpjpe(out, gt)
        comparison.append(row)
    report = tmp_path / "biomech_comparison.json"
    report.write_text(json.dumps(comparison, indent=1))
    captured = json.loads(report.read_text())
    ok = len(captured) == 5 and all(math.isfinite(r["mpjpe_biomech_0"]) and math.isfinite(r["mpjpe_biomech_5"]) for r in captured)
    m0 = np.mean([r["mpjpe_biomech_0"] for r in captured])
    m5 = np.mean([r["mpjpe_biomech_5"] for r in captured])
    record(5, ok, f"both runs completed on 5 benchmark scenes; mean MPJPE lambda_biomech=0: {m0:.6f} mm, =5: {m5:.6f} mm, difference {m5 - m0:+.2e} (no direction asserted)")
    assert ok


# --- 6 ----------------------------------------------------------------------


def _metric_instance(rng):
    n_frames, n_views, n_hands = rng.integers(1, 11), rng.integers(1, 5), rng.integers(1, 3)
    cams = random_rig(rng, n_views)
    pred3d, gt3d, pred2d, gt2d, ap_pred, ap_gt = [], [], [], [], [], []
    per_image = {}
    for t in range(n_frames):
        for h in range(n_hands):
            g = random_pose(rng)
            gt3d.append(HandPose3D(g.joints, rng.random(21) > 0.1))
            pred3d.append(HandPose3D(g.joints + rng.normal(0, 10, (21, 3)), rng.random(21) > 0.1))
            gv, pv = [], []
            for v, cam in enumerate(cams):
                o = metrics.project_observations(g, [cam]).views[0]
                go = HandObservation2D(o.keypoints, (rng.random(21) > 0.15) * o.confidence)
                po = HandObservation2D(o.keypoints + rng.normal(0, 15, (21, 2)), rng.uniform(0.1, 1, 21) * (rng.random(21) > 0.1))
                gv.append(go)
                pv.append(po)
                img = per_image.setdefault((t, v), ([], []))
                img[0].append(KeypointInstance(po.keypoints, po.present, po.mean_confidence))
                img[1].append(KeypointInstance(go.keypoints, go.present))
            gt2d.append(FrameObservations(tuple(gv)))
            pred2d.append(FrameObservations(tuple(pv)))
    for key in sorted(per_image):
        ap_pred.append(per_image[key][0])
        ap_gt.append(per_image[key][1])
    return cams, pred3d, gt3d, pred2d, gt2d, ap_pred, ap_gt


def test_c6_metrics_oracle(record):
    cfg = MetricsConfig()
    mask = cfg.joint_mask
    worst = 0.0
    identities = True
    for seed in range(50):
        rng = np.random.default_rng(600 + seed)
        cams, pred3d, gt3d, pred2d, gt2d, ap_pred, ap_gt = _metric_instance(rng)
        e3_ref = mpjpe_oracle(pred3d, gt3d, mask)[0]
        e_re = reproj_errors_oracle(pred3d, gt2d, cams, mask)
        e_2d = errors2d_oracle(pred2d, gt2d, mask)
        e3_list = [float(np.linalg.norm(p.joints[j] - g.joints[j])) for p, g in zip(pred3d, gt3d)
                   for j in range(21) if mask[j] and p.valid[j] and g.valid[j]]
        rep3 = metrics.evaluate(cfg, pred3d=pred3d, gt3d=gt3d)
        rep_re = metrics.evaluate(cfg, pred3d=pred3d, gt2d=gt2d, cams=cams)
        rep_2d = metrics.evaluate(cfg, pred2d=pred2d, gt2d=gt2d, ap_sets=(ap_pred, ap_gt))
        diffs = [
            rep3.mpjpe - e3_ref,
            rep_re.mre - sum(e_re) / len(e_re),
            rep_2d.mje - sum(e_2d) / len(e_2d),
            rep_2d.ap - ap_oracle(ap_pred, ap_gt, 0.035, mask, OKS_THRESHOLDS),
        ]
        diffs += list(np.array(list(rep3.pck3d.values())) - pck_oracle(e3_list, PCK3D_THRESHOLDS))
        diffs += list(np.array(list(rep_2d.pck2d.values())) - pck_oracle(e_2d, PCK2D_THRESHOLDS))
        diffs += list(np.array(list(rep_re.pck2d.values())) - pck_oracle(e_re, PCK2D_THRESHOLDS))
        worst = max(worst, max(abs(d) for d in diffs))
        for rep, key in ((rep3, "3d"), (rep_2d, "2d"), (rep_re, "2d")):
            f = list(getattr(rep, f"pck{key}").values())
            identities &= all(b >= a for a, b in zip(f, f[1:]))
            identities &= getattr(rep, f"mpck{key}") == (f[0] + f[1] + f[2] + f[3]) / 4
    constants = (
        PCK2D_THRESHOLDS == (5, 10, 20, 30)
        and PCK3D_THRESHOLDS == (5, 10, 25, 50)
        and OKS_THRESHOLDS == tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
        and len(OKS_THRESHOLDS) == 10 and OKS_THRESHOLDS[-1] == 0.95
    )
    ok = worst <= 1e-12 and identities and constants
    record(6, ok, f"max |library - oracle| over 50 instances = {worst:.1e} (<=1e-12); PCK monotone and mPCK mean exact: {identities}; threshold constants: {constants}")
    assert ok


# --- 7 ----------------------------------------------------------------------


def _labels(obs):
    return [FrameObservations(tuple(HandObservation2D(o.keypoints, o.present.astype(float)) for o in f.views)) for f in obs]


def test_c7_ground_truth_fitting(record):
    rig = generate_rig(RigSpec(4))
    wins, worst_mre_increase, all_bones = 0, -math.inf, 0
    for seed in range(N_SEEDS):
        traj = generate_motion(20, HAND21, 700 + seed)
        ann = _labels(render_observations(traj, rig, NoiseSpec(1.0, 0.0, 700 + seed)))
        fitted, _, _ = fit_ground_truth(ann, rig, HAND21, 1.0, 100.0)
        tri = [triangulate_pose(a, rig)[0] for a in ann]
        s_fit = np.std([bone_lengths(p) for p in fitted], axis=0)
        s_tri = np.std([bone_lengths(p) for p in tri], axis=0)
        d_mre = metrics.mre(fitted, ann, rig, ALL) - metrics.mre(tri, ann, rig, ALL)
        worst_mre_increase = max(worst_mre_increase, d_mre)
        wins += s_fit.mean() < s_tri.mean()
        all_bones += bool(np.all(s_fit < s_tri))
    ok = wins >= 95 and worst_mre_increase <= 2.0
    record(7, ok, f"mean per-bone length std lower after fitting on {wins}/{N_SEEDS} seeds (>=95; every bone lower on {all_bones}); "
                  f"max MRE increase {worst_mre_increase:.3f} px (<=2)")
    assert ok


# --- 8 ----------------------------------------------------------------------


def test_c8_scheduler_traces(record):
    def sets(plan):
        return [sorted(e.frames) for e in plan.episodes[(0, 0)]]

    a = schedule_tracking([0.2, 0.9, 0.8], 0.3, StubTracker())
    b = schedule_tracking([0.25] * 5, 0.3, StubTracker())
    c = schedule_tracking([0.9, 0.1, 0.1, 0.8, 0.1], 0.3, StubTracker(max_steps=1))
    results = [
        sets(a) == [[0, 1, 2]] and a.episodes[(0, 0)][0].keyframe == 1,
        sets(b) == [],
        sets(c) == [[0, 1], [3, 4]],
    ]
    ok = all(results)
    record(8, ok, f"fixtures reproduced exactly: {sum(results)}/3")
    assert ok


# --- 9 ----------------------------------------------------------------------


def test_c9_lbfgs(record):
    a = np.array([3.0, -2.0, 0.5, 7.0])
    xq, rq = lbfgs_minimize(lambda x: (float(np.sum((x - a) ** 2)), 2 * (x - a)), np.zeros(4))
    quad_ok = np.max(np.abs(xq - a)) < 1e-8 and rq.iterations <= 3

    def rosen(x):
        u, v = x
        return (1 - u) ** 2 + 100 * (v - u * u) ** 2, np.array([-2 * (1 - u) - 400 * u * (v - u * u), 200 * (v - u * u)])

    xr, rr = lbfgs_minimize(rosen, np.array([-1.2, 1.0]), SolverOptions(max_iterations=200))
    rosen_ok = np.max(np.abs(xr - 1.0)) < 1e-5

    opts = SolverOptions()
    n_steps = n_frames = 0
    wolfe_ok = monotone_ok = True
    all_steps = list(rr.steps) + list(rq.steps)
    for seed in range(10):
        cams = generate_rig(BENCHMARK_RIG)
        traj = generate_motion(BENCH_FRAMES, HAND21, seed, NEAR_STATIC_MOTION)
        obs = render_observations(traj, cams, NoiseSpec(2.0, 0.2, seed))
        _, rep = solve_sequence(obs, cams, LossWeights(), opts)
        for fr in rep.history:
            n_frames += 1
            vals = [fr.initial_objective] + [s.f for s in fr.steps]
            monotone_ok &= all(y <= x for x, y in zip(vals, vals[1:])) and fr.final_objective <= fr.initial_objective
            all_steps.extend(fr.steps)
    for s in all_steps:
        if not s.wolfe:
            continue
        n_steps += 1
        slack = 1e-12 * max(1.0, abs(s.f0))
        wolfe_ok &= s.f <= s.f0 + opts.c1 * s.alpha * s.dphi0 + slack
        wolfe_ok &= abs(s.dphi) <= opts.c2 * abs(s.dphi0) + slack
    ok = quad_ok and rosen_ok and wolfe_ok and monotone_ok
    record(9, ok, f"quadratic {np.max(np.abs(xq - a)):.1e} in {rq.iterations} it; Rosenbrock {np.max(np.abs(xr - 1)):.1e}; "
                  f"strong Wolfe on {n_steps} accepted steps: {wolfe_ok}; monotone over {n_frames} frame solves: {monotone_ok}")
    assert ok


# --- 10 ---------------------------------------------------------------------


def test_c10_cli_determinism(tmp_path, record):
    def run_all(d):
        d.mkdir()
        cli("simulate", "--frames", 15, "--hands", 2, "--noise-px", 2, "--dropout", 0.2, "--seed", 77, "--out-dir", d)
        cal, kp, gt = d / "calibration.json", d / "keypoints.json", d / "ground_truth.json"
        cli("triangulate", "--calib", cal, "--keypoints", kp, "--out", d / "tri.json")
        cli("optimize", "--calib", cal, "--keypoints", kp, "--window", 8, "--overlap", 3,
            "--out", d / "opt.json", "--report", d / "report.json")
        cli("fit-gt", "--calib", cal, "--annotations", kp, "--out", d / "fit.json", "--nominal-out", d / "bones.json")
        cli("evaluate", "--pred", d / "opt.json", "--gt", gt, "--calib", cal, "--out", d / "metrics.json", "--csv", d / "errors.csv")
        cli("evaluate", "--pred", kp, "--gt", kp, "--out", d / "metrics2d.json")
        cli("schedule", "--keypoints", kp, "--max-steps", 4, "--out", d / "plan.json")
        return {p.name: p.read_bytes() for p in sorted(d.iterdir())}

    a, b = run_all(tmp_path / "a"), run_all(tmp_path / "b")
    same = [name for name in a if a[name] == b.get(name)]
    ok = len(a) == 12 and len(same) == len(a) and a.keys() == b.keys()
    record(10, ok, f"{len(same)}/{len(a)} output files byte-identical across reruns")
    assert ok
