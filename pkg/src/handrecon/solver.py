"""Per-frame pose optimisation, windowed sequence solving and ground-truth fitting.

Frames are always solved one after another: each frame's temporal and
shape terms refer to the most recently solved frame. Windows only control
initialisation. A window starting at ``w * (size - overlap)`` re-solves
its first ``overlap`` frames starting from the previous window's
solutions, and the later window wins when stitching.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InsufficientViews, NumericalError
from .geometry import CameraParams, triangulate
from .lbfgs import LbfgsReport, SolverOptions, lbfgs_minimize
from .losses import (
    BiomechLimits,
    FrameObservations,
    LossWeights,
    pack_observations,
    procrustes_rotation,
    reproj_terms,
    bone_terms,
    total_terms,
)
from .skeleton import (
    HAND21,
    NUM_JOINTS,
    WRIST,
    HandPose3D,
    NominalBoneLengths,
    SkeletonDef,
    canonical_hand,
    estimate_nominal_lengths,
)
from .trackflow import KEYPOINT_THRESHOLD, filter_keypoints, override_wrist

log = logging.getLogger(__name__)


@dataclass
class FrameReport:
    frame: int = -1
    iterations: int = 0
    initial_objective: float = 0.0
    final_objective: float = 0.0
    converged: bool = False
    reason: str = ""
    terms: dict = field(default_factory=dict)
    interpolated: bool = False
    window: int = -1
    steps: tuple = field(default=(), repr=False)  # accepted line-search steps, not serialised


@dataclass
class SolveReport:
    frames: list = field(default_factory=list)  # final FrameReport per frame
    windows: list = field(default_factory=list)  # window start offsets
    history: list = field(default_factory=list)  # every solve, including overlap re-solves

    def to_dict(self) -> dict:
        return {
            "windows": list(self.windows),
            "frames": [{k: v for k, v in asdict(f).items() if k != "steps"} for f in self.frames],
            "solves": len(self.history),
        }


def window_offsets(n_frames: int, size: int, overlap: int) -> list[int]:
    """Start offsets of overlapping windows; the last one may be truncated."""
    if not 0 < overlap < size:
        raise ValueError("need 0 < overlap < size")
    stride = size - overlap
    offsets = [0]
    while offsets[-1] + size < n_frames:
        offsets.append(offsets[-1] + stride)
    return offsets


def triangulate_pose(
    obs: FrameObservations, cams: Sequence[CameraParams], min_views: int = 2
) -> tuple[HandPose3D, np.ndarray]:
    """Confidence-weighted DLT per joint.

    Joints seen in fewer than ``min_views`` views (or in degenerate
    geometry) are invalid. Returns the pose and per-joint mean reprojection
    residuals (NaN where invalid).
    """
    joints = np.full((NUM_JOINTS, 3), np.nan)
    resid = np.full(NUM_JOINTS, np.nan)
    for j in range(NUM_JOINTS):
        items = [
            (cam, o.keypoints[j], o.confidence[j])
            for cam, o in zip(cams, obs.views)
            if o is not None and o.confidence[j] > 0
        ]
        if len(items) < max(min_views, 2):
            continue
        try:
            joints[j], resid[j] = triangulate(items)
        except NumericalError as exc:
            log.debug("joint %d not triangulated: %s", j, exc)
    return HandPose3D(joints), resid


def _rigid_fit(src: np.ndarray, dst: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Rigidly move ``src`` onto ``dst`` using the joints in ``mask``."""
    a, b = src[mask], dst[mask]
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    R = procrustes_rotation(a - ca, b - cb)
    return (src - ca) @ R.T + cb


def initial_pose(tri: HandPose3D, template: Optional[HandPose3D] = None) -> Optional[HandPose3D]:
    """Fill joints the triangulation missed.

    Missing joints come from ``template`` (the previous solution) or the
    canonical hand, rigidly aligned to the triangulated joints when at least
    three non-collinear ones exist, otherwise translated onto the
    triangulated wrist. Returns None when nothing anchors the hand.
    """
    if tri.valid.all():
        return tri
    shape = template if template is not None and template.valid.all() else canonical_hand()
    X = shape.joints
    m = tri.valid
    if m.sum() >= 3:
        centered = tri.joints[m] - tri.joints[m].mean(axis=0)
        if np.linalg.svd(centered, compute_uv=False)[1] > 1e-6:
            filled = _rigid_fit(X, tri.joints, m)
            return HandPose3D(np.where(m[:, None], tri.joints, filled))
    if m[WRIST]:
        filled = X - X[WRIST] + tri.joints[WRIST]
    elif m.any():
        filled = X - X[m].mean(axis=0) + tri.joints[m].mean(axis=0)
    elif template is not None:
        return template
    else:
        return None
    return HandPose3D(np.where(m[:, None], tri.joints, filled))


def _prepare(obs: Optional[FrameObservations], threshold: Optional[float], wrist: bool) -> Optional[FrameObservations]:
    if obs is None:
        return None
    views = []
    for o in obs.views:
        if o is not None:
            if threshold is not None:
                o = filter_keypoints(o, threshold)
            if wrist:
                o = override_wrist(o)
        views.append(o)
    return FrameObservations(tuple(views))


def solve_frame(
    prev_pose: Optional[HandPose3D],
    init: HandPose3D,
    obs: Optional[FrameObservations],
    cams: Sequence[CameraParams],
    weights: LossWeights = LossWeights(),
    limits: Optional[BiomechLimits] = None,
    opts: SolverOptions = SolverOptions(),
    skel: SkeletonDef = HAND21,
    wrist_override: bool = True,
    nominal: Optional[NominalBoneLengths] = None,
) -> tuple[HandPose3D, FrameReport]:
    """Minimise the weighted frame objective over the valid joints of ``init``.

    ``prev_pose`` is held constant. Present wrist keypoints get confidence
    1.0 before solving unless ``wrist_override`` is False.
    """
    obs = _prepare(obs, None, wrist_override)
    valid = init.valid
    if not valid.any():
        raise InsufficientViews("initial pose has no valid joints")
    packed = pack_observations(obs, cams) if obs is not None else None
    limits = limits or BiomechLimits()
    base = np.where(valid[:, None], init.joints, 0.0)
    x0 = base[valid].ravel()

    def objective(x):
        X = base.copy()
        X[valid] = x.reshape(-1, 3)
        res = total_terms(X, valid, prev_pose, packed, weights, limits, nominal, skel)
        return res.value, res.gradient[valid].ravel()

    r = opts.bound_radius
    x, lb = lbfgs_minimize(objective, x0, opts, x0 - r, x0 + r)
    X = base.copy()
    X[valid] = x.reshape(-1, 3)
    final = total_terms(X, valid, prev_pose, packed, weights, limits, nominal, skel)
    report = FrameReport(
        iterations=lb.iterations,
        initial_objective=lb.initial_value,
        final_objective=lb.final_value,
        converged=lb.converged,
        reason=lb.reason,
        terms=dict(final.terms),
        steps=tuple(lb.steps),
    )
    return HandPose3D(X, valid), report


def _interpolate(poses: list, solved: np.ndarray) -> list:
    idx = np.flatnonzero(solved)
    out = list(poses)
    if len(idx) == 0:
        return [HandPose3D(np.full((NUM_JOINTS, 3), np.nan)) for _ in poses]
    for t in np.flatnonzero(~solved):
        after = idx[idx > t]
        before = idx[idx < t]
        if len(before) and len(after):
            a, b = before[-1], after[0]
            w = (t - a) / (b - a)
            pa, pb = poses[a], poses[b]
            out[t] = HandPose3D((1 - w) * pa.joints + w * pb.joints, pa.valid & pb.valid)
        else:
            out[t] = poses[before[-1] if len(before) else after[0]]
    return out


def solve_sequence(
    frames: Sequence[Optional[FrameObservations]],
    cams: Sequence[CameraParams],
    weights: LossWeights = LossWeights(),
    opts: SolverOptions = SolverOptions(),
    skel: SkeletonDef = HAND21,
    limits: Optional[BiomechLimits] = None,
    keypoint_threshold: float = KEYPOINT_THRESHOLD,
    wrist_override: bool = True,
) -> tuple[list[HandPose3D], SolveReport]:
    """Sequentially solve one hand's trajectory over overlapping windows.

    Frame 0 (and any frame without a solved predecessor) is solved with the
    temporal and shape weights set to zero. Frames with no usable
    observation are filled by linear interpolation between solved
    neighbours and flagged in the report.
    """
    n = len(frames)
    if n == 0:
        raise ValueError("need at least one frame")
    prepared = [_prepare(f, keypoint_threshold, wrist_override) for f in frames]
    tri = [
        triangulate_pose(f, cams)[0] if f is not None else HandPose3D(np.full((NUM_JOINTS, 3), np.nan))
        for f in prepared
    ]
    has_obs = [f is not None and f.n_present().any() for f in prepared]

    report = SolveReport(windows=window_offsets(n, opts.window_size, opts.window_overlap))
    solution: list = [None] * n
    frame_reports: list = [FrameReport(frame=t) for t in range(n)]
    last_solved: Optional[HandPose3D] = None
    for w, start in enumerate(report.windows):
        end = min(start + opts.window_size, n)
        if w > 0:
            # resume from the solution just before this window
            prior = [solution[t] for t in range(start) if solution[t] is not None]
            last_solved = prior[-1] if prior else None
        for t in range(start, end):
            init = solution[t]
            if init is None:
                if not has_obs[t]:
                    continue
                init = initial_pose(tri[t], last_solved)
                if init is None:
                    continue
            wts = weights if last_solved is not None else weights.replace(smooth=0.0, shape=0.0)
            pose, fr = solve_frame(
                last_solved, init, prepared[t], cams, wts, limits, opts, skel, wrist_override=False
            )
            fr.frame, fr.window = t, w
            solution[t] = pose
            frame_reports[t] = fr
            report.history.append(fr)
            last_solved = pose

    solved = np.array([s is not None for s in solution])
    for t in np.flatnonzero(~solved):
        frame_reports[t].interpolated = True
        frame_reports[t].reason = "interpolated"
    report.frames = frame_reports
    return _interpolate(solution, solved), report


def fit_ground_truth(
    annotations: Sequence[FrameObservations],
    cams: Sequence[CameraParams],
    skel: SkeletonDef = HAND21,
    lambda_reproj: float = 1.0,
    lambda_bone: float = 100.0,
    opts: SolverOptions = SolverOptions(),
    groups: Optional[Sequence] = None,
) -> tuple[list[HandPose3D], dict, LbfgsReport]:
    """Refine triangulated annotations jointly with a bone-length prior.

    ``annotations`` holds one entry per annotated hand instance (all frames
    of one subject together). ``groups`` optionally assigns each instance a
    key (e.g. hand id); nominal lengths are estimated per key as the median
    triangulated length. Returns the refined poses, the nominal lengths per
    key, and the optimiser report. Joints seen in fewer than two views stay
    invalid.
    """
    groups = list(groups) if groups is not None else [0] * len(annotations)
    if len(groups) != len(annotations):
        raise ValueError("groups must align with annotations")
    tri = [triangulate_pose(a, cams)[0] for a in annotations]
    for i, p in enumerate(tri):
        if not p.valid.all():
            log.info("instance %d: joints %s lack two views", i, np.flatnonzero(~p.valid).tolist())
    nominal = {}
    for key in dict.fromkeys(groups):
        nominal[key] = estimate_nominal_lengths([p for p, g in zip(tri, groups) if g == key], skel)
    lengths = np.array([nominal[g].lengths for g in groups]).reshape(-1, len(skel.bones))

    packed = [pack_observations(a, cams) for a in annotations]
    valid = np.array([p.valid for p in tri])
    base = np.where(valid[..., None], np.array([p.joints for p in tri]), 0.0)
    x0 = base[valid].ravel()

    def objective(x):
        X = base.copy()
        X[valid] = x.reshape(-1, 3)
        value = 0.0
        grad = np.zeros_like(X)
        if lambda_reproj > 0:
            for i, pk in enumerate(packed):
                v, g = reproj_terms(X[i], valid[i], pk)
                value += lambda_reproj * v
                grad[i] += lambda_reproj * g
        if lambda_bone > 0:
            v, g = bone_terms(X, valid, lengths, skel)
            value += lambda_bone * v
            grad += lambda_bone * g
        return value, grad[valid].ravel()

    if len(x0) == 0:
        return tri, nominal, LbfgsReport(reason="nothing to optimise")
    r = opts.bound_radius
    x, rep = lbfgs_minimize(objective, x0, opts, x0 - r, x0 + r)
    X = base.copy()
    X[valid] = x.reshape(-1, 3)
    return [HandPose3D(X[i], valid[i]) for i in range(len(tri))], nominal, rep
