"""Pose evaluation metrics: MPJPE, MRE, MJE, PCK/mPCK in 2D and 3D, and OKS-based AP."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyEvaluation
from .geometry import CameraParams, project_points
from .losses import FrameObservations, HandObservation2D
from .skeleton import NUM_JOINTS, WRIST, HandPose3D

PCK2D_THRESHOLDS = (5.0, 10.0, 20.0, 30.0)  # px
PCK3D_THRESHOLDS = (5.0, 10.0, 25.0, 50.0)  # mm
OKS_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
HAND_MATCH_GATE = 200.0  # mm


def default_joint_mask() -> np.ndarray:
    """All joints except the wrist and thumb base, whose annotations are least reliable."""
    mask = np.ones(NUM_JOINTS, dtype=bool)
    mask[[0, 1]] = False
    return mask


@dataclass(frozen=True, eq=False)
class MetricsConfig:
    pck2d_thresholds: tuple = PCK2D_THRESHOLDS
    pck3d_thresholds: tuple = PCK3D_THRESHOLDS
    oks_thresholds: tuple = OKS_THRESHOLDS
    oks_sigma: np.ndarray = field(default_factory=lambda: np.full(NUM_JOINTS, 0.035))
    joint_mask: np.ndarray = field(default_factory=default_joint_mask)
    coco_ap: bool = False  # 101-point interpolated AP instead of mean precision

    def __post_init__(self):
        for name in ("pck2d_thresholds", "pck3d_thresholds", "oks_thresholds"):
            th = tuple(float(x) for x in getattr(self, name))
            if len(th) == 0 or any(b <= a for a, b in zip(th, th[1:])) or th[0] <= 0:
                raise ValueError(f"{name} must be positive and strictly increasing")
            object.__setattr__(self, name, th)
        sigma = np.broadcast_to(np.asarray(self.oks_sigma, dtype=np.float64), (NUM_JOINTS,)).copy()
        if np.any(sigma <= 0):
            raise ValueError("oks_sigma must be positive")
        mask = np.asarray(self.joint_mask, dtype=bool).reshape(NUM_JOINTS)
        if not mask.any():
            raise ValueError("joint_mask must keep at least one joint")
        object.__setattr__(self, "oks_sigma", sigma)
        object.__setattr__(self, "joint_mask", mask)


def _mask(mask) -> np.ndarray:
    return default_joint_mask() if mask is None else np.asarray(mask, dtype=bool)


def errors_3d(pred: Sequence[HandPose3D], gt: Sequence[HandPose3D], mask=None) -> np.ndarray:
    """Per-joint Euclidean errors (mm) over evaluated (frame, joint) pairs, in frame-major order."""
    if len(pred) != len(gt):
        raise ValueError("pred and gt sequences must be aligned")
    mask = _mask(mask)
    out = []
    for p, g in zip(pred, gt):
        m = mask & g.valid & p.valid
        out.append(np.linalg.norm(p.joints[m] - g.joints[m], axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def errors_reproj(
    pred: Sequence[HandPose3D], gt2d: Sequence[FrameObservations], cams: Sequence[CameraParams], mask=None
) -> np.ndarray:
    """Pixel distance between projected predictions and 2D ground truth, over (frame, view, joint)."""
    if len(pred) != len(gt2d):
        raise ValueError("pred and gt sequences must be aligned")
    mask = _mask(mask)
    out = []
    for p, g in zip(pred, gt2d):
        for cam, o in zip(cams, g.views):
            if o is None:
                continue
            uv, front = project_points(p.joints, cam)
            m = mask & o.present & p.valid & front
            out.append(np.linalg.norm(uv[m] - o.keypoints[m], axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def errors_2d(pred2d: Sequence[FrameObservations], gt2d: Sequence[FrameObservations], mask=None) -> np.ndarray:
    """Pixel distance between 2D predictions and 2D ground truth, over (frame, view, joint)."""
    if len(pred2d) != len(gt2d):
        raise ValueError("pred and gt sequences must be aligned")
    mask = _mask(mask)
    out = []
    for p, g in zip(pred2d, gt2d):
        for po, go in zip(p.views, g.views):
            if po is None or go is None:
                continue
            m = mask & po.present & go.present
            out.append(np.linalg.norm(po.keypoints[m] - go.keypoints[m], axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def _mean(err: np.ndarray, what: str) -> float:
    if err.size == 0:
        raise EmptyEvaluation(f"no joints left to evaluate for {what}")
    return float(np.mean(err))


def mpjpe(pred, gt, mask=None) -> float:
    return _mean(errors_3d(pred, gt, mask), "MPJPE")


def mre(pred3d, gt2d, cams, mask=None) -> float:
    return _mean(errors_reproj(pred3d, gt2d, cams, mask), "MRE")


def mje(pred2d, gt2d, mask=None) -> float:
    return _mean(errors_2d(pred2d, gt2d, mask), "MJE")


def pck(errors, thresholds) -> np.ndarray:
    """Fraction of errors strictly below each threshold."""
    err = np.asarray(errors, dtype=np.float64).reshape(-1)
    if err.size == 0:
        raise EmptyEvaluation("no errors to score")
    th = np.asarray(thresholds, dtype=np.float64)
    return np.array([np.count_nonzero(err < t) / err.size for t in th])


def mpck(fractions) -> float:
    return float(np.mean(fractions))


# --- OKS / AP -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KeypointInstance:
    """A 2D hand instance for AP: keypoints, per-joint visibility and a detection score."""

    keypoints: np.ndarray
    visible: np.ndarray
    score: float = 1.0


def instance_from_observation(o: HandObservation2D, score: Optional[float] = None) -> KeypointInstance:
    return KeypointInstance(o.keypoints, o.present, o.mean_confidence if score is None else score)


def oks(pred: KeypointInstance, gt: KeypointInstance, sigma: np.ndarray, mask=None) -> float:
    """Object keypoint similarity with scale ``s = sqrt(area of the visible gt keypoints' box)``."""
    vis = np.asarray(gt.visible, dtype=bool) & _mask(mask)
    if not vis.any():
        return 0.0
    pts = gt.keypoints[vis]
    area = float(np.prod(pts.max(axis=0) - pts.min(axis=0)))
    s2 = max(area, 1.0)
    d2 = np.sum((pred.keypoints[vis] - pts) ** 2, axis=1)
    d2 = np.where(np.isfinite(d2), d2, np.inf)
    return float(np.mean(np.exp(-d2 / (2.0 * s2 * sigma[vis] ** 2))))


def _match(preds, gts, sigma, mask, threshold):
    """Greedy score-descending matching within one image; returns per-pred match flags in score order."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    flags = []
    for i in order:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            o = oks(preds[i], g, sigma, mask)
            if o >= threshold and o > best:
                best, best_j = o, j
        if best_j >= 0:
            taken[best_j] = True
        flags.append((preds[i].score, best_j >= 0))
    return flags


def average_precision(pred_sets, gt_sets, cfg: MetricsConfig = MetricsConfig()) -> Optional[float]:
    """AP over OKS thresholds. ``pred_sets``/``gt_sets`` are aligned lists of per-image instance lists.

    By default this is the mean over thresholds of matched predictions /
    all predictions. With ``cfg.coco_ap`` each threshold instead uses the
    101-point interpolated precision-recall area. Returns None when there
    are neither predictions nor ground truth.
    """
    if len(pred_sets) != len(gt_sets):
        raise ValueError("prediction and ground-truth image lists must be aligned")
    n_pred = sum(len(p) for p in pred_sets)
    n_gt = sum(len(g) for g in gt_sets)
    if n_pred == 0 and n_gt == 0:
        return None
    if n_pred == 0 or n_gt == 0:
        return 0.0
    per_threshold = []
    for th in cfg.oks_thresholds:
        flags = []
        for preds, gts in zip(pred_sets, gt_sets):
            flags.extend(_match(preds, gts, cfg.oks_sigma, cfg.joint_mask, th))
        if not cfg.coco_ap:
            per_threshold.append(sum(f for _, f in flags) / n_pred)
            continue
        order = np.argsort([-s for s, _ in flags], kind="mergesort")
        tp = np.cumsum([flags[i][1] for i in order])
        fp = np.cumsum([not flags[i][1] for i in order])
        recall = tp / n_gt
        precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
        precision = np.maximum.accumulate(precision[::-1])[::-1]
        samples = []
        for r in np.linspace(0.0, 1.0, 101):
            k = np.searchsorted(recall, r, side="left")
            samples.append(precision[k] if k < len(precision) else 0.0)
        per_threshold.append(float(np.mean(samples)))
    return float(np.mean(per_threshold))


# --- hand association -------------------------------------------------------


def _anchor(p: HandPose3D) -> Optional[np.ndarray]:
    if p.valid[WRIST]:
        return p.joints[WRIST]
    if p.valid.any():
        return p.joints[p.valid].mean(axis=0)
    return None


def match_hands(pred: Sequence[HandPose3D], gt: Sequence[HandPose3D], gate: float = HAND_MATCH_GATE):
    """Greedy nearest-wrist pairing of predicted and ground-truth hands within one frame.

    Returns ``(pred_index, gt_index)`` pairs with wrist distance below ``gate`` mm.
    """
    cands = []
    for i, p in enumerate(pred):
        a = _anchor(p)
        for j, g in enumerate(gt):
            b = _anchor(g)
            if a is None or b is None:
                continue
            d = float(np.linalg.norm(a - b))
            if d < gate:
                cands.append((d, i, j))
    cands.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            pairs.append((i, j))
    return sorted(pairs)


# --- report ---------------------------------------------------------------


@dataclass
class MetricsReport:
    mpjpe: Optional[float] = None  # mm
    mre: Optional[float] = None  # px
    mje: Optional[float] = None  # px
    pck2d: Optional[dict] = None
    pck3d: Optional[dict] = None
    mpck2d: Optional[float] = None
    mpck3d: Optional[float] = None
    ap: Optional[float] = None
    pck2d_source: Optional[str] = None  # "reprojected-3d" or "direct-2d"
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _pck_dict(fracs, thresholds) -> dict:
    return {f"{t:g}": float(f) for t, f in zip(thresholds, fracs)}


def evaluate(
    cfg: MetricsConfig = MetricsConfig(),
    pred3d: Optional[Sequence[HandPose3D]] = None,
    gt3d: Optional[Sequence[HandPose3D]] = None,
    pred2d: Optional[Sequence[FrameObservations]] = None,
    gt2d: Optional[Sequence[FrameObservations]] = None,
    cams: Optional[Sequence[CameraParams]] = None,
    ap_sets: Optional[tuple] = None,
) -> MetricsReport:
    """Compute every metric the supplied inputs allow.

    Sequences are aligned hand instances. 3D predictions are scored in 2D
    through their reprojections when ``cams`` and ``gt2d`` are given.
    ``ap_sets`` overrides the per-image ``(pred_sets, gt_sets)`` grouping
    used for AP; by default every (instance, view) is its own image.
    """
    rep = MetricsReport()
    mask = cfg.joint_mask
    if pred3d is not None and gt3d is not None:
        e3 = errors_3d(pred3d, gt3d, mask)
        rep.mpjpe = _mean(e3, "MPJPE")
        f3 = pck(e3, cfg.pck3d_thresholds)
        rep.pck3d, rep.mpck3d = _pck_dict(f3, cfg.pck3d_thresholds), mpck(f3)
        rep.counts["joints_3d"] = int(e3.size)
        rep.counts["instances_3d"] = len(gt3d)
    if gt2d is not None:
        if pred2d is not None:
            e2 = errors_2d(pred2d, gt2d, mask)
            rep.mje = _mean(e2, "MJE")
            rep.pck2d_source = "direct-2d"
        elif pred3d is not None and cams is not None:
            e2 = errors_reproj(pred3d, gt2d, cams, mask)
            rep.mre = rep.mje = _mean(e2, "MRE")
            rep.pck2d_source = "reprojected-3d"
            pred2d = [project_observations(p, cams) for p in pred3d]
        else:
            e2 = None
        if e2 is not None:
            f2 = pck(e2, cfg.pck2d_thresholds)
            rep.pck2d, rep.mpck2d = _pck_dict(f2, cfg.pck2d_thresholds), mpck(f2)
            rep.counts["joints_2d"] = int(e2.size)
            preds, gts = ap_sets if ap_sets is not None else observation_sets(pred2d, gt2d)
            rep.ap = average_precision(preds, gts, cfg)
            rep.counts["images_2d"] = len(gts)
    return rep


def project_observations(pose: HandPose3D, cams: Sequence[CameraParams]) -> FrameObservations:
    """Projected joints of a 3D pose as full-confidence 2D observations."""
    views = []
    for cam in cams:
        uv, front = project_points(pose.joints, cam)
        ok = front & pose.valid
        views.append(HandObservation2D(np.where(ok[:, None], uv, np.nan), ok.astype(float)))
    return FrameObservations(tuple(views))


def observation_sets(pred2d: Sequence[FrameObservations], gt2d: Sequence[FrameObservations]):
    """Per-(instance, view) singleton instance lists for AP."""
    preds, gts = [], []
    for p, g in zip(pred2d, gt2d):
        for po, go in zip(p.views, g.views):
            if go is None and po is None:
                continue
            preds.append([] if po is None or not po.present.any() else [instance_from_observation(po)])
            gts.append([] if go is None or not go.present.any() else [instance_from_observation(go)])
    return preds, gts
