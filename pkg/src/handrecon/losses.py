"""Loss terms over 3D joint positions with analytic gradients.

Every loss returns ``(value, gradient)`` where ``gradient`` has the shape of
the joint array (``(21, 3)`` per pose) and is zero on invalid joints.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DegenerateShape, ZeroLengthBone
from .geometry import MIN_DEPTH, CameraParams
from .skeleton import HAND21, NUM_JOINTS, WRIST, HandPose3D, NominalBoneLengths, SkeletonDef

log = logging.getLogger(__name__)

HINGE_WIDTH = 1e-3  # rad
MIN_BONE = 1e-6  # mm
COLLINEAR_TOL = 1e-9


@dataclass(frozen=True)
class LossWeights:
    reproj: float = 1.0
    smooth: float = 20.0
    shape: float = 50.0
    biomech: float = 0.0
    bone: float = 0.0

    def __post_init__(self):
        for name in ("reproj", "smooth", "shape", "biomech", "bone"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)

    def replace(self, **kw) -> "LossWeights":
        d = {k: getattr(self, k) for k in ("reproj", "smooth", "shape", "biomech", "bone")}
        d.update(kw)
        return LossWeights(**d)


@dataclass(frozen=True, eq=False)
class HandObservation2D:
    """21 keypoints ``(u, v)`` in pixels and confidences in [0, 1].

    A keypoint with confidence 0 is absent; its coordinates are ignored.
    """

    keypoints: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=np.float64).reshape(NUM_JOINTS, 2)
        c = np.array(self.confidence, dtype=np.float64).reshape(NUM_JOINTS)
        if np.any(~np.isfinite(c)) or np.any(c < 0) or np.any(c > 1):
            raise ValueError("confidences must lie in [0, 1]")
        c[~np.all(np.isfinite(kp), axis=1)] = 0.0
        if np.any(~np.isfinite(kp[c > 0])):
            raise ValueError("present keypoints must be finite")
        kp.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "confidence", c)

    @property
    def present(self) -> np.ndarray:
        return self.confidence > 0

    @property
    def mean_confidence(self) -> float:
        return float(np.mean(self.confidence))


@dataclass(frozen=True)
class FrameObservations:
    """One hand at one timestamp: an optional observation per view, aligned with the camera list."""

    views: tuple

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))

    @classmethod
    def empty(cls, n_views: int) -> "FrameObservations":
        return cls((None,) * n_views)

    def n_present(self) -> np.ndarray:
        """Number of views observing each joint."""
        n = np.zeros(NUM_JOINTS, dtype=int)
        for o in self.views:
            if o is not None:
                n += o.present
        return n


_DEG = math.pi / 180.0


@dataclass(frozen=True, eq=False)
class BiomechLimits:
    """Joint-angle bounds in radians.

    ``flexion`` is (15, 2): per finger (thumb..little) the proximal, middle
    and distal articulation. ``abduction`` is (5, 2), one per finger base.
    """

    flexion: np.ndarray = field(
        default_factory=lambda: np.tile(np.array([[0, 110], [0, 90], [0, 80]]) * _DEG, (5, 1))
    )
    abduction: np.ndarray = field(default_factory=lambda: np.tile(np.array([[-25.0, 25.0]]) * _DEG, (5, 1)))

    def __post_init__(self):
        flex = np.array(self.flexion, dtype=np.float64).reshape(15, 2)
        abd = np.array(self.abduction, dtype=np.float64).reshape(5, 2)
        for arr in (flex, abd):
            if np.any(arr[:, 0] >= arr[:, 1]):
                raise ValueError("each limit needs min < max")
            if np.any(np.abs(arr) >= math.pi):
                raise ValueError("limits must lie within (-pi, pi)")
        object.__setattr__(self, "flexion", flex)
        object.__setattr__(self, "abduction", abd)

    @classmethod
    def from_json(cls, text: str) -> "BiomechLimits":
        d = json.loads(text)
        return cls(np.asarray(d["flexion"]), np.asarray(d["abduction"]))

    def to_json(self) -> str:
        return json.dumps({"flexion": self.flexion.tolist(), "abduction": self.abduction.tolist()})


class PackedObservations(NamedTuple):
    """Stacked per-view arrays used by the vectorised reprojection loss."""

    K: np.ndarray  # (V, 3, 3)
    R: np.ndarray  # (V, 3, 3)
    t: np.ndarray  # (V, 3)
    uv: np.ndarray  # (V, 21, 2)
    conf: np.ndarray  # (V, 21)


def pack_observations(obs: FrameObservations, cams: Sequence[CameraParams]) -> PackedObservations:
    if len(obs.views) != len(cams):
        raise ValueError("observation views and cameras are not aligned")
    idx = [i for i, o in enumerate(obs.views) if o is not None]
    uv = np.zeros((len(idx), NUM_JOINTS, 2))
    conf = np.zeros((len(idx), NUM_JOINTS))
    for n, i in enumerate(idx):
        o = obs.views[i]
        conf[n] = o.confidence
        uv[n] = np.where(o.present[:, None], o.keypoints, 0.0)
    return PackedObservations(
        np.array([cams[i].intrinsics for i in idx]).reshape(-1, 3, 3),
        np.array([cams[i].rotation for i in idx]).reshape(-1, 3, 3),
        np.array([cams[i].translation for i in idx]).reshape(-1, 3),
        uv,
        conf,
    )


def reproj_terms(X: np.ndarray, valid: np.ndarray, packed: PackedObservations) -> tuple[float, np.ndarray]:
    """Confidence-weighted squared reprojection error on raw arrays."""
    grad = np.zeros((NUM_JOINTS, 3))
    if len(packed.conf) == 0:
        return 0.0, grad
    X0 = np.where(valid[:, None], X, 0.0)
    xc = np.einsum("vij,nj->vni", packed.R, X0) + packed.t[:, None, :]
    q = np.einsum("vij,vnj->vni", packed.K, xc)
    z = q[..., 2]
    front = z > MIN_DEPTH
    w = packed.conf * valid[None, :] * front
    if np.any(~front & (packed.conf > 0) & valid[None, :]):
        log.debug("dropping %d joint observations behind a camera", int(np.sum(~front & (packed.conf > 0))))
    zs = np.where(front, z, 1.0)
    proj = q[..., :2] / zs[..., None]
    r = np.where(w[..., None] > 0, proj - packed.uv, 0.0)
    value = float(np.sum(w * np.sum(r * r, axis=-1)))
    gq = np.empty_like(q)
    s = 2.0 * w / zs
    gq[..., 0] = s * r[..., 0]
    gq[..., 1] = s * r[..., 1]
    gq[..., 2] = -s * (r[..., 0] * proj[..., 0] + r[..., 1] * proj[..., 1])
    g_xc = np.einsum("vni,vij->vnj", gq, packed.K)
    grad = np.einsum("vni,vij->nj", g_xc, packed.R)
    grad[~valid] = 0.0
    return value, grad


def reproj_loss(pose: HandPose3D, obs: FrameObservations, cams: Sequence[CameraParams]) -> tuple[float, np.ndarray]:
    """Sum over views and joints of ``c * ||project(X_j) - x_j||^2``.

    Joints behind a camera are dropped for that view.
    """
    return reproj_terms(pose.joints, pose.valid, pack_observations(obs, cams))


def smooth_terms(X, valid, P, pvalid) -> tuple[float, np.ndarray]:
    m = valid & pvalid
    d = np.where(m[:, None], X - P, 0.0)
    return float(np.sum(d * d)), 2.0 * d


def smooth_loss(pose: HandPose3D, prev: HandPose3D) -> tuple[float, np.ndarray]:
    """Squared joint displacement from the previous frame; ``prev`` is constant."""
    return smooth_terms(pose.joints, pose.valid, prev.joints, prev.valid)


def procrustes_rotation(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Proper rotation ``R`` minimising ``||A R^T - B||_F`` for centered ``(n, 3)`` sets.

    Uses the Kabsch sign correction so ``det(R) = +1`` even when the plain
    SVD solution would be a reflection.
    """
    U, _, Vt = np.linalg.svd(A.T @ B)
    V = Vt.T
    d = 1.0 if np.linalg.det(V @ U.T) >= 0 else -1.0
    return V @ np.diag([1.0, 1.0, d]) @ U.T


def _check_spread(C: np.ndarray, which: str) -> None:
    norms = np.linalg.norm(C, axis=1)
    ref = C[np.argmax(norms)]
    if norms.max() < COLLINEAR_TOL or np.max(np.linalg.norm(np.cross(ref, C), axis=1)) < COLLINEAR_TOL:
        raise DegenerateShape(f"{which} pose joints are collinear")


def shape_terms(X, valid, P, pvalid, return_rotation=False):
    if not (valid[WRIST] and pvalid[WRIST]):
        raise DegenerateShape("wrist must be valid in both poses")
    m = valid & pvalid
    if m.sum() < 3:
        raise DegenerateShape(f"need 3 shared valid joints, got {int(m.sum())}")
    A = X[m] - X[WRIST]
    B = P[m] - P[WRIST]
    _check_spread(A, "current")
    _check_spread(B, "previous")
    R = procrustes_rotation(A, B)
    resid = A @ R.T - B
    value = float(np.sum(resid * resid))
    gA = 2.0 * resid @ R
    grad = np.zeros((NUM_JOINTS, 3))
    grad[m] = gA
    grad[WRIST] -= gA.sum(axis=0)
    if return_rotation:
        return value, grad, R
    return value, grad


def shape_loss(pose: HandPose3D, prev: HandPose3D) -> tuple[float, np.ndarray]:
    """Rigid-motion-invariant shape change between wrist-centered poses.

    The gradient treats the Procrustes rotation as fixed; since the rotation
    is optimal this coincides with the gradient of the aligned residual.
    """
    return shape_terms(pose.joints, pose.valid, prev.joints, prev.valid)


def _hinge(x: np.ndarray, width: float = HINGE_WIDTH) -> tuple[np.ndarray, np.ndarray]:
    """Squared hinge ``max(0, x)^2`` with a cubic onset over ``[0, width]``.

    Value and first derivative are continuous everywhere.
    """
    val = np.zeros_like(x)
    der = np.zeros_like(x)
    mid = (x > 0) & (x < width)
    hi = x >= width
    val[mid] = x[mid] ** 3 / (3 * width)
    der[mid] = x[mid] ** 2 / width
    val[hi] = x[hi] ** 2 - width * x[hi] + width**2 / 3
    der[hi] = 2 * x[hi] - width
    return val, der


def _unit_backward(g_hat: np.ndarray, v_hat: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (g_hat - np.sum(g_hat * v_hat, axis=-1, keepdims=True) * v_hat) / norm[..., None]


def flexion_angles(X: np.ndarray, skel: SkeletonDef = HAND21) -> np.ndarray:
    """Unsigned angles between consecutive bones, (5, 3) for each finger's 3 articulations."""
    chains = np.array(skel.finger_chains)
    pts = np.concatenate([np.full((5, 1), WRIST), chains], axis=1)
    e = X[pts[:, 1:]] - X[pts[:, :-1]]  # (5, 4, 3)
    e1, e2 = e[:, :-1], e[:, 1:]
    return np.arctan2(np.linalg.norm(np.cross(e1, e2), axis=-1), np.sum(e1 * e2, axis=-1))


def palm_normal(X: np.ndarray, skel: SkeletonDef = HAND21) -> np.ndarray:
    chains = skel.finger_chains
    n = np.cross(X[chains[1][0]] - X[WRIST], X[chains[4][0]] - X[WRIST])
    return n / np.linalg.norm(n)


def abduction_angles(X: np.ndarray, skel: SkeletonDef = HAND21) -> np.ndarray:
    """Signed lateral deviation of each proximal phalanx out of its flexion plane, (5,)."""
    chains = np.array(skel.finger_chains)
    n = palm_normal(X, skel)
    b0 = X[chains[:, 0]] - X[WRIST]
    b1 = X[chains[:, 1]] - X[chains[:, 0]]
    b0 /= np.linalg.norm(b0, axis=1, keepdims=True)
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    return np.arcsin(np.clip(np.cross(b0, b1) @ n, -1.0, 1.0))


def biomech_terms(X, valid, skel: SkeletonDef, limits: BiomechLimits) -> tuple[float, np.ndarray]:
    grad = np.zeros((NUM_JOINTS, 3))
    value = 0.0
    chains = np.array(skel.finger_chains)
    ok = valid[WRIST] & np.all(valid[chains], axis=1)  # (5,)
    if not ok.any():
        return value, grad
    pts = np.concatenate([np.full((5, 1), WRIST), chains], axis=1)[ok]  # (F, 5)
    e = X[pts[:, 1:]] - X[pts[:, :-1]]  # (F, 4, 3)
    if np.any(np.linalg.norm(e, axis=-1) < MIN_BONE):
        raise ZeroLengthBone("a finger bone is shorter than 1e-6 mm")

    # flexion
    e1, e2 = e[:, :-1], e[:, 1:]
    cr = np.cross(e1, e2)
    s = np.linalg.norm(cr, axis=-1)
    c = np.sum(e1 * e2, axis=-1)
    theta = np.arctan2(s, c)
    lim = limits.flexion.reshape(5, 3, 2)[ok]
    v_hi, d_hi = _hinge(theta - lim[..., 1])
    v_lo, d_lo = _hinge(lim[..., 0] - theta)
    value += float(np.sum(v_hi + v_lo))
    dth = d_hi - d_lo  # dL/dtheta
    w = np.where(s[..., None] > 1e-12, cr / np.where(s > 1e-12, s, 1.0)[..., None], 0.0)
    denom = (s * s + c * c)[..., None]
    g1 = (c[..., None] * np.cross(e2, w) - s[..., None] * e2) / denom
    g2 = (c[..., None] * np.cross(w, e1) - s[..., None] * e1) / denom
    g1 *= dth[..., None]
    g2 *= dth[..., None]
    # e1 = p1 - p0, e2 = p2 - p1 with (p0, p1, p2) = pts[:, k:k+3]
    for k in range(3):
        np.add.at(grad, pts[:, k], -g1[:, k])
        np.add.at(grad, pts[:, k + 1], g1[:, k] - g2[:, k])
        np.add.at(grad, pts[:, k + 2], g2[:, k])

    # abduction (needs the palm plane)
    i_mcp, l_mcp = skel.finger_chains[1][0], skel.finger_chains[4][0]
    if valid[i_mcp] and valid[l_mcp]:
        p, q = X[i_mcp] - X[WRIST], X[l_mcp] - X[WRIST]
        n = np.cross(p, q)
        nn = np.linalg.norm(n)
        if nn < MIN_BONE**2:
            raise DegenerateShape("palm plane is degenerate")
        nh = n / nn
        b0, b1 = e[:, 0], e[:, 1]
        n0 = np.linalg.norm(b0, axis=1)
        n1 = np.linalg.norm(b1, axis=1)
        h0, h1 = b0 / n0[:, None], b1 / n1[:, None]
        u = np.clip(np.cross(h0, h1) @ nh, -1.0, 1.0)
        alpha = np.arcsin(u)
        alim = limits.abduction[ok]
        a_hi, ad_hi = _hinge(alpha - alim[:, 1])
        a_lo, ad_lo = _hinge(alim[:, 0] - alpha)
        value += float(np.sum(a_hi + a_lo))
        du = (ad_hi - ad_lo) / np.sqrt(np.maximum(1.0 - u * u, 1e-300))
        active = du != 0
        if np.any(active):
            du = du[:, None]
            g_h0 = du * np.cross(h1, nh)
            g_h1 = du * np.cross(nh, h0)
            g_nh = np.sum(du * np.cross(h0, h1), axis=0)
            g_b0 = _unit_backward(g_h0, h0, n0)
            g_b1 = _unit_backward(g_h1, h1, n1)
            g_n = _unit_backward(g_nh, nh, np.asarray(nn))
            # b0 = X[mcp] - X[wrist], b1 = X[pip] - X[mcp]
            np.add.at(grad, pts[:, 0], -g_b0)
            np.add.at(grad, pts[:, 1], g_b0 - g_b1)
            np.add.at(grad, pts[:, 2], g_b1)
            g_p = np.cross(q, g_n)
            g_q = np.cross(g_n, p)
            grad[i_mcp] += g_p
            grad[l_mcp] += g_q
            grad[WRIST] -= g_p + g_q
    grad[~valid] = 0.0
    return value, grad


def biomech_loss(
    pose: HandPose3D, skel: SkeletonDef = HAND21, limits: Optional[BiomechLimits] = None
) -> tuple[float, np.ndarray]:
    """Smoothed squared-hinge penalty on flexion and abduction angles outside ``limits``."""
    return biomech_terms(pose.joints, pose.valid, skel, limits or BiomechLimits())


def bone_terms(X: np.ndarray, valid: np.ndarray, nominal: np.ndarray, skel: SkeletonDef) -> tuple[float, np.ndarray]:
    """Bone-length term on stacked ``(N, 21, 3)`` hand instances; ``nominal`` is (20,) or (N, 20)."""
    b = skel.bone_array
    N = X.shape[0]
    d = X[:, b[:, 1]] - X[:, b[:, 0]]  # (N, 20, 3)
    ok = valid[:, b[:, 0]] & valid[:, b[:, 1]]
    d = np.where(ok[..., None], d, 0.0)
    length = np.linalg.norm(d, axis=-1)
    r = np.where(ok, length - np.broadcast_to(nominal, length.shape), 0.0)
    norm = N * len(b)
    value = float(np.sum(r * r)) / norm
    coef = np.where(ok & (length > 0), 2.0 * r / np.where(length > 0, length, 1.0), 0.0) / norm
    gd = coef[..., None] * d
    grad = np.zeros_like(X)
    for i, (j, k) in enumerate(b):
        grad[:, k] += gd[:, i]
        grad[:, j] -= gd[:, i]
    return value, grad


def bone_loss(
    poses: Sequence[HandPose3D], nominal, skel: SkeletonDef = HAND21
) -> tuple[float, np.ndarray]:
    """Mean squared deviation from nominal bone lengths over all hands, frames and bones.

    Normalised by ``len(poses) * n_bones`` regardless of missing joints.
    ``nominal`` is one :class:`NominalBoneLengths` or one per pose.
    Returns the gradient as ``(len(poses), 21, 3)``.
    """
    if isinstance(nominal, NominalBoneLengths):
        lengths = nominal.lengths
    else:
        lengths = np.array([n.lengths for n in nominal])
    X = np.array([p.joints for p in poses]).reshape(-1, NUM_JOINTS, 3)
    V = np.array([p.valid for p in poses]).reshape(-1, NUM_JOINTS)
    if len(X) == 0:
        return 0.0, np.zeros((0, NUM_JOINTS, 3))
    return bone_terms(X, V, lengths, skel)


class LossResult(NamedTuple):
    value: float
    gradient: np.ndarray
    terms: dict  # unweighted values of the evaluated terms


def total_loss(
    pose: HandPose3D,
    prev: Optional[HandPose3D],
    obs: Optional[FrameObservations],
    cams: Sequence[CameraParams],
    weights: LossWeights,
    limits: Optional[BiomechLimits] = None,
    nominal: Optional[NominalBoneLengths] = None,
    skel: SkeletonDef = HAND21,
) -> LossResult:
    """Weighted sum of the enabled terms. Terms with weight 0 are not evaluated."""
    packed = pack_observations(obs, cams) if obs is not None else None
    return total_terms(pose.joints, pose.valid, prev, packed, weights, limits, nominal, skel)


def total_terms(X, valid, prev, packed, weights, limits=None, nominal=None, skel=HAND21) -> LossResult:
    value = 0.0
    grad = np.zeros((NUM_JOINTS, 3))
    terms = {}
    if weights.reproj > 0 and packed is not None:
        v, g = reproj_terms(X, valid, packed)
        terms["reproj"] = v
        value += weights.reproj * v
        grad += weights.reproj * g
    if weights.smooth > 0 and prev is not None:
        v, g = smooth_terms(X, valid, prev.joints, prev.valid)
        terms["smooth"] = v
        value += weights.smooth * v
        grad += weights.smooth * g
    if weights.shape > 0 and prev is not None:
        v, g = shape_terms(X, valid, prev.joints, prev.valid)
        terms["shape"] = v
        value += weights.shape * v
        grad += weights.shape * g
    if weights.biomech > 0:
        v, g = biomech_terms(X, valid, skel, limits or BiomechLimits())
        terms["biomech"] = v
        value += weights.biomech * v
        grad += weights.biomech * g
    if weights.bone > 0 and nominal is not None:
        v, g = bone_terms(X[None], valid[None], nominal.lengths, skel)
        terms["bone"] = v
        value += weights.bone * v
        grad += weights.bone * g[0]
    return LossResult(value, grad, terms)
