"""Pinhole camera model, projection and weighted DLT triangulation.

World coordinates are millimeters, image coordinates are pixels. Cameras
map world points to the camera frame with ``X_cam = R @ X + t``; no lens
distortion is modelled (inputs are assumed undistorted).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateGeometry, InsufficientViews, InvalidCamera, NonPositiveDepth

MIN_DEPTH = 1e-9  # mm
DLT_CONDITION_LIMIT = 1e12
_ORTHO_TOL = 1e-9

Point2 = np.ndarray  # shape (2,), pixels
Point3 = np.ndarray  # shape (3,), millimeters


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CameraParams:
    """One calibrated view.

    ``rotation`` and ``translation`` are world-to-camera. ``intrinsics`` is
    the usual upper-triangular K with focal lengths and principal point in
    pixels.
    """

    id: str
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "intrinsics", _frozen(self.intrinsics, (3, 3)))
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        K, R = self.intrinsics, self.rotation
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(self.translation))):
            raise InvalidCamera(f"camera {self.id!r}: non-finite parameters")
        if np.max(np.abs(R @ R.T - np.eye(3))) > _ORTHO_TOL:
            raise InvalidCamera(f"camera {self.id!r}: rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InvalidCamera(f"camera {self.id!r}: rotation determinant is not +1")
        if K[2, 0] != 0.0 or K[2, 1] != 0.0 or K[2, 2] != 1.0:
            raise InvalidCamera(f"camera {self.id!r}: intrinsics last row must be [0, 0, 1]")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InvalidCamera(f"camera {self.id!r}: focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise InvalidCamera(f"camera {self.id!r}: image size must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix ``K [R | t]``."""
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def project(p, cam: CameraParams) -> Point2:
    """Project a world point to pixel coordinates.

    The result may lie outside the image; only points at or behind the
    camera plane are rejected.
    """
    xc = cam.to_camera(np.asarray(p, dtype=np.float64).reshape(3))
    if not xc[2] > MIN_DEPTH:
        raise NonPositiveDepth(f"point has camera-frame depth {xc[2]:.3g} mm in camera {cam.id!r}")
    q = cam.intrinsics @ xc
    return q[:2] / q[2]


def project_points(points: np.ndarray, cam: CameraParams) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection of ``(N, 3)`` points.

    Returns ``(uv, in_front)``; rows with ``in_front == False`` hold NaN.
    """
    xc = cam.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    in_front = xc[:, 2] > MIN_DEPTH
    q = xc @ cam.intrinsics.T
    uv = np.full((len(xc), 2), np.nan)
    uv[in_front] = q[in_front, :2] / q[in_front, 2:3]
    return uv, in_front


class Triangulation(NamedTuple):
    point: Point3
    residual: float  # mean reprojection error over positive-weight views, px


def triangulate(observations: Sequence[tuple[CameraParams, Point2, float]]) -> Triangulation:
    """Weighted linear (DLT) triangulation of a single point.

    Each observation is ``(camera, uv, weight)``. The two DLT rows of an
    observation are built in normalized image coordinates and scaled by its
    weight; the solution is the right singular vector of the smallest
    singular value.
    """
    rows = []
    used = []
    for cam, uv, w in observations:
        w = float(w)
        if not np.isfinite(w) or w < 0:
            raise ValueError(f"observation weight must be finite and >= 0, got {w}")
        if w == 0:
            continue
        x = np.linalg.solve(cam.intrinsics, np.array([uv[0], uv[1], 1.0]))
        P = np.hstack([cam.rotation, cam.translation[:, None]])
        rows.append(w * (x[0] / x[2] * P[2] - P[0]))
        rows.append(w * (x[1] / x[2] * P[2] - P[1]))
        used.append((cam, np.asarray(uv, dtype=np.float64)))
    if len(used) < 2:
        raise InsufficientViews(f"need at least 2 positive-weight observations, got {len(used)}")

    A = np.asarray(rows)
    # Condition the world scale so a millimeter-sized rig does not dominate.
    centers = np.array([cam.center for cam, _ in used])
    origin = centers.mean(axis=0)
    scale = max(float(np.mean(np.linalg.norm(centers - origin, axis=1))), 1.0)
    T = np.eye(4)
    T[:3, :3] *= scale
    T[:3, 3] = origin
    A = A @ T
    _, s, vt = np.linalg.svd(A)
    if s[2] <= s[0] / DLT_CONDITION_LIMIT:
        raise DegenerateGeometry("DLT system is rank-deficient (views are degenerate)")
    X = T @ vt[-1]
    if abs(X[3]) < 1e-12 * np.linalg.norm(X[:3]):
        raise DegenerateGeometry("triangulated point lies at infinity")
    point = X[:3] / X[3]

    errs = []
    for cam, uv in used:
        xc = cam.to_camera(point)
        if xc[2] > MIN_DEPTH:
            q = cam.intrinsics @ xc
            errs.append(float(np.hypot(*(q[:2] / q[2] - uv))))
    residual = float(np.mean(errs)) if errs else float("inf")
    return Triangulation(point, residual)
