"""JSON file formats: calibration, 2D keypoints, 3D trajectories and reports.

All readers raise :class:`SchemaError` with a field path on violations.
Writers are deterministic: same data, same bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import DataError, SchemaError
from .geometry import CameraParams
from .losses import FrameObservations, HandObservation2D
from .skeleton import NUM_JOINTS, HandPose3D, NominalBoneLengths

SKELETON_TAG = "hand21"
_DISTORTION_KEYS = ("dist", "distortion", "dist_coeffs", "D", "k1", "k2", "p1", "p2", "k3")


def load_json(path) -> Any:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}", str(path)) from exc


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, allow_nan=False) + "\n")


def _num(x, path, allow_none=False):
    if x is None and allow_none:
        return math.nan
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise SchemaError("expected a number", path)
    if not math.isfinite(x):
        raise SchemaError("expected a finite number", path)
    return float(x)


def _list(x, path, length=None):
    if not isinstance(x, list):
        raise SchemaError("expected an array", path)
    if length is not None and len(x) != length:
        raise SchemaError(f"expected {length} entries, got {len(x)}", path)
    return x


def _obj(x, path, keys=()):
    if not isinstance(x, dict):
        raise SchemaError("expected an object", path)
    for k in keys:
        if k not in x:
            raise SchemaError(f"missing field {k!r}", path)
    return x


def _header(data, path, units):
    _obj(data, path, ("header", "frames"))
    hdr = _obj(data["header"], f"{path}.header", ("units", "skeleton"))
    if hdr["units"] != units:
        raise SchemaError(f"units must be {units!r}, got {hdr['units']!r}", f"{path}.header.units")
    if hdr["skeleton"] != SKELETON_TAG:
        raise SchemaError(f"skeleton must be {SKELETON_TAG!r}, got {hdr['skeleton']!r}", f"{path}.header.skeleton")
    return hdr


# --- calibration ----------------------------------------------------------


def parse_calibration(data, path="calibration") -> list[CameraParams]:
    cams = []
    seen = set()
    for i, c in enumerate(_list(data, path)):
        p = f"{path}[{i}]"
        _obj(c, p, ("id", "K", "R", "t", "width", "height"))
        for k in _DISTORTION_KEYS:
            if k in c:
                vals = c[k] if isinstance(c[k], list) else [c[k]]
                if any(v not in (0, 0.0, None) for v in vals):
                    raise SchemaError("lens distortion is not supported; undistort the images upstream", f"{p}.{k}")
        if not isinstance(c["id"], str):
            raise SchemaError("expected a string", f"{p}.id")
        if c["id"] in seen:
            raise SchemaError(f"duplicate camera id {c['id']!r}", f"{p}.id")
        seen.add(c["id"])
        K = [_num(v, f"{p}.K[{k}]") for k, v in enumerate(_list(c["K"], f"{p}.K", 9))]
        R = [_num(v, f"{p}.R[{k}]") for k, v in enumerate(_list(c["R"], f"{p}.R", 9))]
        t = [_num(v, f"{p}.t[{k}]") for k, v in enumerate(_list(c["t"], f"{p}.t", 3))]
        for k in ("width", "height"):
            if isinstance(c[k], bool) or not isinstance(c[k], int):
                raise SchemaError("expected an integer", f"{p}.{k}")
        try:
            cams.append(CameraParams(c["id"], K, R, t, c["width"], c["height"]))
        except DataError as exc:
            raise SchemaError(str(exc), p) from exc
    if not cams:
        raise SchemaError("calibration lists no cameras", path)
    return cams


def calibration_to_json(cams: Sequence[CameraParams]) -> list:
    return [
        {
            "id": c.id,
            "K": c.intrinsics.ravel().tolist(),
            "R": c.rotation.ravel().tolist(),
            "t": c.translation.tolist(),
            "width": c.width,
            "height": c.height,
        }
        for c in cams
    ]


def load_calibration(path) -> list[CameraParams]:
    return parse_calibration(load_json(path), str(path))


# --- 2D keypoints ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HandEntry:
    hand_id: Any
    handedness: str
    obs: HandObservation2D


@dataclass
class KeypointData:
    """Frames of per-view hand detections (``frames[t][view_id] -> [HandEntry]``)."""

    frames: list
    fps: float = 30.0

    def hand_ids(self) -> list:
        ids = {}
        for fr in self.frames:
            for entries in fr.values():
                for e in entries:
                    ids.setdefault(e.hand_id, None)
        return list(ids)

    def view_ids(self) -> list:
        ids = {}
        for fr in self.frames:
            for v in fr:
                ids.setdefault(v, None)
        return list(ids)

    def hand_sequence(self, hand_id, cams: Sequence[CameraParams]) -> list[FrameObservations]:
        """One hand's observations per frame, views ordered like ``cams``."""
        out = []
        for fr in self.frames:
            views = []
            for cam in cams:
                match = [e.obs for e in fr.get(cam.id, []) if e.hand_id == hand_id]
                views.append(match[0] if match else None)
            out.append(FrameObservations(tuple(views)))
        return out

    def handedness(self, hand_id) -> str:
        for fr in self.frames:
            for entries in fr.values():
                for e in entries:
                    if e.hand_id == hand_id:
                        return e.handedness
        return "unknown"


def parse_keypoints(data, path="keypoints") -> KeypointData:
    hdr = _header(data, path, "px")
    fps = _num(hdr.get("fps", 30.0), f"{path}.header.fps")
    frames = []
    for t, fr in enumerate(_list(data["frames"], f"{path}.frames")):
        fp = f"{path}.frames[{t}]"
        views = _obj(_obj(fr, fp, ("views",))["views"], f"{fp}.views")
        parsed = {}
        for vid, vd in views.items():
            vp = f"{fp}.views.{vid}"
            hands = _list(_obj(vd, vp, ("hands",))["hands"], f"{vp}.hands")
            entries = []
            for h, hd in enumerate(hands):
                hp = f"{vp}.hands[{h}]"
                _obj(hd, hp, ("hand_id", "keypoints"))
                kps = _list(hd["keypoints"], f"{hp}.keypoints", NUM_JOINTS)
                arr = np.empty((NUM_JOINTS, 3))
                for j, kp in enumerate(kps):
                    kpp = f"{hp}.keypoints[{j}]"
                    u, v, c = _list(kp, kpp, 3)
                    c = _num(c, f"{kpp}[2]")
                    if not 0.0 <= c <= 1.0:
                        raise SchemaError("confidence must lie in [0, 1]", f"{kpp}[2]")
                    arr[j] = (_num(u, f"{kpp}[0]", allow_none=c == 0), _num(v, f"{kpp}[1]", allow_none=c == 0), c)
                entries.append(HandEntry(hd["hand_id"], str(hd.get("handedness", "unknown")), HandObservation2D(arr[:, :2], arr[:, 2])))
            ids = [e.hand_id for e in entries]
            if len(set(map(repr, ids))) != len(ids):
                raise SchemaError("duplicate hand_id within one view", f"{vp}.hands")
            parsed[vid] = entries
        frames.append(parsed)
    return KeypointData(frames, fps)


def load_keypoints(path) -> KeypointData:
    return parse_keypoints(load_json(path), str(path))


def _coord(x: float):
    return None if not math.isfinite(x) else float(x)


def keypoints_to_json(kd: KeypointData) -> dict:
    frames = []
    for fr in kd.frames:
        views = {}
        for vid, entries in fr.items():
            hands = []
            for e in entries:
                pts = [
                    [_coord(u), _coord(v), float(c)] if c > 0 else [None, None, 0.0]
                    for (u, v), c in zip(e.obs.keypoints, e.obs.confidence)
                ]
                hands.append({"hand_id": e.hand_id, "handedness": e.handedness, "keypoints": pts})
            views[vid] = {"hands": hands}
        frames.append({"views": views})
    return {"header": {"units": "px", "skeleton": SKELETON_TAG, "fps": kd.fps}, "frames": frames}


def check_views(kd: KeypointData, cams: Sequence[CameraParams], path="keypoints") -> None:
    known = {c.id for c in cams}
    for v in kd.view_ids():
        if v not in known:
            raise SchemaError(f"view {v!r} is not in the calibration", f"{path}.frames")


# --- 3D trajectories ------------------------------------------------------


@dataclass
class TrajectoryData:
    """``frames[t]`` maps hand id -> :class:`HandPose3D` (insertion-ordered)."""

    frames: list = field(default_factory=list)

    def hand_ids(self) -> list:
        ids = {}
        for fr in self.frames:
            for h in fr:
                ids.setdefault(h, None)
        return list(ids)


def parse_trajectory(data, path="trajectory") -> TrajectoryData:
    _header(data, path, "mm")
    frames = []
    for t, fr in enumerate(_list(data["frames"], f"{path}.frames")):
        fp = f"{path}.frames[{t}]"
        hands = {}
        for h, hd in enumerate(_list(_obj(fr, fp, ("hands",))["hands"], f"{fp}.hands")):
            hp = f"{fp}.hands[{h}]"
            _obj(hd, hp, ("hand_id", "joints", "valid"))
            valid = _list(hd["valid"], f"{hp}.valid", NUM_JOINTS)
            if not all(isinstance(v, bool) for v in valid):
                raise SchemaError("expected booleans", f"{hp}.valid")
            joints = np.full((NUM_JOINTS, 3), np.nan)
            for j, xyz in enumerate(_list(hd["joints"], f"{hp}.joints", NUM_JOINTS)):
                xyz = _list(xyz, f"{hp}.joints[{j}]", 3)
                joints[j] = [_num(x, f"{hp}.joints[{j}][{k}]", allow_none=not valid[j]) for k, x in enumerate(xyz)]
            if hd["hand_id"] in hands:
                raise SchemaError("duplicate hand_id within one frame", f"{hp}.hand_id")
            hands[hd["hand_id"]] = HandPose3D(joints, np.array(valid))
        frames.append(hands)
    return TrajectoryData(frames)


def load_trajectory(path) -> TrajectoryData:
    return parse_trajectory(load_json(path), str(path))


def trajectory_to_json(td: TrajectoryData) -> dict:
    frames = []
    for fr in td.frames:
        hands = []
        for hid, pose in fr.items():
            joints = [[_coord(x) for x in row] if ok else [None, None, None] for row, ok in zip(pose.joints, pose.valid)]
            hands.append({"hand_id": hid, "joints": joints, "valid": [bool(v) for v in pose.valid]})
        frames.append({"hands": hands})
    return {"header": {"units": "mm", "skeleton": SKELETON_TAG}, "frames": frames}


def is_trajectory(data) -> bool:
    return isinstance(data, dict) and isinstance(data.get("header"), dict) and data["header"].get("units") == "mm"


def nominal_to_json(nominal: dict, bones) -> dict:
    return {
        "units": "mm",
        "skeleton": SKELETON_TAG,
        "bones": [list(b) for b in bones],
        "lengths": {str(k): v.lengths.tolist() for k, v in nominal.items()},
    }
