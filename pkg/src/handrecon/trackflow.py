"""Keypoint confidence filtering and keyframe-driven tracking schedules."""

from __future__ import annotations

import abc
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .losses import HandObservation2D
from .skeleton import WRIST

KEYPOINT_THRESHOLD = 0.1
KEYFRAME_THRESHOLD = 0.3


def filter_keypoints(obs: HandObservation2D, threshold: float = KEYPOINT_THRESHOLD) -> HandObservation2D:
    """Mark keypoints with confidence below ``threshold`` as absent."""
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    keep = obs.confidence >= threshold
    if keep.all():
        return obs
    return HandObservation2D(
        np.where(keep[:, None], obs.keypoints, np.nan), np.where(keep, obs.confidence, 0.0)
    )


def override_wrist(obs: HandObservation2D) -> HandObservation2D:
    """Set a present wrist keypoint's confidence to 1.0."""
    if not obs.present[WRIST] or obs.confidence[WRIST] == 1.0:
        return obs
    conf = obs.confidence.copy()
    conf[WRIST] = 1.0
    return HandObservation2D(obs.keypoints, conf)


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("bounding box needs x_min < x_max and y_min < y_max")

    def clamp(self, width: float, height: float) -> "BBox":
        return BBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )


class TrackerInterface(abc.ABC):
    """A single-object tracker driven by the scheduler.

    After ``init`` the tracker steps one frame at a time in either direction.
    Once a step fails, every further step returns None until the next
    ``init``.
    """

    @abc.abstractmethod
    def init(self, frame: int, box: Optional[BBox]) -> None: ...

    @abc.abstractmethod
    def step(self, direction: int) -> Optional[BBox]:
        """Advance by ``direction`` (+1 forward, -1 backward); None on failure."""


class StubTracker(TrackerInterface):
    """Scripted tracker for tests and offline planning.

    ``max_steps=None`` never fails; otherwise the tracker succeeds for
    ``max_steps`` steps after each ``init`` (in any direction) and then fails.
    ``fail_frames`` lists frames the tracker can never reach.
    """

    def __init__(self, max_steps: Optional[int] = None, fail_frames: Sequence[int] = ()):
        self.max_steps = max_steps
        self.fail_frames = set(fail_frames)
        self._frame = None
        self._box = None
        self._taken = 0
        self._failed = True

    def init(self, frame, box):
        self._frame, self._box = frame, box
        self._taken = 0
        self._failed = False

    def step(self, direction):
        if self._failed:
            return None
        target = self._frame + direction
        if (self.max_steps is not None and self._taken >= self.max_steps) or target in self.fail_frames:
            self._failed = True
            return None
        self._taken += 1
        self._frame = target
        return self._box if self._box is not None else BBox(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class Episode:
    keyframe: int
    forward: int  # frames tracked after the keyframe
    backward: int  # frames tracked before the keyframe

    @property
    def frames(self) -> range:
        return range(self.keyframe - self.backward, self.keyframe + self.forward + 1)


@dataclass
class TrackPlan:
    """Tracking episodes per ``(hand, view)`` and per-frame coverage."""

    n_frames: int
    episodes: dict = field(default_factory=dict)  # (hand, view) -> list[Episode]
    covered: dict = field(default_factory=dict)  # (hand, view) -> bool array

    def to_json(self) -> str:
        out = []
        for (hand, view) in sorted(self.episodes):
            out.append(
                {
                    "hand": hand,
                    "view": view,
                    "episodes": [
                        {"keyframe": e.keyframe, "forward": e.forward, "backward": e.backward}
                        for e in self.episodes[(hand, view)]
                    ],
                    "covered": [bool(c) for c in self.covered[(hand, view)]],
                }
            )
        return json.dumps({"n_frames": self.n_frames, "tracks": out}, indent=2)


def _schedule_one(conf: np.ndarray, threshold: float, tracker: TrackerInterface, boxes=None):
    n = len(conf)
    covered = np.zeros(n, dtype=bool)
    episodes = []
    while True:
        candidates = np.flatnonzero(~covered & (conf > threshold))
        if len(candidates) == 0:
            break
        # argmax returns the first (lowest-index) maximum
        key = int(candidates[np.argmax(conf[candidates])])
        tracker.init(key, None if boxes is None else boxes[key])
        covered[key] = True
        spans = {}
        for direction in (1, -1):
            k, span = key, 0
            while 0 <= k + direction < n and not covered[k + direction]:
                if tracker.step(direction) is None:
                    break
                k += direction
                covered[k] = True
                span += 1
            spans[direction] = span
        episodes.append(Episode(key, spans[1], spans[-1]))
    return episodes, covered


def schedule_tracking(
    mean_confidences,
    init_threshold: float = KEYFRAME_THRESHOLD,
    tracker: Optional[TrackerInterface] = None,
    boxes=None,
) -> TrackPlan:
    """Greedy keyframe selection with forward-then-backward propagation.

    ``mean_confidences`` is ``(frames, hands, views)`` (or ``(frames,)`` for
    a single hand and view): the mean joint confidence of each hand
    detection. For every hand and view the highest-confidence uncovered
    frame above ``init_threshold`` seeds a tracker episode; tracked frames
    are removed and the loop repeats until no frame exceeds the threshold.
    Ties go to the lowest frame index. ``boxes``, when given, is indexed
    ``[frame][hand][view]`` and passed to ``tracker.init``.
    """
    conf = np.asarray(mean_confidences, dtype=np.float64)
    if conf.ndim == 1:
        conf = conf[:, None, None]
    if conf.ndim != 3:
        raise ValueError("mean_confidences must be (frames,) or (frames, hands, views)")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    tracker = tracker or StubTracker()
    n, H, V = conf.shape
    plan = TrackPlan(n)
    for h in range(H):
        for v in range(V):
            b = None if boxes is None else [boxes[t][h][v] for t in range(n)]
            eps, cov = _schedule_one(conf[:, h, v], init_threshold, tracker, b)
            plan.episodes[(h, v)] = eps
            plan.covered[(h, v)] = cov
    return plan
