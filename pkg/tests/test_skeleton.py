from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from handrecon.errors import UnobservedBone
from handrecon.skeleton import (
    HAND21,
    JOINT_NAMES,
    WRIST,
    HandPose3D,
    NominalBoneLengths,
    bone_lengths,
    canonical_hand,
    estimate_nominal_lengths,
)


class TestSkeletonDef:
    def test_topology(self):
        HAND21.validate()
        assert HAND21.joint_count == 21
        assert len(HAND21.bones) == 20
        assert WRIST == 0 and JOINT_NAMES[0] == "wrist"
        children = sorted(k for _, k in HAND21.bones)
        assert children == list(range(1, 21))

    def test_chains_follow_coco_wholebody_order(self):
        assert [list(c) for c in HAND21.finger_chains] == [list(range(1 + 4 * f, 5 + 4 * f)) for f in range(5)]

    def test_json_export(self):
        d = json.loads(HAND21.to_json())
        assert len(d["bones"]) == 20 and len(d["joint_names"]) == 21


class TestCanonicalHand:
    def test_basic_shape(self):
        h = canonical_hand()
        assert h.valid.all()
        np.testing.assert_array_equal(h.joints[0], [0, 0, 0])
        assert np.all(bone_lengths(h) > 0)

    def test_span_and_orientation(self):
        X = canonical_hand().joints
        assert 170 < np.ptp(X[:, 1]) < 210  # wrist to middle fingertip along +y
        assert X[4, 0] < 0  # thumb toward -x


class TestBoneLengths:
    def test_missing_endpoint_gives_nan(self):
        X = canonical_hand().joints.copy()
        valid = np.ones(21, bool)
        valid[8] = False
        L = bone_lengths(HandPose3D(X, valid))
        assert np.isnan(L[7]) and np.isfinite(np.delete(L, 7)).all()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 10.0))
    def test_isometry_and_scale(self, seed, scale):
        rng = np.random.default_rng(seed)
        h = canonical_hand()
        R = Rotation.random(random_state=rng).as_matrix()
        t = rng.normal(0, 500, 3)
        L = bone_lengths(h)
        np.testing.assert_allclose(bone_lengths(h.transformed(R, t)), L, atol=1e-9)
        np.testing.assert_allclose(bone_lengths(h.transformed(np.eye(3), 0, scale)), scale * L, rtol=1e-12)


class TestNominalLengths:
    def test_identical_poses(self):
        h = canonical_hand()
        np.testing.assert_array_equal(estimate_nominal_lengths([h, h, h]).lengths, bone_lengths(h))

    def test_median_of_three(self):
        X = canonical_hand().joints
        poses = []
        for L in (9.0, 10.0, 11.0):
            Y = X.copy()
            Y[4] = Y[3] + L * (X[4] - X[3]) / np.linalg.norm(X[4] - X[3])
            poses.append(HandPose3D(Y))
        assert estimate_nominal_lengths(poses).lengths[3] == pytest.approx(10.0, abs=1e-12)

    def test_noisy_copies_close_to_canonical(self):
        rng = np.random.default_rng(0)
        h = canonical_hand()
        poses = [HandPose3D(h.joints + rng.normal(0, 1, (21, 3))) for _ in range(100)]
        est = estimate_nominal_lengths(poses).lengths
        table = np.array([bone_lengths(p) for p in poses])
        oracle = []
        for b in range(20):
            col = sorted(table[:, b])
            oracle.append(0.5 * (col[49] + col[50]))
        np.testing.assert_allclose(est, oracle, atol=1e-12)
        assert np.all(np.abs(est - bone_lengths(h)) < 1.0)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        poses = [HandPose3D(canonical_hand().joints + rng.normal(0, 2, (21, 3))) for _ in range(11)]
        a = estimate_nominal_lengths(poses).lengths
        b = estimate_nominal_lengths([poses[i] for i in rng.permutation(11)]).lengths
        np.testing.assert_array_equal(a, b)

    def test_unobserved_bone(self):
        valid = np.ones(21, bool)
        valid[20] = False
        with pytest.raises(UnobservedBone) as exc:
            estimate_nominal_lengths([HandPose3D(canonical_hand().joints, valid)])
        assert (19, 20) in exc.value.bones

    def test_lengths_must_be_positive(self):
        with pytest.raises(ValueError):
            NominalBoneLengths(np.r_[np.ones(19), 0.0])
