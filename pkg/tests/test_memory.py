"""Temporal memory: top-k, queue FIFO, ego compensation, RoI encoding."""

from __future__ import annotations

import numpy as np
import pytest

from dividedview import diagnostics
from dividedview.geom import (CameraModel, apply_homogeneous, invert_homogeneous,
                              make_homogeneous, make_rotation_z)
from dividedview.memory import (MemoryEntry, MemoryQueue, ego_compensate, encode_roi,
                                init_roi, push_frame, topk_select)


def _entry(point, t=0.0, ego=None, kind="decoder", C=4):
    return MemoryEntry(kind=kind, embedding=np.zeros(C, dtype=np.float32),
                       point=np.asarray(point, dtype=float), timestamp=t,
                       ego=np.eye(4) if ego is None else ego)


class TestTopkSelect:
    def test_basic(self):
        idx = topk_select(np.array([0.9, 0.1, 0.5]), 2)
        assert set(idx.tolist()) == {0, 2}

    def test_k_zero_and_k_beyond(self):
        assert topk_select(np.array([1.0, 2.0]), 0).size == 0
        assert topk_select(np.array([1.0, 2.0]), 5).size == 2

    def test_ties_prefer_lower_index(self):
        idx = topk_select(np.array([0.5, 0.5, 0.5]), 2)
        np.testing.assert_array_equal(idx, [0, 1])

    def test_against_sort_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            scores = rng.normal(size=rng.integers(1, 30))
            k = int(rng.integers(0, scores.size + 2))
            got = set(topk_select(scores, k).tolist())
            want = set(np.argsort(-scores, kind="stable")[: min(k, scores.size)].tolist())
            assert got == want

    def test_negative_k_rejected(self):
        with pytest.raises(ValueError):
            topk_select(np.array([1.0]), -1)


class TestQueue:
    def test_fifo_eviction_at_capacity_four(self):
        q = MemoryQueue(capacity=4)
        for t in range(5):
            push_frame(q, [_entry([t, 0, 0], t=t)], [], np.eye(4), float(t))
        assert len(q) == 4
        stamps = [f[0].timestamp for f in q.frames]
        assert stamps == [1.0, 2.0, 3.0, 4.0]

    def test_empty_frame_allowed(self):
        q = MemoryQueue(capacity=2)
        push_frame(q, [], [], np.eye(4), 0.0)
        assert len(q) == 1 and q.num_entries == 0

    def test_per_kind_caps(self):
        q = MemoryQueue(capacity=2, max_decoder=2, max_roi=3)
        dec = [_entry([i, 0, 0]) for i in range(5)]
        roi = [_entry([i, 0, 0], kind="roi") for i in range(5)]
        push_frame(q, dec, roi, np.eye(4), 0.0)
        kinds = [e.kind for e in q.frames[0]]
        assert kinds.count("decoder") == 2 and kinds.count("roi") == 3

    def test_bad_kind_rejected(self):
        with pytest.raises(ValueError):
            _entry([0, 0, 0], kind="wat")


def _ego(yaw, pos):
    """world -> ego transform of an ego at ``pos`` with heading ``yaw``."""
    return invert_homogeneous(make_homogeneous(make_rotation_z(yaw), pos))


class TestEgoCompensate:
    def test_stationary_ego_keeps_points(self):
        q = MemoryQueue(capacity=4)
        push_frame(q, [_entry([3.0, 1.0, 0.2])], [], np.eye(4), 0.0)
        view = ego_compensate(q, np.eye(4), 1.0)
        np.testing.assert_allclose(view.points[0], [3.0, 1.0, 0.2], atol=1e-12)
        np.testing.assert_allclose(view.motion_feats[0, 0], 1.0)

    def test_forward_motion_shifts_static_point_backwards(self):
        ego0 = _ego(0.0, [0.0, 0.0, 0.0])
        ego1 = _ego(0.0, [2.0, 0.0, 0.0])
        world_point = np.array([5.0, 1.0, 0.0])
        q = MemoryQueue(capacity=4)
        push_frame(q, [_entry(apply_homogeneous(ego0, world_point), ego=ego0)], [],
                   ego0, 0.0)
        view = ego_compensate(q, ego1, 0.5)
        np.testing.assert_allclose(view.points[0], [3.0, 1.0, 0.0], atol=1e-12)

    def test_static_world_consistency_over_four_frames(self):
        rng = np.random.default_rng(1)
        world_point = np.array([12.0, -4.0, 0.7])
        q = MemoryQueue(capacity=4)
        egos = []
        for t in range(4):
            ego = _ego(rng.uniform(-np.pi, np.pi), rng.normal(size=3) * 5)
            egos.append(ego)
            push_frame(q, [_entry(apply_homogeneous(ego, world_point), ego=ego)], [],
                       ego, float(t))
        ego_now = _ego(0.3, [1.0, -2.0, 0.0])
        view = ego_compensate(q, ego_now, 4.0)
        expect = apply_homogeneous(ego_now, world_point)
        assert np.abs(view.points - expect[None, :]).max() < 1e-9

    def test_identity_delta_idempotent(self):
        q = MemoryQueue(capacity=2)
        ego = _ego(0.7, [3.0, 1.0, 0.0])
        push_frame(q, [_entry([1.0, 2.0, 3.0], ego=ego)], [], ego, 0.0)
        v1 = ego_compensate(q, ego, 0.0)
        np.testing.assert_allclose(v1.points[0], [1.0, 2.0, 3.0], atol=1e-12)

    def test_newest_frame_first(self):
        q = MemoryQueue(capacity=3)
        for t in range(3):
            push_frame(q, [_entry([t, 0, 0], t=t)], [], np.eye(4), float(t))
        view = ego_compensate(q, np.eye(4), 3.0)
        np.testing.assert_allclose(view.points[:, 0], [2.0, 1.0, 0.0])
        np.testing.assert_allclose(view.motion_feats[:, 0], [1.0, 2.0, 3.0])


def _camera(extrinsic=None):
    return CameraModel(fx=8.0, fy=8.0, cx=8.0, cy=8.0,
                       extrinsic=np.eye(4) if extrinsic is None else extrinsic,
                       h_feat=16, w_feat=16, depths=np.array([1.0, 10.0]))


def _frozen_point_params(params, out=(0.5, 0.5, 5.0)):
    """Force the RoI point head to a constant output."""
    for w in params.point.weights:
        w.data[:] = 0.0
    for b in params.point.biases:
        b.data[:] = 0.0
    params.point.biases[-1].data[:] = np.asarray(out, dtype=params.point.biases[-1].dtype)
    return params


class TestEncodeRoi:
    def test_frozen_head_hits_optical_axis(self):
        rng = np.random.default_rng(2)
        params = _frozen_point_params(init_roi(6, 3, 8, rng))
        emb, point = encode_roi(np.ones(6), np.array([1.0, 0.0, 0.0]), _camera(), params)
        np.testing.assert_allclose(point, [5.0, 0.0, 0.0], atol=1e-6)
        assert emb.shape == (8,)

    def test_extrinsic_moves_point_by_exactly_that_transform(self):
        rng = np.random.default_rng(3)
        params = _frozen_point_params(init_roi(6, 3, 8, rng))
        T = make_homogeneous(make_rotation_z(0.9), [1.0, -2.0, 0.3])
        cam1 = _camera()
        cam2 = _camera(extrinsic=cam1.extrinsic @ T)
        _, p1 = encode_roi(np.ones(6), np.array([1.0, 0.0, 0.0]), cam1, params)
        _, p2 = encode_roi(np.ones(6), np.array([1.0, 0.0, 0.0]), cam2, params)
        np.testing.assert_allclose(p2, apply_homogeneous(invert_homogeneous(T), p1),
                                   atol=1e-9)

    def test_deterministic_bitwise(self):
        rng = np.random.default_rng(4)
        feat = rng.normal(size=6)
        scores = np.array([0.2, 0.5, 0.3])
        outs = []
        for _ in range(2):
            params = init_roi(6, 3, 8, np.random.default_rng(11))
            outs.append(encode_roi(feat, scores, _camera(), params))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])

    def test_nonpositive_depth_clamps_with_diagnostic(self):
        rng = np.random.default_rng(5)
        params = _frozen_point_params(init_roi(6, 3, 8, rng), out=(0.5, 0.5, -2.0))
        diagnostics.reset()
        _, point = encode_roi(np.ones(6), np.array([1.0, 0.0, 0.0]), _camera(), params)
        assert diagnostics.get("memory.roi_depth_clamped") == 1
        np.testing.assert_allclose(point, [0.5, 0.0, 0.0], atol=1e-6)
