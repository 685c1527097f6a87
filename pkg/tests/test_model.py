"""Decoder-level contracts: reference points, Eq.-7 transforms, forward pass,
rotation equivariance, end-to-end gradients."""

from __future__ import annotations

import copy

import numpy as np
import pytest

from dividedview import autodiff as ad
from dividedview.assign import LossWeights, detection_loss
from dividedview.dvpe import NormRange
from dividedview.geom import (CameraModel, invert_homogeneous, make_homogeneous,
                              make_rotation_z, wrap_angle)
from dividedview.memory import MemoryView
from dividedview.model import (LocalBox, ModelConfig, WorldBox, decoder_forward,
                               init_model, init_reference_points, local_head,
                               local_to_world, world_boxes, world_to_local)
from dividedview.simeval import (GTBox, Scene, SceneConfig, generate_scene,
                                 rays_for_scene, render_all_features)


def _micro_cfg(**kw):
    base = dict(embed_dim=16, heads=2, layers=2, num_queries=12, num_views=6,
                num_classes=4, query_pe_freqs=4, ffn_mult=2, feat_dim=15,
                roi_feat_dim=15, num_depths=4, cylinder_radius=30.0,
                use_temporal=False, mem_topk_decoder=8, mem_topk_roi=4)
    base.update(kw)
    return ModelConfig(**base)


def _micro_scene(seed=0, frames=1, **kw):
    cfg = SceneConfig(num_cams=3, h_feat=4, w_feat=4, num_depths=4, frames=frames,
                      min_boxes=2, max_boxes=4, r_max=25.0, **kw)
    return generate_scene(np.random.default_rng(seed), cfg)


class TestInitReferencePoints:
    def test_all_inside_cylinder(self):
        pts = init_reference_points(5000, 7.0, -2.0, 1.0, np.random.default_rng(0))
        assert np.all(pts[:, 0] ** 2 + pts[:, 1] ** 2 <= 7.0**2)
        assert np.all((pts[:, 2] >= -2.0) & (pts[:, 2] <= 1.0))

    def test_mean_radius_matches_area_uniform_disk(self):
        pts = init_reference_points(100_000, 9.0, 0.0, 1.0, np.random.default_rng(1))
        mean_r = np.hypot(pts[:, 0], pts[:, 1]).mean()
        assert mean_r == pytest.approx(2.0 * 9.0 / 3.0, rel=0.01)

    def test_seed_reproducible(self):
        a = init_reference_points(100, 5.0, -1.0, 1.0, np.random.default_rng(3))
        b = init_reference_points(100, 5.0, -1.0, 1.0, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            init_reference_points(10, 0.0, 0.0, 1.0, np.random.default_rng(0))


class TestLocalHead:
    def test_deterministic_bitwise(self):
        params = init_model(_micro_cfg(), np.random.default_rng(5))
        emb = np.random.default_rng(0).normal(size=16).astype(np.float32)
        a = local_head(params, emb)
        b = local_head(params, emb)
        assert np.array_equal(a.center_offset, b.center_offset)
        assert np.array_equal(a.class_logits, b.class_logits)

    def test_zero_embedding_finite(self):
        params = init_model(_micro_cfg(), np.random.default_rng(6))
        box = local_head(params, np.zeros(16, dtype=np.float32))
        assert np.all(np.isfinite(box.center_offset))
        assert np.isfinite(box.yaw)

    def test_gradient_flows_to_embedding(self):
        cfg = _micro_cfg(dtype="float64")
        params = init_model(cfg, np.random.default_rng(7))
        emb = ad.param(np.random.default_rng(1).normal(size=(1, 16)))
        w = np.random.default_rng(2).normal(size=(1, 10))

        def f(_):
            from dividedview.model import head_apply
            reg, _logits = head_apply(params, emb)
            return ad.sum_(ad.mul(reg, ad.tensor(w)))

        assert ad.grad_check(f, [emb], eps=1e-6) < 1e-4


def _random_local_box(rng, num_classes=4):
    return LocalBox(center_offset=rng.normal(size=3) * 3,
                    log_size=rng.normal(size=3) * 0.3,
                    yaw=rng.uniform(-np.pi, np.pi),
                    velocity=rng.normal(size=2) * 4,
                    class_logits=rng.normal(size=num_classes))


class TestLocalToWorld:
    def test_zero_rotation_is_offset_only(self):
        box = LocalBox(center_offset=np.array([1.0, 2.0, 0.5]), log_size=np.zeros(3),
                       yaw=0.7, velocity=np.array([1.0, 0.0]),
                       class_logits=np.array([2.0, -1.0]))
        world = local_to_world(box, np.array([10.0, -1.0, 0.0]), 0.0)
        np.testing.assert_allclose(world.center, [11.0, 1.0, 0.5], atol=1e-15)
        assert world.yaw == pytest.approx(0.7)
        np.testing.assert_allclose(world.size, [1.0, 1.0, 1.0])

    def test_quarter_turn_convention(self):
        box = LocalBox(center_offset=np.array([1.0, 0.0, 0.0]), log_size=np.zeros(3),
                       yaw=0.0, velocity=np.array([1.0, 0.0]),
                       class_logits=np.array([0.0]))
        world = local_to_world(box, np.zeros(3), np.pi / 2)
        np.testing.assert_allclose(world.center, [0.0, -1.0, 0.0], atol=1e-12)
        assert world.yaw == pytest.approx(-np.pi / 2)
        np.testing.assert_allclose(world.velocity, [0.0, -1.0], atol=1e-12)

    def test_round_trip_ten_thousand_boxes(self):
        rng = np.random.default_rng(8)
        for _ in range(10_000):
            ref = rng.normal(size=3) * 10
            theta = rng.uniform(-2 * np.pi, 2 * np.pi)
            local = _random_local_box(rng)
            world = local_to_world(local, ref, theta)
            back = local_to_world(world_to_local(world, ref, theta), ref, theta)
            assert np.abs(back.center - world.center).max() < 1e-9
            assert abs(wrap_angle(back.yaw - world.yaw)) < 1e-9
            assert np.abs(back.velocity - world.velocity).max() < 1e-9

    def test_algebraic_identity_vs_literal_equation(self):
        rng = np.random.default_rng(9)
        for _ in range(2000):
            ref = rng.normal(size=3) * 10
            theta = rng.uniform(-2 * np.pi, 2 * np.pi)
            local = _random_local_box(rng)
            got = local_to_world(local, ref, theta).center
            R = make_rotation_z(theta)
            literal = np.linalg.solve(R, R @ ref + local.center_offset)
            np.testing.assert_allclose(got, literal, atol=1e-12)

    def test_tensor_path_matches_scalar_path(self):
        from dividedview.model import _local_to_world_tensors
        rng = np.random.default_rng(10)
        M = 40
        reg = rng.normal(size=(M, 10))
        refs = rng.normal(size=(M, 3)) * 8
        thetas = rng.uniform(-np.pi, np.pi, size=M)
        center, log_size, yaw_sc, vel = _local_to_world_tensors(
            ad.tensor(reg), ad.tensor(refs), thetas)
        for i in range(M):
            local = LocalBox(center_offset=reg[i, 0:3], log_size=reg[i, 3:6],
                             yaw=float(np.arctan2(reg[i, 6], reg[i, 7])),
                             velocity=reg[i, 8:10], class_logits=np.zeros(2))
            world = local_to_world(local, refs[i], thetas[i])
            np.testing.assert_allclose(center.data[i], world.center, atol=1e-9)
            got_yaw = np.arctan2(yaw_sc.data[i, 0], yaw_sc.data[i, 1])
            assert abs(wrap_angle(got_yaw - world.yaw)) < 1e-9
            np.testing.assert_allclose(vel.data[i], world.velocity, atol=1e-9)


class TestDecoderForward:
    def test_smoke_contract(self):
        cfg = _micro_cfg(num_views=1, layers=2)
        params = init_model(cfg, np.random.default_rng(11))
        scene = _micro_scene(1)
        rays = rays_for_scene(scene)
        feats = render_all_features(scene, 0)
        res = decoder_forward(params, feats, rays)
        assert len(res.layer_preds) == cfg.layers
        for p in res.layer_preds:
            assert np.all(np.isfinite(p.center.data))
        a, b = res.layer_preds
        assert not np.array_equal(a.center.data, b.center.data)

    def test_deep_supervision_layer_count(self):
        cfg = _micro_cfg(layers=3)
        params = init_model(cfg, np.random.default_rng(12))
        scene = _micro_scene(2)
        res = decoder_forward(params, render_all_features(scene, 0),
                              rays_for_scene(scene))
        assert len(res.layer_preds) == 3

    def test_memory_switch_only_affects_temporal_path(self):
        cfg = _micro_cfg(use_temporal=True)
        params = init_model(cfg, np.random.default_rng(13))
        scene = _micro_scene(3)
        rays = rays_for_scene(scene)
        feats = render_all_features(scene, 0)
        # empty view and no view are the same first-frame behaviour
        empty = MemoryView(embeddings=np.zeros((0, 16)), points=np.zeros((0, 3)),
                           motion_feats=np.zeros((0, 13)), kinds=[])
        a = decoder_forward(params, feats, rays, None)
        b = decoder_forward(params, feats, rays, empty)
        assert np.array_equal(a.final_embeddings.data, b.final_embeddings.data)
        # giving the model memory changes the outputs
        mem = MemoryView(embeddings=np.random.default_rng(0).normal(size=(3, 16)).astype(np.float32),
                         points=np.random.default_rng(1).normal(size=(3, 3)) * 5,
                         motion_feats=np.random.default_rng(2).normal(size=(3, 13)),
                         kinds=["decoder"] * 3)
        c = decoder_forward(params, feats, rays, mem)
        assert not np.array_equal(a.final_embeddings.data, c.final_embeddings.data)
        # with the temporal stage off, memory is ignored entirely
        cfg2 = copy.deepcopy(cfg)
        cfg2.use_temporal = False
        params2 = init_model(cfg2, np.random.default_rng(13))
        d = decoder_forward(params2, feats, rays, mem)
        e = decoder_forward(params2, feats, rays, None)
        assert np.array_equal(d.final_embeddings.data, e.final_embeddings.data)

    def test_additional_groups_inactive_at_inference(self):
        cfg = _micro_cfg(extra_groups=1, extra_queries=12)
        params = init_model(cfg, np.random.default_rng(14))
        scene = _micro_scene(4)
        rays = rays_for_scene(scene)
        feats = render_all_features(scene, 0)
        base = decoder_forward(params, feats, rays, training=False)
        # poison the additional-group parameters; inference must not read them
        params.query_embed.data[cfg.num_queries:] = np.nan
        params.ref_points.data[cfg.num_queries:] = np.nan
        poisoned = decoder_forward(params, feats, rays, training=False)
        assert np.array_equal(base.final_embeddings.data, poisoned.final_embeddings.data)
        assert len(base.group_rows) == 1

    def test_training_activates_extra_groups(self):
        cfg = _micro_cfg(extra_groups=2, extra_queries=5)
        params = init_model(cfg, np.random.default_rng(15))
        scene = _micro_scene(5)
        res = decoder_forward(params, render_all_features(scene, 0),
                              rays_for_scene(scene), training=True)
        assert [r.size for r in res.group_rows] == [12, 5, 5]
        assert res.final_embeddings.shape[0] == 22


def _rotated_scene(scene: Scene, delta: float) -> Scene:
    """Rotate the whole world (boxes + rig) by ``delta`` about z."""
    R = make_rotation_z(delta)
    Rh = make_homogeneous(R, np.zeros(3))
    cams = [CameraModel(fx=c.fx, fy=c.fy, cx=c.cx, cy=c.cy,
                        extrinsic=c.extrinsic @ invert_homogeneous(Rh),
                        h_feat=c.h_feat, w_feat=c.w_feat, depths=c.depths)
            for c in scene.cams]
    out = copy.deepcopy(scene)
    out.cams = cams
    for f in out.frames:
        f.boxes = [GTBox(center=R @ b.center, size=b.size,
                         yaw=wrap_angle(b.yaw + delta),
                         velocity=R[:2, :2] @ b.velocity, label=b.label)
                   for b in f.boxes]
    return out


class TestRotationEquivariance:
    def test_world_predictions_rotate_with_the_scene(self):
        V = 6
        delta = 2 * np.pi / V
        cfg = _micro_cfg(num_views=V, layers=2, use_temporal=False)
        params = init_model(cfg, np.random.default_rng(16))
        scene = _micro_scene(6, num_classes=4)
        rot = _rotated_scene(scene, delta)

        feats1 = render_all_features(scene, 0)
        feats2 = render_all_features(rot, 0)
        assert np.abs(feats1 - feats2).max() < 1e-9   # camera-relative renderer

        params2 = copy.deepcopy(params)
        params2.ref_points.data[:] = (params.ref_points.data.astype(float)
                                      @ make_rotation_z(delta).T).astype(np.float32)

        res1 = decoder_forward(params, feats1, rays_for_scene(scene))
        res2 = decoder_forward(params2, feats2, rays_for_scene(rot))
        R = make_rotation_z(delta)
        for p1, p2 in zip(res1.layer_preds, res2.layer_preds):
            np.testing.assert_allclose(p2.center.data, p1.center.data @ R.T.astype(np.float32),
                                       atol=1e-4)
            np.testing.assert_allclose(p2.velocity.data,
                                       p1.velocity.data @ R[:2, :2].T.astype(np.float32),
                                       atol=1e-4)
            yaw1 = np.arctan2(p1.yaw_sincos.data[:, 0], p1.yaw_sincos.data[:, 1])
            yaw2 = np.arctan2(p2.yaw_sincos.data[:, 0], p2.yaw_sincos.data[:, 1])
            dyaw = np.array([wrap_angle(a) for a in (yaw2 - yaw1 - delta)])
            assert np.abs(dyaw).max() < 1e-4
            np.testing.assert_allclose(p2.class_logits.data, p1.class_logits.data,
                                       atol=1e-4)


class TestEndToEndGradient:
    def test_micro_model_loss_gradcheck(self):
        cfg = ModelConfig(embed_dim=8, heads=2, layers=1, num_queries=2, num_views=2,
                          num_classes=2, query_pe_freqs=2, ffn_mult=2, feat_dim=6,
                          roi_feat_dim=6, num_depths=2, cylinder_radius=10.0,
                          use_temporal=True, use_memory=True, dtype="float64")
        rng = np.random.default_rng(17)
        params = init_model(cfg, rng)
        cam = CameraModel(fx=1.0, fy=1.0, cx=1.0, cy=1.0, extrinsic=np.eye(4),
                          h_feat=2, w_feat=2, depths=np.array([2.0, 8.0]))
        from dividedview.geom import discretize_rig
        rays = discretize_rig([cam])
        feats = rng.normal(size=(4, 6))
        mem = MemoryView(embeddings=rng.normal(size=(2, 8)),
                         points=rng.normal(size=(2, 3)) * 3,
                         motion_feats=rng.normal(size=(2, 13)) * 0.1,
                         kinds=["decoder", "roi"])
        gts = [GTBox(center=np.array([5.0, 1.0, 0.0]), size=np.array([4.0, 2.0, 1.5]),
                     yaw=0.4, velocity=np.array([1.0, 0.0]), label=0)]

        def f(_):
            res = decoder_forward(params, feats, rays, mem, training=True)
            return detection_loss(res.layer_preds, gts, res.group_rows,
                                  LossWeights()).total

        tensors = [t for t in params.tensors() if "roi." not in t.name]
        err = ad.grad_check(f, tensors, eps=1e-6, max_components=6,
                            rng=np.random.default_rng(0))
        assert err < 1e-4


class TestWorldBoxes:
    def test_scores_are_max_class_probability(self):
        cfg = _micro_cfg()
        params = init_model(cfg, np.random.default_rng(18))
        scene = _micro_scene(7)
        res = decoder_forward(params, render_all_features(scene, 0),
                              rays_for_scene(scene))
        boxes = world_boxes(res.layer_preds[-1])
        logits = res.layer_preds[-1].class_logits.data
        for i, b in enumerate(boxes):
            probs = 1.0 / (1.0 + np.exp(-logits[i].astype(float)))
            assert b.score == pytest.approx(probs.max())
            assert b.label == probs.argmax()
            assert -np.pi < b.yaw <= np.pi or b.yaw == pytest.approx(np.pi)
