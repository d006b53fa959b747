from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import pinhole
from fisheye_depth.errors import SceneParseError
from fisheye_depth.estimator import inverse_depth_hypotheses, textured_mask
from fisheye_depth.pose import RigidTransform, inverse
from fisheye_depth.synth import (
    Box,
    Plane,
    SceneSpec,
    Sphere,
    Texture,
    cast,
    format_scene,
    generate_pair,
    parse_scene,
    render,
    render_depth,
)
from fisheye_depth.view_synthesis import erode_mask, photometric_loss, synthesize


def wall(z: float = 4.0) -> Plane:
    return Plane(center=(0, 0, z), normal=(0, 0, -1), half_size=(50, 50))


class TestPrimitives:
    def test_plane_distance_is_not_depth(self):
        cam = pinhole(size=101, gamma=50.0, center=50.5)
        frame = render(SceneSpec((wall(),)), cam, RigidTransform.identity())
        assert frame.distance[50, 50] == pytest.approx(4.0, abs=1e-12)
        # pixel (50, 90) is 40 px right of center: tan(theta) = 40 / 50
        theta = math.atan(40 / 50)
        assert frame.distance[50, 90] == pytest.approx(4.0 / math.cos(theta), abs=1e-12)
        assert frame.distance[50, 90] > 4.0

    def test_sphere_on_axis(self):
        cam = pinhole(size=101, gamma=50.0, center=50.5)
        frame = render(SceneSpec((Sphere(center=(0, 0, 5), radius=1.0),)), cam, RigidTransform.identity())
        assert frame.distance[50, 50] == pytest.approx(4.0, abs=1e-12)
        assert not frame.valid[0, 0]

    def test_box_faces(self):
        box = Box(lo=(-1, -1, 3), hi=(1, 1, 5))
        t, normals = box.intersect(np.zeros(3), np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]))
        assert t[0] == pytest.approx(3.0) and np.isinf(t[1])
        np.testing.assert_array_equal(normals[0], [0, 0, -1])

    def test_invalid_primitives(self):
        with pytest.raises(SceneParseError):
            Sphere(center=(0, 0, 0), radius=0.0)
        with pytest.raises(SceneParseError):
            Box(lo=(0, 0, 0), hi=(1, -1, 1))
        with pytest.raises(SceneParseError):
            Plane(center=(0, 0, 0), normal=(0, 1, 0), half_size=(1, 1))  # up parallel to normal
        with pytest.raises(SceneParseError):
            Texture(albedo=(0.8, 0.2))

    def test_texture_in_unit_range(self, rng):
        albedo = Texture(frequency=3.0, albedo=(0.05, 0.9), seed=4).albedo_at(rng.normal(0, 10, (1000, 3)))
        assert albedo.min() >= 0.05 and albedo.max() <= 0.9


class TestRender:
    def test_matches_analytic_intersections(self, rig, rng):
        plane, sphere = rig.scene.primitives
        c = np.asarray(sphere.center)
        for v, u in rng.integers(0, 160, (1000, 2)):
            if not rig.rays.valid[v, u]:
                continue
            d = rig.rays.rays[v, u]
            candidates = []
            if d[2] > 0:
                t_plane = 4.0 / d[2]
                hit = t_plane * d
                if abs(hit[0]) <= 6 and abs(hit[1]) <= 6:
                    candidates.append(t_plane)
            b = float(d @ c)
            disc = b * b - (float(c @ c) - sphere.radius**2)
            if disc >= 0:
                candidates.append(b - math.sqrt(disc))
            if candidates:
                assert abs(rig.target.distance[v, u] - min(candidates)) < 1e-9
            else:
                assert not rig.target.valid[v, u]

    def test_distance_bounds_depth(self, rig):
        depth = render_depth(rig.target, rig.rays)
        ok = rig.target.valid
        assert (rig.target.distance[ok] >= np.abs(depth[ok]) - 1e-12).all()

    def test_deterministic(self, rig):
        again = render(rig.scene, rig.cam, RigidTransform.identity(), rig.rays)
        assert again.image.tobytes() == rig.target.image.tobytes()
        assert np.array_equal(again.distance, rig.target.distance, equal_nan=True)

    def test_image_range(self, rig):
        assert rig.target.image.min() >= 0 and rig.target.image.max() <= 1

    def test_supersampling_keeps_geometry(self, rig):
        frame = render(rig.scene, rig.cam, RigidTransform.identity(), rig.rays, samples=2)
        assert np.array_equal(frame.distance, rig.target.distance, equal_nan=True)
        assert not np.array_equal(frame.image, rig.target.image)

    def test_cast_reports_nearest(self):
        scene = SceneSpec((wall(4.0), wall(2.0)))
        t, idx, _ = cast(scene, np.zeros(3), np.array([[0.0, 0.0, 1.0]]))
        assert t[0] == pytest.approx(2.0) and idx[0] == 1


class TestGeneratePair:
    def test_identical_poses(self, rig):
        pose = RigidTransform.from_translation([0.1, 0.2, 0.0])
        a, b, rel = generate_pair(rig.scene, rig.cam, pose, pose, rig.rays)
        assert a.image.tobytes() == b.image.tobytes()
        np.testing.assert_allclose(rel.as_matrix(), np.eye(4), atol=1e-15)

    def test_swapped_poses_invert(self, rig):
        p0 = RigidTransform.from_translation([0.0, 0.0, 0.0])
        p1 = RigidTransform.from_translation([0.3, 0.0, 0.05])
        _, _, forward = generate_pair(rig.scene, rig.cam, p0, p1, rig.rays)
        _, _, backward = generate_pair(rig.scene, rig.cam, p1, p0, rig.rays)
        np.testing.assert_allclose(backward.as_matrix(), inverse(forward).as_matrix(), atol=1e-15)

    def test_relative_pose_convention(self, rig):
        _, _, rel = generate_pair(rig.scene, rig.cam, RigidTransform.identity(), rig.source_poses[1], rig.rays)
        np.testing.assert_allclose(rel.as_matrix(), rig.relative[1].as_matrix(), atol=0)
        np.testing.assert_allclose(rel.translation, [-0.3, 0, 0], atol=1e-15)

    def test_gt_warp_loss_small(self, rig):
        warped, mask = synthesize(
            rig.sources[1].image, rig.target.distance, rig.relative[1], rig.cam, rig.cam, rig.rays
        )
        loss, _ = photometric_loss(rig.target.image, warped, erode_mask(mask))
        assert loss < 0.01

    def test_gt_beats_every_constant_distance(self, rig):
        region = textured_mask(rig.target.image)

        def masked_loss(distance):
            warped, mask = synthesize(rig.sources[1].image, distance, rig.relative[1], rig.cam, rig.cam, rig.rays)
            valid = erode_mask(mask) & region
            _, per_pixel = photometric_loss(rig.target.image, warped, valid)
            return per_pixel[valid].mean()

        gt_loss = masked_loss(rig.target.distance)
        for value in inverse_depth_hypotheses(16, 0.5, 20.0):
            assert masked_loss(np.full(rig.cam.shape, value)) >= 5 * gt_loss


class TestSceneFile:
    def test_round_trip(self, scene):
        assert parse_scene(format_scene(scene)) == scene

    def test_box_and_defaults(self):
        text = "[box.a]\nmin = -1, -1, 3\nmax = 1 1 5\nseed = 3\n"
        spec = parse_scene(text)
        assert spec.primitives[0] == Box(lo=(-1, -1, 3), hi=(1, 1, 5), texture=Texture(seed=3))
        assert spec.background == SceneSpec(primitives=()).background

    @pytest.mark.parametrize(
        "text, pattern",
        [
            ("[scene]\nbackground = 0.2\n", "no primitives"),
            ("[cone]\nradius = 1\n", "unknown section"),
            ("[sphere]\ncenter = 0 0\nradius = 1\n", "needs 3 values"),
            ("[sphere]\ncenter = 0 0 a\nradius = 1\n", "not numeric"),
            ("[sphere]\nradius = 1\n", "missing key"),
            ("not an ini file", "scene"),
        ],
    )
    def test_malformed(self, text, pattern):
        with pytest.raises(SceneParseError, match=pattern):
            parse_scene(text)
