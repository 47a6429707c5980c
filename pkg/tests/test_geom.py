import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from det3d.geom import (
    Box3D,
    ConvexPolygon2D,
    RigidTransform,
    bev_iou,
    box_corners_bev,
    iou_3d,
    pairwise_iou,
    polygon_intersection_area,
    transform_box,
    wrap_angle,
    wrap_angles,
)

from strategies import box_pairs, boxes
from oracles import monte_carlo_iou, monte_carlo_polygon_area

OCTAGON = 2 * (math.sqrt(2) - 1)


class TestWrapAngle:
    @pytest.mark.parametrize(
        "theta, expected",
        [(0.0, 0.0), (3 * math.pi / 2, -math.pi / 2), (-math.pi, math.pi), (math.pi, math.pi), (4 * math.pi, 0.0)],
    )
    def test_values(self, theta, expected):
        assert wrap_angle(theta) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError):
            wrap_angle(bad)

    @given(st.floats(-1e4, 1e4))
    def test_range_and_congruence(self, theta):
        out = wrap_angle(theta)
        assert -math.pi < out <= math.pi
        k = (theta - out) / (2 * math.pi)
        assert abs(k - round(k)) < 1e-9

    def test_vectorised_matches_scalar(self):
        theta = np.linspace(-20, 20, 101)
        np.testing.assert_array_equal(wrap_angles(theta), [wrap_angle(t) for t in theta])


class TestBox3D:
    def test_yaw_is_wrapped(self):
        assert Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi / 2).yaw == pytest.approx(-math.pi / 2)

    @pytest.mark.parametrize("dims", [(0, 1, 1), (1, -1, 1), (1, 1, 0)])
    def test_rejects_non_positive_dims(self, dims):
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, *dims)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Box3D(math.nan, 0, 0, 1, 1, 1)

    def test_array_round_trip(self):
        box = Box3D(1, 2, 3, 4, 5, 6, 0.5)
        assert Box3D.from_array(box.to_array()) == box

    def test_frozen(self, unit_box):
        with pytest.raises(AttributeError):
            unit_box.cx = 2.0


class TestCorners:
    def test_unit_square(self, unit_box):
        poly = box_corners_bev(unit_box)
        assert sorted(map(tuple, poly.vertices.round(12).tolist())) == [
            (-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)
        ]
        assert poly.area == pytest.approx(1.0, abs=1e-9)

    def test_quarter_turn_same_vertex_set(self, unit_box):
        turned = box_corners_bev(Box3D(0, 0, 0, 1, 1, 1, math.pi / 2))
        a = sorted(map(tuple, box_corners_bev(unit_box).vertices.round(12).tolist()))
        b = sorted(map(tuple, turned.vertices.round(12).tolist()))
        assert a == b

    @given(boxes())
    def test_area_and_orientation(self, box):
        poly = box_corners_bev(box)
        assert len(poly) == 4
        assert poly.area == pytest.approx(box.length * box.width, abs=1e-9)

    def test_rotated_area(self):
        assert box_corners_bev(Box3D(0, 0, 0, 2, 1, 1, math.pi / 4)).area == pytest.approx(2.0, abs=1e-9)

    def test_clockwise_polygon_rejected(self):
        with pytest.raises(ValueError):
            ConvexPolygon2D([[0, 0], [0, 1], [1, 1], [1, 0]])


class TestPolygonIntersection:
    square = ConvexPolygon2D([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])

    def test_self(self):
        assert polygon_intersection_area(self.square, self.square) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint(self):
        far = ConvexPolygon2D(self.square.vertices + 5.0)
        assert polygon_intersection_area(self.square, far) == 0.0

    def test_octagon(self):
        rotated = box_corners_bev(Box3D(0, 0, 0, 1, 1, 1, math.pi / 4))
        assert polygon_intersection_area(self.square, rotated) == pytest.approx(OCTAGON, abs=1e-12)

    def test_octagon_monte_carlo(self):
        rotated = box_corners_bev(Box3D(0, 0, 0, 1, 1, 1, math.pi / 4))
        est = monte_carlo_polygon_area(self.square.vertices, rotated.vertices)
        assert est == pytest.approx(OCTAGON, abs=5e-3)

    def test_empty(self):
        assert polygon_intersection_area(ConvexPolygon2D(np.zeros((0, 2))), self.square) == 0.0

    @given(box_pairs())
    def test_bounds_and_symmetry(self, pair):
        pa, pb = (box_corners_bev(b) for b in pair)
        ab = polygon_intersection_area(pa, pb)
        assert ab == polygon_intersection_area(pb, pa)
        assert 0.0 <= ab <= min(pa.area, pb.area) + 1e-12

    @given(boxes())
    def test_self_area(self, box):
        poly = box_corners_bev(box)
        assert polygon_intersection_area(poly, poly) == pytest.approx(poly.area, abs=1e-9)


class TestIoU:
    def test_identical(self, unit_box):
        assert bev_iou(unit_box, unit_box) == 1.0
        assert iou_3d(unit_box, unit_box) == 1.0

    def test_half_offset(self, unit_box):
        other = Box3D(0.5, 0, 0, 1, 1, 1)
        assert bev_iou(unit_box, other) == pytest.approx(1 / 3, abs=1e-12)
        assert iou_3d(unit_box, other) == pytest.approx(1 / 3, abs=1e-12)

    def test_half_offset_monte_carlo(self):
        est = monte_carlo_iou([0, 0, 0, 1, 1, 1, 0], [0.5, 0, 0, 1, 1, 1, 0])
        assert est == pytest.approx(1 / 3, abs=5e-3)

    def test_rotated_square(self, unit_box):
        rotated = Box3D(0, 0, 0, 1, 1, 1, math.pi / 4)
        assert bev_iou(unit_box, rotated) == pytest.approx(OCTAGON / (2 - OCTAGON), abs=1e-12)
        assert bev_iou(unit_box, rotated) == pytest.approx(0.707107, abs=1e-6)

    def test_disjoint_in_z(self, unit_box):
        lifted = Box3D(0, 0, 2, 1, 1, 1)
        assert bev_iou(unit_box, lifted) == 1.0
        assert iou_3d(unit_box, lifted) == 0.0

    def test_zero_overlap_is_exact_zero(self, unit_box):
        touching = Box3D(1.0, 0, 0, 1, 1, 1)
        assert bev_iou(unit_box, touching) == 0.0

    @given(box_pairs())
    def test_exact_symmetry(self, pair):
        a, b = pair
        assert bev_iou(a, b) == bev_iou(b, a)
        assert iou_3d(a, b) == iou_3d(b, a)
        assert 0.0 <= iou_3d(a, b) <= 1.0

    @given(box_pairs(), st.floats(-math.pi, math.pi), st.floats(-50, 50), st.floats(-50, 50), st.floats(-5, 5))
    def test_rigid_invariance(self, pair, yaw, tx, ty, tz):
        a, b = pair
        t = RigidTransform.from_yaw(yaw, (tx, ty, tz))
        moved = iou_3d(transform_box(a, t), transform_box(b, t))
        assert moved == pytest.approx(iou_3d(a, b), abs=1e-9)

    @given(box_pairs(), st.floats(0.1, 10.0))
    def test_scale_invariance(self, pair, s):
        def scaled(b):
            return Box3D(b.cx * s, b.cy * s, b.cz * s, b.length * s, b.width * s, b.height * s, b.yaw)

        a, b = pair
        assert iou_3d(scaled(a), scaled(b)) == pytest.approx(iou_3d(a, b), abs=1e-9)
        assert bev_iou(scaled(a), scaled(b)) == pytest.approx(bev_iou(a, b), abs=1e-9)

    def test_monte_carlo_random_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a = Box3D(*rng.uniform(-1, 1, 3), *rng.uniform(0.5, 3, 3), rng.uniform(-3, 3))
            b = Box3D(*rng.uniform(-1, 1, 3), *rng.uniform(0.5, 3, 3), rng.uniform(-3, 3))
            assert iou_3d(a, b) == pytest.approx(monte_carlo_iou(a.to_list(), b.to_list(), 200_000, rng), abs=0.01)
            assert bev_iou(a, b) == pytest.approx(
                monte_carlo_iou(a.to_list(), b.to_list(), 200_000, rng, bev=True), abs=0.01
            )

    def test_pairwise(self, unit_box):
        out = pairwise_iou([unit_box], [unit_box, Box3D(5, 5, 0, 1, 1, 1)], "bev")
        np.testing.assert_array_equal(out, [[1.0, 0.0]])
        with pytest.raises(ValueError):
            pairwise_iou([unit_box], [unit_box], "2d")


class TestTransforms:
    def test_identity(self, unit_box):
        assert transform_box(unit_box, RigidTransform.identity()) == unit_box

    def test_quarter_turn(self):
        out = transform_box(Box3D(1, 0, 0, 2, 1, 1, 0), RigidTransform.from_yaw(math.pi / 2))
        np.testing.assert_allclose(out.to_array(), [0, 1, 0, 2, 1, 1, math.pi / 2], atol=1e-12)

    def test_translate_down(self):
        box = Box3D(1, 2, 3, 1, 1, 1, 0.3)
        out = transform_box(box, RigidTransform.from_yaw(0.0, (0, 0, -0.2)))
        assert out.cz == pytest.approx(2.8, abs=1e-12)
        assert (out.cx, out.cy, out.yaw) == (box.cx, box.cy, box.yaw)

    def test_rejects_tilt(self, unit_box):
        c, s = math.cos(0.1), math.sin(0.1)
        pitch = RigidTransform(np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]]))
        with pytest.raises(ValueError, match="tilts"):
            transform_box(unit_box, pitch)

    def test_non_orthonormal_rejected(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, 2.0]))
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]))

    def test_inverse_and_compose(self):
        t = RigidTransform.from_yaw(0.4, (1, 2, 3))
        ident = t.compose(t.inverse())
        np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(ident.translation, 0, atol=1e-12)
