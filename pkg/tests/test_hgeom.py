import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyptsp.hgeom import (
    AmbiguousCrossingError,
    DegenerateGeodesicError,
    DomainError,
    Horosphere,
    HPoint,
    VerticalHyperplane,
    as_array,
    crossing,
    dist_to_vertical,
    from_klein,
    geodesic,
    geodesic_midpoint,
    geodesic_peak,
    horosphere_intersections,
    hyp_distance,
    klein_distance,
    pairwise_dist,
    plane_crossings,
    to_klein,
    tour_length,
)

coord = st.floats(-5, 5, allow_nan=False)
height = st.floats(0.05, 20, allow_nan=False)
points2 = st.builds(lambda x, z: HPoint((x,), z), coord, height)
points3 = st.builds(lambda x, y, z: HPoint((x, y), z), coord, coord, height)


def P(*c):
    return HPoint.from_coords(c)


class TestDistance:
    def test_closed_forms(self):
        assert hyp_distance(P(0, 1), P(0, 2)) == pytest.approx(math.log(2), abs=1e-12)
        assert hyp_distance(P(0, 1), P(1, 1)) == pytest.approx(2 * math.asinh(0.5), abs=1e-12)
        assert hyp_distance(P(0.3, 0.7), P(0.3, 0.7)) == 0.0

    def test_rejects_bad_points(self):
        with pytest.raises(DomainError):
            HPoint((0.0,), 0.0)
        with pytest.raises(DomainError):
            HPoint((math.nan,), 1.0)
        with pytest.raises(DomainError):
            hyp_distance(P(0, 1), P(0, 0, 1))

    @given(points3, points3, points3)
    def test_metric_axioms(self, p, q, s):
        assert hyp_distance(p, q) == pytest.approx(hyp_distance(q, p), abs=1e-12)
        assert hyp_distance(p, s) <= hyp_distance(p, q) + hyp_distance(q, s) + 1e-9

    def test_vectorised_matches_scalar(self, rng):
        A = np.column_stack([rng.normal(size=20), np.exp(rng.normal(size=20))])
        D = pairwise_dist(A)
        pts = [HPoint.from_coords(a) for a in A]
        assert D[3, 7] == pytest.approx(hyp_distance(pts[3], pts[7]), abs=1e-12)


class TestGeodesic:
    def test_vertical(self):
        g = geodesic(P(0, 1), P(0, 3))
        assert g.vertical

    @pytest.mark.parametrize("a, b, centre", [((-1, 1), (1, 1), 0.0), ((0, 1), (2, 1), 1.0)])
    def test_symmetric_arcs(self, a, b, centre):
        g = geodesic(P(*a), P(*b))
        assert g.center[0] == pytest.approx(centre)
        assert g.radius == pytest.approx(math.sqrt(2))

    def test_identical_points(self):
        with pytest.raises(DegenerateGeodesicError):
            geodesic(P(0, 1), P(0, 1))

    @given(points3, points3)
    def test_endpoints_on_arc(self, p, q):
        if hyp_distance(p, q) < 1e-6:
            return
        g = geodesic(p, q)
        assert g.contains(p, 1e-7) and g.contains(q, 1e-7)


class TestCrossing:
    def test_examples(self):
        H = VerticalHyperplane(0, 0.5)
        assert crossing(geodesic(P(0, 1), P(0, 3)), H) is None
        x = crossing(geodesic(P(-1, 1), P(1, 1)), VerticalHyperplane(0, 0.0))
        assert x.x[0] == pytest.approx(0.0) and x.z == pytest.approx(math.sqrt(2))
        assert crossing(geodesic(P(0.1, 1), P(0.9, 1)), VerticalHyperplane(0, 2.0)) is None

    def test_endpoint_on_plane_is_ambiguous(self):
        with pytest.raises(AmbiguousCrossingError):
            crossing(geodesic(P(0, 1), P(1, 1)), VerticalHyperplane(0, 0.0))

    @given(points2, points2, st.floats(-4, 4))
    def test_iff_opposite_sides(self, p, q, c):
        sp, sq = p.x[0] - c, q.x[0] - c
        if min(abs(sp), abs(sq)) < 1e-6 or hyp_distance(p, q) < 1e-6:
            return
        x = crossing(geodesic(p, q), VerticalHyperplane(0, c))
        assert (x is not None) == (sp * sq < 0)
        if x is not None:
            assert geodesic(p, q).contains(x, 1e-6)

    def test_vectorised_matches_scalar(self):
        mask, X = plane_crossings(np.array([[-1.0, 1.0]]), np.array([[1.0, 1.0]]), 0, 0.0)
        assert mask[0] and np.allclose(X[0], [0.0, math.sqrt(2)])

    def test_peak(self):
        assert geodesic_peak(np.array([[-1.0, 1.0]]), np.array([[1.0, 1.0]]))[0] == pytest.approx(math.sqrt(2))
        assert geodesic_peak(np.array([[0.0, 1.0]]), np.array([[0.0, 4.0]]))[0] == pytest.approx(4.0)


class TestHorosphere:
    def test_examples(self):
        pts = horosphere_intersections(geodesic(P(0, 1), P(0, 4)), Horosphere(2.0))
        assert len(pts) == 1 and pts[0].z == 2.0 and pts[0].x == (0.0,)
        pts = horosphere_intersections(geodesic(P(-1, 1), P(1, 1)), Horosphere(1.2))
        xs = sorted(p.x[0] for p in pts)
        h = math.sqrt(2 - 1.44)
        assert xs == pytest.approx([-h, h])
        assert horosphere_intersections(geodesic(P(-1, 1), P(1, 1)), Horosphere(3.0)) == []

    @given(points3, points3, height)
    def test_at_most_two(self, p, q, c):
        if hyp_distance(p, q) < 1e-6:
            return
        assert len(horosphere_intersections(geodesic(p, q), Horosphere(c))) <= 2


class TestVerticalDistance:
    def test_examples(self):
        H = VerticalHyperplane(0, 0.0)
        assert dist_to_vertical(P(1, 1), H) == pytest.approx(math.asinh(1), abs=1e-12)
        assert dist_to_vertical(P(0, 5), H) == 0.0
        assert dist_to_vertical(P(1, 2), H) == pytest.approx(math.asinh(0.5), abs=1e-12)


class TestKlein:
    def test_origin_to_centre(self):
        assert np.allclose(to_klein(P(0, 0, 1)), 0.0)

    @given(points3, points3)
    def test_round_trip_and_distance(self, p, q):
        back = from_klein(to_klein(p))
        assert np.allclose(back.coords(), p.coords(), rtol=1e-9, atol=1e-9)
        assert klein_distance(to_klein(p), to_klein(q)) == pytest.approx(hyp_distance(p, q), abs=1e-9, rel=1e-9)

    def test_outside_ball(self):
        with pytest.raises(DomainError):
            from_klein([1.0, 0.0])


class TestMidpointAndTours:
    def test_midpoints(self):
        m = geodesic_midpoint(P(0, 1), P(0, 4))
        assert m.x[0] == pytest.approx(0.0, abs=1e-12) and m.z == pytest.approx(2.0)
        m = geodesic_midpoint(P(-1, 1), P(1, 1))
        assert m.x[0] == pytest.approx(0.0, abs=1e-12) and m.z == pytest.approx(math.sqrt(2))

    @given(points3, points3)
    def test_equidistant(self, p, q):
        m = geodesic_midpoint(p, q)
        half = hyp_distance(p, q) / 2
        assert hyp_distance(p, m) == pytest.approx(half, abs=1e-8)
        assert hyp_distance(q, m) == pytest.approx(half, abs=1e-8)

    def test_tour_length(self):
        assert tour_length([P(0, 1), P(0, 2)], closed=False) == pytest.approx(math.log(2))
        tri = [P(0, 1), P(1, 2), P(-1, 3)]
        total = sum(hyp_distance(a, b) for a, b in zip(tri, tri[1:] + tri[:1]))
        assert tour_length(tri) == pytest.approx(total)
        assert tour_length(tri[::-1]) == pytest.approx(total)

    def test_as_array(self):
        assert as_array([P(1, 2), P(3, 4)]).shape == (2, 2)
