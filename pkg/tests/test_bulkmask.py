import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepbcr import bulkmask as bm
from deepbcr.errors import CoordOutOfBounds, DuplicateCoord, EmptyTumorBulk

import oracles
from oracles import tiny_bag


@st.composite
def masks(draw, max_side=14):
    rows = draw(st.integers(1, max_side))
    cols = draw(st.integers(1, max_side))
    density = draw(st.floats(0.05, 0.7))
    seed = draw(st.integers(0, 2**31))
    return np.random.default_rng(seed).random((rows, cols)) < density


class TestMorphology:
    def test_closing_fills_gap(self):
        np.testing.assert_array_equal(bm.closing(np.array([[1, 0, 1]], bool), 1), [[True, True, True]])

    @settings(max_examples=150, deadline=None)
    @given(masks(), st.integers(0, 2))
    def test_closing_extensive_idempotent(self, bits, r):
        c = bm.closing(bits, r)
        assert (c >= bits).all()
        np.testing.assert_array_equal(bm.closing(c, r), c)

    @settings(max_examples=100, deadline=None)
    @given(masks(), st.sampled_from([4, 8]))
    def test_component_count(self, bits, conn):
        labels, sizes = bm.label_components(bits, conn)
        assert len(sizes) == oracles.brute_components(bits, conn)
        assert sum(sizes) == bits.sum()
        # row-major first-encounter order
        firsts = [np.flatnonzero(labels.reshape(-1) == k + 1)[0] for k in range(len(sizes))]
        assert firsts == sorted(firsts)

    def test_remove_small(self):
        bits = np.zeros((5, 5), bool)
        bits[0, 0] = True
        bits[2:5, 2:5] = True
        out = bm.remove_small(bits, 2)
        assert not out[0, 0] and out[2:, 2:].all()


class TestHull:
    def test_l_shape(self):
        pts = [(0, 0), (0, 1), (0, 2), (1, 2), (2, 2)]
        filled = set(bm.hull_fill_points(pts))
        assert (1, 1) in filled and set(pts) <= filled and len(filled) == 6

    def test_degenerate_hulls(self):
        assert bm.hull_fill_points([(3, 4)]) == [(3, 4)]
        assert sorted(bm.hull_fill_points([(0, 0), (2, 2)])) == [(0, 0), (1, 1), (2, 2)]

    @settings(max_examples=150, deadline=None)
    @given(masks(10), st.sampled_from([4, 8]))
    def test_fill_extensive_idempotent(self, bits, conn):
        filled, areas = bm.fill_component_hulls(bits, conn)
        union = np.zeros_like(bits)
        for f in filled:
            union |= f
        assert (union >= bits).all()
        for f, a in zip(filled, areas):
            assert f.sum() == a
            again, _ = bm.fill_component_hulls(f, 8)
            merged = np.zeros_like(f)
            for g in again:
                merged |= g
            np.testing.assert_array_equal(merged, f)


class TestSelection:
    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(1, 6), max_size=7), st.integers(1, 3))
    def test_enumeration_oracle(self, areas, n_keep):
        assert bm.select_largest(areas, n_keep) == oracles.enumerate_keep(areas, n_keep)

    @settings(max_examples=150, deadline=None)
    @given(masks(), st.integers(0, 6), st.sampled_from([4, 8]))
    def test_refine_keeps_at_most_two(self, bits, min_size, conn):
        params = bm.RefineParams(closing_radius=1, min_component_patches=min_size, n_keep=2, connectivity=conn)
        res = bm.refine_mask(bm.GridMask(bits), params)
        assert res.n_components <= 2
        assert oracles.brute_components(res.mask.bits, conn) <= 2
        assert res.empty == (res.mask.count() == 0)


class TestMaskIO:
    def test_predictions_to_mask(self):
        m = bm.predictions_to_mask([(0, 0), (1, 1)], [0.5, 0.49], cols=2, rows=2)
        np.testing.assert_array_equal(m.bits, [[True, False], [False, False]])
        with pytest.raises(CoordOutOfBounds):
            bm.predictions_to_mask([(2, 0)], [0.9], cols=2, rows=2)
        with pytest.raises(DuplicateCoord):
            bm.predictions_to_mask([(0, 0), (0, 0)], [0.9, 0.9], cols=2, rows=2)

    def test_filter_bag(self):
        bag = tiny_bag("s", "p", n=4)
        mask = bm.GridMask.empty(4, 1)
        mask.bits[0, [1, 3]] = True
        out = bm.filter_bag(bag, mask)
        np.testing.assert_array_equal(out.coords[:, 0], [1, 3])
        np.testing.assert_array_equal(out.features, bag.features[[1, 3]])
        with pytest.raises(EmptyTumorBulk):
            bm.filter_bag(bag, bm.GridMask.empty(4, 1))
        with pytest.raises(CoordOutOfBounds):
            bm.filter_bag(bag, bm.GridMask.empty(2, 1))

    def test_pgm_roundtrip(self, tmp_path):
        m = bm.GridMask(np.random.default_rng(0).random((7, 5)) < 0.5)
        bm.write_mask_pgm(tmp_path / "m.pgm", m)
        assert bm.read_mask_pgm(tmp_path / "m.pgm") == m
