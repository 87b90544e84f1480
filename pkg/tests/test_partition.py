import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from kpshift.errors import ShapeError
from kpshift.partition import (SeparationNet, bias_scale, build_partition, compute_adaptive_bias,
                               partition_video, region_bounds)


def bounds(p, i):
    b = region_bounds(p, i)
    return (b.row_lo, b.row_hi, b.col_lo, b.col_hi)


class TestBias:
    def test_zero_net_gives_zero_bias(self):
        frame = np.random.default_rng(0).normal(size=(8, 5, 5))
        np.testing.assert_array_equal(compute_adaptive_bias(frame, SeparationNet.zeros(8), 2), [0, 0])

    def test_saturates_below_scale(self):
        rng = np.random.default_rng(1)
        net = SeparationNet.init(4, rng)
        net.b1[:] = 1.0
        net.w2[:] = 1e6
        b = compute_adaptive_bias(np.abs(rng.normal(size=(4, 14, 14))), net, 2)
        s = bias_scale(14, 14, 2)
        assert np.all(b <= s)
        np.testing.assert_allclose(b, s, rtol=1e-12)
        net.w2[:] = 2.0
        b = compute_adaptive_bias(np.abs(rng.normal(size=(4, 14, 14))), net, 2)
        assert np.all(b < s) and np.all(b > 0.9 * s)

    def test_matches_loop_oracle(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            C = int(rng.choice([1, 3, 4, 8]))
            net = SeparationNet.init(C, rng)
            frame = rng.normal(size=(C, 6, 7))
            k = int(rng.integers(1, 4))
            np.testing.assert_allclose(compute_adaptive_bias(frame, net, k),
                                       oracles.separation_bias(frame, net, k), atol=1e-12)

    def test_depends_on_scale_of_constant_frame(self):
        net = SeparationNet.init(4, np.random.default_rng(5))
        net.b1[:] = 0.1
        a = compute_adaptive_bias(np.full((4, 6, 6), 1.0), net, 2)
        b = compute_adaptive_bias(np.full((4, 6, 6), 2.0), net, 2)
        assert not np.allclose(a, b)

    def test_blind_to_pixel_arrangement(self):
        rng = np.random.default_rng(2)
        net = SeparationNet.init(8, rng)
        frame = rng.normal(size=(8, 9, 9))
        perm = rng.permutation(81)
        shuffled = frame.reshape(8, 81)[:, perm].reshape(8, 9, 9)
        np.testing.assert_allclose(compute_adaptive_bias(shuffled, net, 2),
                                   compute_adaptive_bias(frame, net, 2), atol=1e-14)


class TestBuildPartition:
    def test_zero_bias_is_uniform_grid(self):
        p = build_partition(14, 14, 2, (0.0, 0.0))
        assert list(p.row_lines) == [7] and list(p.col_lines) == [7]

    def test_shifted_lines(self):
        p = build_partition(14, 14, 2, (2.0, -1.0))
        assert list(p.row_lines) == [9] and list(p.col_lines) == [6]

    def test_clamped(self):
        p = build_partition(14, 14, 2, (100.0, 0.0))
        assert list(p.row_lines) == [13]

    def test_k1_is_whole_frame(self):
        p = build_partition(5, 7, 1, (3.0, -3.0))
        assert bounds(p, 0) == (0, 5, 0, 7)

    def test_region_bounds(self):
        assert bounds(build_partition(14, 14, 2, (0, 0)), 0) == (0, 7, 0, 7)
        assert bounds(build_partition(14, 14, 2, (2, -1)), 3) == (9, 14, 6, 14)

    def test_rounding_is_half_up(self):
        assert list(build_partition(14, 14, 2, (0.5, -0.5)).row_lines) == [8]
        assert list(build_partition(14, 14, 2, (0.5, -0.5)).col_lines) == [7]
        assert list(build_partition(10, 10, 3, (0, 0)).row_lines) == [3, 7]

    def test_too_small(self):
        with pytest.raises(ShapeError):
            build_partition(2, 5, 3, (0, 0))

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            region_bounds(build_partition(6, 6, 2, (0, 0)), 4)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 4), st.integers(4, 20), st.integers(4, 20),
           st.floats(-50, 50), st.floats(-50, 50))
    def test_regions_tile_the_frame(self, k, H, W, br, bc):
        if H < k or W < k:
            return
        p = build_partition(H, W, k, (br, bc))
        m = p.masks()
        assert m.shape == (k * k, H, W)
        np.testing.assert_array_equal(m.sum(axis=0), 1)
        assert np.all(np.diff(p.row_lines) > 0) and np.all(np.diff(p.col_lines) > 0)
        for i in range(k * k):
            r0, r1, c0, c1 = bounds(p, i)
            assert r0 < r1 and c0 < c1
            assert m[i, r0:r1, c0:c1].all() and m[i].sum() == (r1 - r0) * (c1 - c0)
        assert oracles.regions(H, W, k, (br, bc)) == [bounds(p, i) for i in range(k * k)]


def test_video_partition_is_per_frame():
    rng = np.random.default_rng(0)
    net = SeparationNet.init(4, rng)
    net.w2 *= 5
    F = rng.normal(size=(4, 3, 8, 8)) + np.arange(3)[None, :, None, None]
    p, bias = partition_video(F, net, 2)
    assert p.lead_shape == (3,) and bias.shape == (3, 2)
    for t in range(3):
        single = build_partition(8, 8, 2, compute_adaptive_bias(F[:, t], net, 2))
        np.testing.assert_array_equal(p[t].row_lines, single.row_lines)
        np.testing.assert_array_equal(p[t].col_lines, single.col_lines)
