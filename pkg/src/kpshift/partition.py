"""Adaptive k x k separation of feature-map frames into K = k*k regions.

A small perceptron reads the channel means of a frame and predicts one
(row, col) offset. Every interior grid line of that frame is shifted by the
rounded offset, then clamped so that each region keeps at least one cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

VALID_K = (1, 4, 9, 16)


def side_from_regions(K):
    if K not in VALID_K:
        raise ConfigError(f"K must be one of {VALID_K}, got {K}")
    return math.isqrt(K)


def round_half_up(x):
    return np.floor(np.asarray(x, np.float64) + 0.5)


@dataclass(frozen=True)
class RegionBounds:
    row_lo: int
    row_hi: int
    col_lo: int
    col_hi: int


@dataclass
class SeparationNet:
    """gap -> C/4 hidden units -> relu -> 2 outputs -> scaled tanh."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def hidden_width(channels):
        return max(1, channels // 4)

    @classmethod
    def init(cls, channels, rng):
        hid = cls.hidden_width(channels)
        a1, a2 = 1.0 / math.sqrt(channels), 1.0 / math.sqrt(hid)
        return cls(
            w1=rng.uniform(-a1, a1, (hid, channels)),
            b1=rng.uniform(-a1, a1, hid),
            w2=rng.uniform(-a2, a2, (2, hid)),
            b2=rng.uniform(-a2, a2, 2),
        )

    @classmethod
    def zeros(cls, channels):
        hid = cls.hidden_width(channels)
        return cls(np.zeros((hid, channels)), np.zeros(hid), np.zeros((2, hid)), np.zeros(2))

    @property
    def channels(self):
        return self.w1.shape[1]


def bias_scale(H, W, k):
    return np.array([H / (2.0 * k), W / (2.0 * k)])


def bias_from_means(means, net, scale):
    """Evaluate the separation net on channel means ``(..., C)``.

    Returns ``(bias, hidden_pre, tanh_out)``; the last two are kept for the
    backward pass.
    """
    pre = means @ net.w1.T + net.b1
    hidden = np.maximum(pre, 0.0)
    th = np.tanh(hidden @ net.w2.T + net.b2)
    return scale * th, pre, th


def compute_adaptive_bias(frame, net, k):
    """Offset ``(d_row, d_col)`` for a ``(..., C, H, W)`` frame.

    Bounded to ``(-H/2k, H/2k) x (-W/2k, W/2k)``. Only channel means are
    read, so the result ignores the spatial arrangement of the frame.
    """
    frame = np.asarray(frame, np.float64)
    if frame.shape[-3] != net.channels:
        raise ShapeError(f"frame has {frame.shape[-3]} channels, net expects {net.channels}")
    H, W = frame.shape[-2:]
    bias, _, _ = bias_from_means(frame.mean(axis=(-2, -1)), net, bias_scale(H, W, k))
    return bias


def baseline_lines(n, k):
    return round_half_up(np.arange(1, k) * n / k).astype(np.int64)


def _clamped_lines(n, k, offset):
    offset = np.asarray(offset)
    j = np.arange(1, k)
    lines = baseline_lines(n, k) + offset[..., None].astype(np.int64)
    return np.clip(lines, j, n - k + j)


@dataclass(frozen=True)
class GridPartition:
    """Interior grid lines for one frame, or stacked over leading axes.

    ``row_lines`` and ``col_lines`` have shape ``(..., k - 1)``.
    """

    k: int
    H: int
    W: int
    row_lines: np.ndarray
    col_lines: np.ndarray

    @property
    def K(self):
        return self.k * self.k

    @property
    def lead_shape(self):
        return self.row_lines.shape[:-1]

    def __getitem__(self, idx):
        if not self.lead_shape:
            raise IndexError("single-frame partition cannot be indexed")
        return GridPartition(self.k, self.H, self.W, self.row_lines[idx], self.col_lines[idx])

    def edges(self):
        lead = self.lead_shape
        rows = np.concatenate(
            [np.zeros(lead + (1,), np.int64), self.row_lines, np.full(lead + (1,), self.H)], -1)
        cols = np.concatenate(
            [np.zeros(lead + (1,), np.int64), self.col_lines, np.full(lead + (1,), self.W)], -1)
        return rows, cols

    def masks(self):
        """Boolean membership ``(..., K, H, W)``, regions row-major over the grid."""
        rows, cols = self.edges()
        r = np.arange(self.H)
        c = np.arange(self.W)
        in_row = (r >= rows[..., :-1, None]) & (r < rows[..., 1:, None])  # (..., k, H)
        in_col = (c >= cols[..., :-1, None]) & (c < cols[..., 1:, None])  # (..., k, W)
        m = in_row[..., :, None, :, None] & in_col[..., None, :, None, :]
        return m.reshape(self.lead_shape + (self.K, self.H, self.W))


def build_partition(H, W, k, bias):
    if k < 1:
        raise ConfigError(f"grid side k must be >= 1, got {k}")
    if H < k or W < k:
        raise ShapeError(f"frame {H}x{W} too small for a {k}x{k} grid")
    bias = np.asarray(bias, np.float64)
    shift = round_half_up(bias)
    return GridPartition(
        k, H, W,
        _clamped_lines(H, k, shift[..., 0]),
        _clamped_lines(W, k, shift[..., 1]),
    )


def region_bounds(p, region_index):
    if p.lead_shape:
        raise ShapeError("region_bounds needs a single-frame partition")
    if not 0 <= region_index < p.K:
        raise IndexError(f"region {region_index} out of range for K={p.K}")
    rows, cols = p.edges()
    a, b = divmod(region_index, p.k)
    return RegionBounds(int(rows[a]), int(rows[a + 1]), int(cols[b]), int(cols[b + 1]))


def partition_video(F, net, k):
    """Per-frame partitions for ``F`` of shape ``(..., C, T, H, W)``.

    Returns the partition (leading shape ``(..., T)``) and the continuous bias.
    """
    F = np.asarray(F, np.float64)
    H, W = F.shape[-2:]
    if H < k or W < k:
        raise ShapeError(f"frame {H}x{W} too small for a {k}x{k} grid")
    means = np.moveaxis(F.mean(axis=(-2, -1)), -2, -1)  # (..., T, C)
    bias, _, _ = bias_from_means(means, net, bias_scale(H, W, k))
    return build_partition(H, W, k, bias), bias
