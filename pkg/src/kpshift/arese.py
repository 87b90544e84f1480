"""One adaptive regional shift extractor set.

Array layouts (any number of leading batch axes ``...``)::

    F        (..., C, T, H, W)
    masks    (..., T, K, H, W)
    coords   (..., K, C, T, 2)      full-frame (row, col)
    values   (..., K, C, T)
    deltas   (..., K_r, K_n, C, T-1, 2)
    weights  (..., K_r, K_n, C, T-1)
    shifts   (..., K, C, T-1, 2)
    regional (..., K, C, T-1)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NeedTwoFramesError, ShapeError
from .partition import GridPartition, partition_video
from .tensor import softmax_axis


@dataclass
class KeyPointField:
    coords: np.ndarray
    values: np.ndarray

    @property
    def K(self):
        return self.values.shape[-3]


def _masks(partition):
    return partition.masks() if isinstance(partition, GridPartition) else np.asarray(partition)


def _check_video(F):
    F = np.asarray(F, np.float64)
    if F.ndim < 4:
        raise ShapeError(f"expected (..., C, T, H, W), got rank {F.ndim}")
    return F


def masked_argmax(F, masks):
    """Per-region maxima. Returns (flat index into H*W, value), both ``(..., K, C, T)``."""
    m = np.swapaxes(masks, -4, -3)[..., :, None, :, :, :]
    fx = np.where(m, F[..., None, :, :, :, :], -np.inf)
    flat = fx.reshape(fx.shape[:-2] + (-1,))
    idx = flat.argmax(axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return idx, vals


def extract_key_points(F, partition):
    F = _check_video(F)
    masks = _masks(partition)
    if masks.shape[-4] != F.shape[-3] or masks.shape[-2:] != F.shape[-2:]:
        raise ShapeError(f"partition masks {masks.shape} do not cover video {F.shape}")
    idx, vals = masked_argmax(F, masks)
    rows, cols = np.divmod(idx, F.shape[-1])
    return KeyPointField(np.stack([rows, cols], axis=-1), vals)


def location_differences(kp):
    I = kp.coords
    if I.shape[-2] < 2:
        raise NeedTwoFramesError(I.shape[-2])
    nxt = I[..., None, :, :, 1:, :]
    cur = I[..., :, None, :, :-1, :]
    return nxt - cur


def value_gaps(values):
    """``V[alpha, c, i] - V[beta, c, i + 1]`` laid out ``(..., K_r, K_n, C, T-1)``."""
    return values[..., :, None, :, :-1] - values[..., None, :, :, 1:]


def shift_weights(kp, epsilon=0.1):
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    values = kp.values if isinstance(kp, KeyPointField) else np.asarray(kp)
    if values.shape[-1] < 2:
        raise NeedTwoFramesError(values.shape[-1])
    affinity = 1.0 / (np.abs(value_gaps(values)) + epsilon)
    return softmax_axis(affinity, -3)


def key_point_shifts(deltas, weights):
    if deltas.shape[:-1] != weights.shape:
        raise ShapeError(f"deltas {deltas.shape} vs weights {weights.shape}")
    return (weights[..., None] * deltas).sum(axis=-4)


def region_sums(m, F):
    """``sum_hw m[..., t, k, h, w] * F[..., c, t, h, w]`` laid out ``(..., K, C, T)``."""
    mf = m.reshape(m.shape[:-2] + (-1,))  # (..., T, K, HW)
    ff = np.swapaxes(F.reshape(F.shape[:-2] + (-1,)), -3, -2)  # (..., T, C, HW)
    out = np.matmul(mf, np.swapaxes(ff, -1, -2))  # (..., T, K, C)
    return np.moveaxis(out, -3, -1)


def region_means(F, masks):
    """Mean of each region ``(..., K, C, T)``; ``masks`` may be boolean or soft."""
    m = masks.astype(np.float64)
    sums = region_sums(m, F)
    counts = np.swapaxes(m.sum(axis=(-2, -1)), -2, -1)[..., :, None, :]
    return sums / counts


def regional_weights(F, partition):
    F = _check_video(F)
    if F.shape[-3] < 2:
        raise NeedTwoFramesError(F.shape[-3])
    means = region_means(F, _masks(partition))
    pairs = 0.5 * (means[..., :-1] + means[..., 1:])
    return softmax_axis(pairs, -3)


def compose_rkps(shifts, regional):
    if shifts.shape[:-1] != regional.shape:
        raise ShapeError(f"shifts {shifts.shape} vs regional weights {regional.shape}")
    return regional[..., None] * shifts


def shift_scale(H, W):
    return np.array([1.0 / max(H - 1, 1), 1.0 / max(W - 1, 1)])


def arese_forward(F, net, cfg):
    """Regional key point shifts ``(..., K, C, T-1, 2)`` for one set."""
    F = _check_video(F)
    C, T, H, W = F.shape[-4:]
    if T < 2:
        raise NeedTwoFramesError(T)
    if C != net.channels:
        raise ShapeError(f"video has {C} channels, separation net expects {net.channels}")
    partition, _ = partition_video(F, net, cfg.k)
    kp = extract_key_points(F, partition)
    shifts = key_point_shifts(location_differences(kp), shift_weights(kp, cfg.epsilon))
    if cfg.normalize_shifts:
        shifts = shifts * shift_scale(H, W)
    return compose_rkps(shifts, regional_weights(F, partition))
