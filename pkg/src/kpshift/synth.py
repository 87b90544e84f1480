"""Synthetic motion videos whose class is decidable only from motion.

A Gaussian blob drifts in a straight line and stays at least ``margin``
pixels away from every edge. Along the motion axis the start is uniform over
the positions that keep the whole path inside the margins. The perpendicular
coordinate is drawn from the same distribution as the motion-axis coordinate
of a uniformly chosen frame. Pooled over frames, the blob position therefore
has one distribution for every class; only the direction of travel differs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASSES = ("up", "down", "left", "right")
DIRECTIONS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}

# additive recurrence with the plastic number gives a low-discrepancy 2-D sequence
_PLASTIC = 1.324717957244746
_R2_STEP = np.array([1.0 / _PLASTIC, 1.0 / _PLASTIC ** 2])


@dataclass(frozen=True)
class SyntheticVideoSpec:
    frames: int = 8
    size: int = 32
    sigma: float = 2.0
    peak: float = 1.0
    speed: float = 2.0
    noise: float = 0.05
    margin: float = 6.0

    def __post_init__(self):
        if not 0.0 <= self.noise <= 0.1:
            raise ValueError(f"noise amplitude must be in [0, 0.1], got {self.noise}")
        if self.slack < 0:
            raise ValueError(f"a {self.frames}-frame path at speed {self.speed} does not fit "
                             f"inside margin {self.margin} of a {self.size}-pixel frame")

    @property
    def travel(self):
        return self.speed * (self.frames - 1)

    @property
    def slack(self):
        # range of admissible start offsets along the motion axis
        return self.size - 1 - 2 * self.margin - self.travel


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    spec: SyntheticVideoSpec

    @property
    def n_classes(self):
        return len(CLASSES)


def centers(labels, starts, spec):
    """Blob centre ``(n, T, 2)`` per frame."""
    vel = np.array([DIRECTIONS[CLASSES[c]] for c in labels], np.float64) * spec.speed
    t = np.arange(spec.frames)[None, :, None]
    return starts[:, None, :] + t * vel[:, None, :]


def start_positions(labels, z, spec):
    """Map points ``z`` in the unit square to admissible start positions.

    ``z[:, 0]`` places the start along the motion axis; ``z[:, 1]`` picks the
    perpendicular coordinate as the motion-axis coordinate of a random frame.
    """
    labels = np.asarray(labels)
    lo = spec.margin
    offset = z[:, 0] * spec.slack
    frame = np.floor(z[:, 1] * spec.frames)
    perp = lo + np.mod(z[:, 1] * spec.frames, 1.0) * spec.slack + frame * spec.speed
    starts = np.empty((len(labels), 2))
    for i, c in enumerate(labels):
        dr, dc = DIRECTIONS[CLASSES[c]]
        step = dr + dc
        along = lo + offset[i] if step > 0 else lo + offset[i] + spec.travel
        axis = 0 if dr else 1
        starts[i, axis] = along
        starts[i, 1 - axis] = perp[i]
    return starts


def render(labels, starts, spec, rng=None):
    """Videos ``(n, 1, T, size, size)`` as float32; noise needs ``rng``."""
    labels = np.asarray(labels)
    starts = np.asarray(starts, np.float64).reshape(-1, 2)
    c = centers(labels, starts, spec)
    grid = np.arange(spec.size, dtype=np.float64)

    def bump(axis):
        d = grid - c[..., axis, None]
        return np.exp(-d ** 2 / (2.0 * spec.sigma ** 2))

    video = spec.peak * bump(0)[..., :, None] * bump(1)[..., None, :]
    if spec.noise > 0:
        if rng is None:
            raise ValueError("noise > 0 requires an rng")
        video = video + rng.uniform(-spec.noise, spec.noise, video.shape)
    return video[:, None].astype(np.float32)


def _split(n, spec, rng):
    labels = np.arange(n) % len(CLASSES)
    z = np.empty((n, 2))
    for cls in range(len(CLASSES)):
        # stratified per class so every class covers the start square evenly
        idx = np.flatnonzero(labels == cls)
        shift = rng.uniform(0.0, 1.0, 2)
        j = np.arange(len(idx))[:, None]
        z[idx] = np.mod(shift + j * _R2_STEP, 1.0)
    starts = start_positions(labels, z, spec)
    order = rng.permutation(n)
    labels, starts = labels[order], starts[order]
    return render(labels, starts, spec, rng), labels


def generate_dataset(spec=None, n_train=2000, n_test=400, seed=0):
    """Balanced, deterministic train/test split drawn from independent streams."""
    spec = spec or SyntheticVideoSpec()
    if n_train < 1 or n_test < 1:
        raise ValueError("dataset sizes must be >= 1")
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    x_train, y_train = _split(n_train, spec, np.random.default_rng(train_seq))
    x_test, y_test = _split(n_test, spec, np.random.default_rng(test_seq))
    return Dataset(x_train, y_train, x_test, y_test, spec)
