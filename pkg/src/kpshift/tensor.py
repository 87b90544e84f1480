"""Dense numeric primitives and the KPST tensor container.

Tensors are plain ``numpy.ndarray`` values (row-major, float32 or float64).
Every kernel accumulates in float64 and casts back to the input dtype.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"KPST"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sHBB")


def _result_dtype(x):
    return x.dtype if x.dtype in (np.float32, np.float64) else np.dtype(np.float64)


def softmax_axis(t, axis):
    t = np.asarray(t)
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {t.ndim}")
    x = t.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return (e / e.sum(axis=axis, keepdims=True)).astype(_result_dtype(t), copy=False)


def softmax_backward(y, dy, axis):
    """Adjoint of ``y = softmax(x, axis)`` given the forward output."""
    return y * (dy - (y * dy).sum(axis=axis, keepdims=True))


def _check_bounds(frame, bounds):
    if frame.ndim != 2:
        raise ShapeError(f"expected an H x W frame, got rank {frame.ndim}")
    h, w = frame.shape
    r0, r1, c0, c1 = bounds.row_lo, bounds.row_hi, bounds.col_lo, bounds.col_hi
    if not (r0 < r1 and c0 < c1):
        raise ShapeError(f"empty region rows [{r0},{r1}) cols [{c0},{c1})")
    if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
        raise ShapeError(f"region rows [{r0},{r1}) cols [{c0},{c1}) outside {h}x{w} frame")
    return r0, r1, c0, c1


def region_reduce_max(frame, bounds):
    """Maximum over a rectangular region; returns ((row, col), value).

    The coordinate is in full-frame space. Ties go to the first cell of a
    row-major scan of the region.
    """
    frame = np.asarray(frame)
    r0, r1, c0, c1 = _check_bounds(frame, bounds)
    sub = frame[r0:r1, c0:c1]
    idx = int(np.argmax(sub))
    dr, dc = divmod(idx, c1 - c0)
    return (r0 + dr, c0 + dc), float(sub[dr, dc])


def region_reduce_mean(frame, bounds):
    frame = np.asarray(frame)
    r0, r1, c0, c1 = _check_bounds(frame, bounds)
    return float(frame[r0:r1, c0:c1].astype(np.float64).mean())


def linear_forward(x, weight, bias):
    x = np.asarray(x)
    weight = np.asarray(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input last extent {x.shape[-1]} vs weight {weight.shape}")
    if np.shape(bias) != (weight.shape[0],):
        raise ShapeError(f"linear: bias {np.shape(bias)} vs weight {weight.shape}")
    y = x.astype(np.float64) @ weight.astype(np.float64).T + np.asarray(bias, np.float64)
    return y.astype(_result_dtype(x), copy=False)


def conv_out_extent(b):
    return (b + 2 - 3) // 2 + 1


def _conv_patches(x):
    # (..., C, A, B) -> (..., C, A, B_out, 3), zero padding 1 on the last axis
    b_out = conv_out_extent(x.shape[-1])
    pad = [(0, 0)] * (x.ndim - 1) + [(1, 1)]
    xp = np.pad(x, pad)
    return np.stack([xp[..., d:d + 2 * b_out:2] for d in range(3)], axis=-1)


def conv_1x3_halve(x, weight, bias):
    """Cross-correlation with a (1, 3) kernel, stride (1, 2), padding (0, 1).

    ``x`` is ``(..., C, A, B)``; ``weight`` is ``(C_out, C, 1, 3)`` with
    ``C_out = C / 2``. Output is ``(..., C_out, A, (B - 1) // 2 + 1)``.
    """
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.ndim < 3:
        raise ShapeError(f"conv: expected (..., C, A, B), got rank {x.ndim}")
    c = x.shape[-3]
    if c % 2:
        raise ShapeError(f"conv: channel count {c} is odd")
    if weight.shape != (c // 2, c, 1, 3):
        raise ShapeError(f"conv: weight {weight.shape}, expected {(c // 2, c, 1, 3)}")
    if np.shape(bias) != (c // 2,):
        raise ShapeError(f"conv: bias {np.shape(bias)}, expected {(c // 2,)}")
    if x.shape[-1] < 2:
        raise ShapeError(f"conv: last extent {x.shape[-1]} < 2")
    cols = _conv_patches(x.astype(np.float64))
    y = np.einsum("...cabd,ocd->...oab", cols, weight[:, :, 0, :].astype(np.float64))
    y += np.asarray(bias, np.float64)[:, None, None]
    return y.astype(_result_dtype(x), copy=False)


def conv_1x3_halve_backward(x, weight, dy):
    """Returns (dx, dweight, dbias) for :func:`conv_1x3_halve`."""
    x = np.asarray(x, np.float64)
    w = np.asarray(weight, np.float64)[:, :, 0, :]
    cols = _conv_patches(x)
    lead = tuple(range(dy.ndim - 3))
    dw = np.einsum("noab,ncabd->ocd", dy.reshape((-1,) + dy.shape[-3:]),
                   cols.reshape((-1,) + cols.shape[-4:]))[:, :, None, :]
    db = dy.sum(axis=lead + (-2, -1))
    dcols = np.einsum("...oab,ocd->...cabd", dy, w)
    b_out = dy.shape[-1]
    dxp = np.zeros(x.shape[:-1] + (x.shape[-1] + 2,))
    for d in range(3):
        dxp[..., d:d + 2 * b_out:2] += dcols[..., d]
    return dxp[..., 1:-1], dw, db


# --- KPST container ---------------------------------------------------------

def tensor_to_bytes(t):
    t = np.asarray(t)
    dt = t.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {t.dtype}; KPST stores f32 or f64")
    if t.ndim < 1 or t.ndim > 255 or 0 in t.shape:
        raise ValueError(f"cannot store tensor of shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("refusing to write non-finite tensor data")
    header = _HEADER.pack(MAGIC, VERSION, _DTYPE_CODES[dt], t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + dims + np.ascontiguousarray(t, dtype=dt).tobytes()


def tensor_from_bytes(buf):
    buf = bytes(buf)
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes", offset=len(buf))
    magic, version, code, ndim = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=6)
    if ndim == 0:
        raise FormatError("rank 0 tensor", offset=7)
    pos = _HEADER.size
    if len(buf) < pos + 8 * ndim:
        raise FormatError("truncated extents", offset=len(buf))
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError(f"extent {i} is zero", offset=pos + 8 * i)
    pos += 8 * ndim
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(dims, dtype=object)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes", offset=len(buf))
    if len(buf) > pos + nbytes:
        raise FormatError("trailing bytes after payload", offset=pos + nbytes)
    data = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def tensor_io_write(t, path):
    payload = tensor_to_bytes(t)
    with open(os.fspath(path), "wb") as fh:
        fh.write(payload)


def tensor_io_read(path):
    with open(os.fspath(path), "rb") as fh:
        return tensor_from_bytes(fh.read())
