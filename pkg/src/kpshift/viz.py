"""Deterministic SVG scenes of key points and their shifts.

One panel per frame. Key points are drawn as crosses coloured by region,
shifts as arrows from ``I[k, c, t]`` to ``I[k, c, t] + S[k, c, t]`` in panel
``t``. Zero-length shifts become dots. All numbers are written with a fixed
precision so identical inputs produce identical bytes.
"""
from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass

import numpy as np

from .arese import extract_key_points, key_point_shifts, location_differences, shift_weights
from .errors import ConfigError, ShapeError
from .partition import partition_video

PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6",
           "#bfef45", "#469990", "#9a6324", "#800000", "#808000", "#000075", "#a9a9a9",
           "#fabed4", "#ffd8b1")
CELL = 16
GAP = 12
MARGIN = 8


@dataclass
class SvgScene:
    """Hard-mode geometry for the selected channels of one set."""
    channels: tuple
    coords: np.ndarray  # (K, len(channels), T, 2)
    shifts: np.ndarray  # (K, len(channels), T-1, 2)
    row_lines: np.ndarray  # (T, k-1)
    col_lines: np.ndarray
    H: int
    W: int

    @property
    def T(self):
        return self.coords.shape[2]

    @property
    def K(self):
        return self.coords.shape[0]

    @property
    def arrow_count(self):
        return len(self.channels) * self.K * (self.T - 1)


def build_scene(F, net, cfg, channels):
    """Scene for one extractor set, given that set's separation net."""
    F = np.asarray(F, np.float64)
    if F.ndim != 4:
        raise ShapeError(f"expected rank 4 (C, T, H, W), got rank {F.ndim}")
    C, T, H, W = F.shape
    channels = tuple(int(c) for c in channels)
    if not channels:
        raise ConfigError("no channels selected")
    bad = [c for c in channels if not 0 <= c < C]
    if bad:
        raise ConfigError(f"channel(s) {bad} out of range for C={C}")
    if net.channels != C:
        raise ConfigError(f"separation net expects {net.channels} channels, video has {C}")
    partition, _ = partition_video(F, net, cfg.k)
    kp = extract_key_points(F, partition)
    S = key_point_shifts(location_differences(kp), shift_weights(kp, cfg.epsilon))
    sel = list(channels)
    return SvgScene(channels, kp.coords[:, sel].astype(np.float64), S[:, sel],
                    partition.row_lines, partition.col_lines, H, W)


def _fmt(v):
    return f"{v:.2f}"


def _cross(parent, x, y, color, size=3.0):
    d = (f"M{_fmt(x - size)} {_fmt(y - size)}L{_fmt(x + size)} {_fmt(y + size)}"
         f"M{_fmt(x - size)} {_fmt(y + size)}L{_fmt(x + size)} {_fmt(y - size)}")
    ET.SubElement(parent, "path", {"class": "keypoint", "d": d, "stroke": color,
                                   "stroke-width": "1.5", "fill": "none"})


def _arrow(parent, x0, y0, x1, y1, color):
    length = float(np.hypot(x1 - x0, y1 - y0))
    if length < 1e-9:
        ET.SubElement(parent, "circle", {"class": "shift", "cx": _fmt(x0), "cy": _fmt(y0),
                                         "r": "2.00", "fill": color})
        return
    ux, uy = (x1 - x0) / length, (y1 - y0) / length
    head = min(5.0, 0.5 * length)
    bx, by = x1 - ux * head, y1 - uy * head
    px, py = -uy * head * 0.5, ux * head * 0.5
    g = ET.SubElement(parent, "g", {"class": "shift"})
    ET.SubElement(g, "line", {"x1": _fmt(x0), "y1": _fmt(y0), "x2": _fmt(bx), "y2": _fmt(by),
                              "stroke": color, "stroke-width": "1.2"})
    pts = f"{_fmt(x1)},{_fmt(y1)} {_fmt(bx + px)},{_fmt(by + py)} {_fmt(bx - px)},{_fmt(by - py)}"
    ET.SubElement(g, "polygon", {"points": pts, "fill": color})


def render_svg(scene, cell=CELL):
    pw, ph = scene.W * cell, scene.H * cell
    width = 2 * MARGIN + scene.T * pw + (scene.T - 1) * GAP
    height = 2 * MARGIN + ph
    root = ET.Element("svg", {"xmlns": "http://www.w3.org/2000/svg", "width": str(width),
                              "height": str(height), "viewBox": f"0 0 {width} {height}"})

    def centre(ox, rc):
        # (row, col) in cells -> (x, y) in pixels at the cell centre
        return ox + (rc[1] + 0.5) * cell, MARGIN + (rc[0] + 0.5) * cell

    for t in range(scene.T):
        ox = MARGIN + t * (pw + GAP)
        panel = ET.SubElement(root, "g", {"class": "frame", "id": f"frame{t}"})
        ET.SubElement(panel, "rect", {"x": str(ox), "y": str(MARGIN), "width": str(pw),
                                      "height": str(ph), "fill": "#ffffff", "stroke": "#000000"})
        for r in scene.row_lines[t]:
            y = MARGIN + int(r) * cell
            ET.SubElement(panel, "line", {"class": "boundary", "x1": str(ox), "y1": str(y),
                                          "x2": str(ox + pw), "y2": str(y),
                                          "stroke": "#777777", "stroke-dasharray": "4 2"})
        for c in scene.col_lines[t]:
            x = ox + int(c) * cell
            ET.SubElement(panel, "line", {"class": "boundary", "x1": str(x), "y1": str(MARGIN),
                                          "x2": str(x), "y2": str(MARGIN + ph),
                                          "stroke": "#777777", "stroke-dasharray": "4 2"})
        for k in range(scene.K):
            color = PALETTE[k % len(PALETTE)]
            for j in range(len(scene.channels)):
                x0, y0 = centre(ox, scene.coords[k, j, t])
                _cross(panel, x0, y0, color)
                if t < scene.T - 1:
                    x1, y1 = centre(ox, scene.coords[k, j, t] + scene.shifts[k, j, t])
                    _arrow(panel, x0, y0, x1, y1, color)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def write_svg(scene, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_svg(scene))
