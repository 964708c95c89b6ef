"""Static SVG drawings of 2D keypoint sequences."""

import os

import numpy as np

from .data import atomic_write

CELL = 120  # pixels per frame cell
PAD = 10


def _points(frame):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size % 2:
        raise ValueError(f"frame width {frame.size} is not a list of 2D keypoints")
    return frame.reshape(-1, 2)


def _extent(frames):
    pts = np.asarray(frames, dtype=np.float64).reshape(-1, 2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(np.max(hi - lo)) or 1.0
    return lo, span


def _figure(frame, lo, span, dx=0.0, colour="#1f4e79"):
    pts = _points(frame)
    scale = (CELL - 2 * PAD) / span
    xy = [(dx + PAD + (x - lo[0]) * scale, CELL - PAD - (y - lo[1]) * scale) for x, y in pts]
    parts = []
    if len(xy) > 1:
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in xy)
        parts.append(f'<polyline points="{path}" fill="none" stroke="{colour}" stroke-width="2"/>')
    parts.extend(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{colour}"/>' for x, y in xy)
    return parts


def _svg(width, body):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{CELL}" '
            f'viewBox="0 0 {width} {CELL}">')
    return "\n".join([head, f'<rect width="{width}" height="{CELL}" fill="white"/>', *body, "</svg>"]) + "\n"


def strip_svg(frames, split=None):
    """One image with every frame side by side; frames from ``split`` on are drawn in red."""
    frames = np.asarray(frames, dtype=np.float64)
    lo, span = _extent(frames)
    body = []
    for t, frame in enumerate(frames):
        colour = "#b22222" if split is not None and t >= split else "#1f4e79"
        body.extend(_figure(frame, lo, span, dx=t * CELL, colour=colour))
    return _svg(CELL * len(frames), body)


def frame_svgs(frames):
    frames = np.asarray(frames, dtype=np.float64)
    lo, span = _extent(frames)
    return [_svg(CELL, _figure(f, lo, span)) for f in frames]


def render(frames, out, layout="strip", split=None):
    """Write ``out`` (strip) or ``out/frame_XXXX.svg`` files (frames); returns the paths written."""
    if layout == "strip":
        atomic_write(out, strip_svg(frames, split))
        return [out]
    if layout == "frames":
        os.makedirs(out, exist_ok=True)
        paths = []
        for t, svg in enumerate(frame_svgs(frames)):
            path = os.path.join(out, f"frame_{t:04d}.svg")
            atomic_write(path, svg)
            paths.append(path)
        return paths
    raise ValueError(f"unknown layout {layout!r} (expected strip or frames)")
