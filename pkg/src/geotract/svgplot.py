"""Deterministic SVG rendering: tensor glyph maps and line charts.

Hand-rolled on purpose. The drawings are experiment artifacts that must be
byte-identical across reruns, so every coordinate passes through one
fixed-precision formatter, elements are emitted in a fixed order, and
nothing (no timestamp, no generator id) leaks into the output.
"""

from __future__ import annotations

import numpy as np

from ._envelope import write_text_atomic

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

_AXIS_COLOR = "#444444"
_GRID_COLOR = "#dddddd"
_FONT = "font-family=\"Helvetica, Arial, sans-serif\""


def _fmt(value):
    """Fixed 4-decimal float, trailing zeros trimmed, -0 normalized."""
    text = f"{float(value):.4f}".rstrip("0").rstrip(".")
    return "0" if text == "-0" else text


def _escape(text):
    return (str(text).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))


class SvgCanvas:
    """Accumulates SVG elements; rendering order is insertion order."""

    def __init__(self, width, height, background="#ffffff"):
        self.width = float(width)
        self.height = float(height)
        self._parts = [
            f'<rect x="0" y="0" width="{_fmt(width)}" '
            f'height="{_fmt(height)}" fill="{background}"/>'
        ]

    def line(self, x1, y1, x2, y2, stroke, stroke_width=1.0):
        self._parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" '
            f'y2="{_fmt(y2)}" stroke="{stroke}" '
            f'stroke-width="{_fmt(stroke_width)}"/>'
        )

    def polyline(self, points, stroke, stroke_width=1.0, opacity=1.0):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self._parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{stroke}" '
            f'stroke-width="{_fmt(stroke_width)}" '
            f'stroke-opacity="{_fmt(opacity)}" stroke-linejoin="round"/>'
        )

    def ellipse(self, cx, cy, rx, ry, angle_deg, fill, opacity=1.0):
        self._parts.append(
            f'<ellipse cx="0" cy="0" rx="{_fmt(rx)}" ry="{_fmt(ry)}" '
            f'fill="{fill}" fill-opacity="{_fmt(opacity)}" '
            f'transform="translate({_fmt(cx)} {_fmt(cy)}) '
            f'rotate({_fmt(angle_deg)})"/>'
        )

    def text(self, x, y, content, size=12.0, anchor="start", fill="#222222"):
        self._parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{_fmt(size)}" '
            f'text-anchor="{anchor}" fill="{fill}" {_FONT}>'
            f"{_escape(content)}</text>"
        )

    def to_string(self):
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{_fmt(self.width)}" height="{_fmt(self.height)}" '
            f'viewBox="0 0 {_fmt(self.width)} {_fmt(self.height)}">'
        )
        return head + "\n" + "\n".join(self._parts) + "\n</svg>\n"


def save_svg(text, path):
    write_text_atomic(path, text)


def field_map(field, track_sets=(), track_labels=(), canvas_width=720.0):
    """Tensor field as one ellipse glyph per voxel, tracks overlaid on top.

    Glyph semi-axes scale with sqrt(eigenvalue) normalized to the largest
    eigenvalue in the field, so relative size is comparable across voxels;
    orientation colors follow the usual principal-direction convention
    (|e1_x| into red, |e1_y| into green).
    """
    if field.dim != 2:
        raise ValueError("glyph maps are planar: expected a 2D field")
    track_sets = list(track_sets)
    track_labels = list(track_labels)
    if track_labels and len(track_labels) != len(track_sets):
        raise ValueError("one label per track set required")

    ox, oy = field.origin
    sx, sy = field.spacing
    nx, ny = field.dims
    world_w = nx * sx
    world_h = ny * sy
    margin = 24.0
    scale = (canvas_width - 2 * margin) / world_w
    height = world_h * scale + 2 * margin

    def to_px(p):
        return (margin + (p[0] - (ox - 0.5 * sx)) * scale,
                height - margin - (p[1] - (oy - 0.5 * sy)) * scale)

    canvas = SvgCanvas(canvas_width, height)

    mats = field.data
    w, vecs = np.linalg.eigh(mats)
    wmax = float(w.max())
    if wmax <= 0.0:
        wmax = 1.0
    r_world = 0.47 * min(sx, sy)
    for flat in range(mats.shape[0]):
        idx = np.unravel_index(flat, field.dims)
        center = to_px(field.voxel_center(idx))
        amp = np.sqrt(np.maximum(w[flat], 0.0) / wmax)
        rx = amp[1] * r_world * scale
        ry = amp[0] * r_world * scale
        e1 = vecs[flat][:, 1]
        angle = -np.degrees(np.arctan2(e1[1], e1[0]))
        red = int(round(205 * abs(e1[0]))) + 50
        green = int(round(205 * abs(e1[1]))) + 50
        fill = f"rgb({red},{green},120)"
        canvas.ellipse(center[0], center[1], rx, ry, angle, fill, opacity=0.85)

    for set_idx, tracks in enumerate(track_sets):
        color = PALETTE[set_idx % len(PALETTE)]
        for track in tracks:
            points = [to_px(v) for v in np.asarray(track.vertices)]
            if len(points) >= 2:
                canvas.polyline(points, color, stroke_width=2.0, opacity=0.9)

    legend_y = margin
    for set_idx, label in enumerate(track_labels):
        color = PALETTE[set_idx % len(PALETTE)]
        canvas.line(margin, legend_y, margin + 22, legend_y, color, 3.0)
        canvas.text(margin + 28, legend_y + 4, label, size=12.0)
        legend_y += 18.0

    return canvas.to_string()


def line_chart(x, series, x_label="", y_label="", width=720.0, height=440.0):
    """Plain line chart: shared x, one polyline per (label, y) pair."""
    x = np.asarray(x, dtype=float)
    series = [(str(label), np.asarray(y, dtype=float)) for label, y in series]
    if x.ndim != 1 or x.size < 2:
        raise ValueError("x must be a 1-D array with at least two samples")
    if not series:
        raise ValueError("at least one series required")
    for label, y in series:
        if y.shape != x.shape:
            raise ValueError(f"series {label!r} does not match x in length")
        if not np.all(np.isfinite(y)):
            raise ValueError(f"series {label!r} contains non-finite values")

    xmin, xmax = float(x.min()), float(x.max())
    ymin = min(float(y.min()) for _, y in series)
    ymax = max(float(y.max()) for _, y in series)
    if xmax == xmin:
        xmin, xmax = xmin - 1.0, xmax + 1.0
    if ymax == ymin:
        ymin, ymax = ymin - 1.0, ymax + 1.0

    left, right, top, bottom = 64.0, 18.0, 18.0, 48.0
    plot_w = width - left - right
    plot_h = height - top - bottom

    def to_px(px, py):
        return (left + (px - xmin) / (xmax - xmin) * plot_w,
                top + (ymax - py) / (ymax - ymin) * plot_h)

    canvas = SvgCanvas(width, height)

    for tick in np.linspace(xmin, xmax, 5):
        tx, _ = to_px(tick, ymin)
        canvas.line(tx, top, tx, top + plot_h, _GRID_COLOR, 1.0)
        canvas.text(tx, top + plot_h + 16, _fmt(tick), size=11.0,
                    anchor="middle")
    for tick in np.linspace(ymin, ymax, 5):
        _, ty = to_px(xmin, tick)
        canvas.line(left, ty, left + plot_w, ty, _GRID_COLOR, 1.0)
        canvas.text(left - 6, ty + 4, _fmt(tick), size=11.0, anchor="end")

    canvas.line(left, top, left, top + plot_h, _AXIS_COLOR, 1.5)
    canvas.line(left, top + plot_h, left + plot_w, top + plot_h,
                _AXIS_COLOR, 1.5)
    if x_label:
        canvas.text(left + plot_w / 2, height - 10, x_label, size=13.0,
                    anchor="middle")
    if y_label:
        canvas.text(14, top - 4, y_label, size=13.0)

    for idx, (label, y) in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        canvas.polyline([to_px(px, py) for px, py in zip(x, y)], color, 2.0)

    legend_y = top + 14
    for idx, (label, _) in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        lx = left + plot_w - 170
        canvas.line(lx, legend_y, lx + 22, legend_y, color, 3.0)
        canvas.text(lx + 28, legend_y + 4, label, size=12.0)
        legend_y += 17.0

    return canvas.to_string()
