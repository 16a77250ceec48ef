"""Plain SVG scatter plots: generated points over real-data contours."""
from __future__ import annotations

from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .scenarios import LabeledDataset

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ellipse(mean, cov, k: float, to_px, scale: float, color: str) -> str:
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    angle = np.degrees(np.arctan2(vecs[1, 1], vecs[0, 1]))
    cx, cy = to_px(mean)
    rx, ry = k * np.sqrt(vals[1]) * scale, k * np.sqrt(vals[0]) * scale
    # y is flipped on screen, so the rotation flips too
    return (
        f'<ellipse cx="{cx:.2f}" cy="{cy:.2f}" rx="{rx:.2f}" ry="{ry:.2f}" '
        f'transform="rotate({-angle:.2f} {cx:.2f} {cy:.2f})" fill="none" stroke="{color}" stroke-opacity="0.6"/>'
    )


def scatter_svg(
    points: np.ndarray,
    real: Optional[LabeledDataset] = None,
    class_names: Optional[Sequence[str]] = None,
    title: str = "",
    size: int = 480,
) -> str:
    """Return an SVG document with one ``<circle>`` per generated point.

    When ``real`` is given each class is drawn as 1- and 2-sigma ellipses of
    its fitted Gaussian.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != 2:
        raise ValueError("scatter plots need 2-D points")
    everything = points if real is None else np.concatenate([points, real.points])
    lo, hi = everything.min(axis=0), everything.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    pad = 0.08 * span
    lo, span = lo - pad, span + 2 * pad
    scale = size / span

    def to_px(p):
        return (p[0] - lo[0]) * scale, size - (p[1] - lo[1]) * scale

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if title:
        out.append(f'<title>{escape(title)}</title>')
    if real is not None:
        out.append('<g id="contours">')
        for k in sorted(set(real.labels.tolist())):
            pts = real.of_class(k).points
            if len(pts) < 3:
                continue
            color = PALETTE[k % len(PALETTE)]
            mean, cov = pts.mean(axis=0), np.cov(pts, rowvar=False)
            for sigma in (1.0, 2.0):
                out.append(_ellipse(mean, cov, sigma, to_px, scale, color))
            if class_names is not None:
                x, y = to_px(mean)
                out.append(f'<text x="{x:.2f}" y="{y:.2f}" font-size="11" fill="{color}">{escape(class_names[k])}</text>')
        out.append("</g>")
    out.append('<g id="samples">')
    for p in points:
        x, y = to_px(p)
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="black" fill-opacity="0.7"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
