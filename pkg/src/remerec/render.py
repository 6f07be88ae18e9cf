"""SVG overlays of predicted boxes and relation arrows."""
from __future__ import annotations

import base64
import io
from xml.sax.saxutils import escape

import numpy as np
from PIL import Image

from .boxes import as_pixel_corners

PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4")
ARROW = "#ffd700"


def _png_data_uri(image: np.ndarray) -> str:
    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()


def box_centers(boxes_cxcywh, width: int, height: int) -> np.ndarray:
    b = np.asarray(boxes_cxcywh, dtype=np.float64).reshape(-1, 4)
    return np.stack([b[:, 0] * width, b[:, 1] * height], axis=1)


def svg_overlay(image: np.ndarray, boxes_cxcywh, relations, caption: str = "", scale: int = 4) -> str:
    """SVG with the raster underneath, one rectangle per box and an arrow from
    each relation's source centre to its target centre. Geometry is in the
    raster's pixel coordinates; ``scale`` only sets the display size."""
    _, h, w = np.asarray(image).shape
    corners = as_pixel_corners(boxes_cxcywh, w, h)
    centers = box_centers(boxes_cxcywh, w, h)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * scale}" height="{h * scale}" viewBox="0 0 {w} {h}">',
        "<defs>",
        '<marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="4" markerHeight="4" orient="auto">',
        f'<path d="M0,0 L10,5 L0,10 z" fill="{ARROW}"/>',
        "</marker>",
        "</defs>",
    ]
    if caption:
        out.append(f"<title>{escape(caption)}</title>")
    out.append(f'<image x="0" y="0" width="{w}" height="{h}" href="{_png_data_uri(image)}" style="image-rendering:pixelated"/>')
    for k, (x0, y0, x1, y1) in enumerate(corners):
        color = PALETTE[k % len(PALETTE)]
        out.append(
            f'<rect class="box" data-index="{k}" x="{x0:.2f}" y="{y0:.2f}" width="{x1 - x0:.2f}" height="{y1 - y0:.2f}" '
            f'fill="none" stroke="{color}" stroke-width="0.6"/>'
        )
    for i, j in sorted(relations):
        (sx, sy), (tx, ty) = centers[i], centers[j]
        out.append(
            f'<line class="relation" data-source="{i}" data-target="{j}" x1="{sx:.2f}" y1="{sy:.2f}" '
            f'x2="{tx:.2f}" y2="{ty:.2f}" stroke="{ARROW}" stroke-width="0.6" marker-end="url(#arrow)"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
