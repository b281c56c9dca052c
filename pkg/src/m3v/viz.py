"""Trajectory overlays: per-anchor-frame PPM renders and one combined SVG.

Trajectories are drawn as polylines colored dark to light across steps;
invalid trajectories are dashed.
"""

import numpy as np

DARK = (40, 24, 96)
LIGHT = (120, 255, 160)


def _step_color(i, steps):
    t = i / max(steps - 1, 1)
    return tuple(int(round(d + t * (l - d))) for d, l in zip(DARK, LIGHT))


def draw_line(image, p0, p1, color, dashed=False):
    """Bresenham line on an (H, W, 3) uint8 image, clipped to bounds."""
    h, w = image.shape[:2]
    x0, y0 = int(round(p0[0])), int(round(p0[1]))
    x1, y1 = int(round(p1[0])), int(round(p1[1]))
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    k = 0
    while True:
        if (not dashed or (k // 2) % 2 == 0) and 0 <= x0 < w and 0 <= y0 < h:
            image[y0, x0] = color
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy
        k += 1


def render_frame_overlay(plane, trajectories):
    """Gray plane + trajectory polylines -> (H, W, 3) uint8 image."""
    gray = np.clip(np.round(plane), 0, 255).astype(np.uint8)
    image = np.stack([gray] * 3, axis=-1)
    for traj in trajectories:
        pts = traj.points
        for i in range(len(pts) - 1):
            draw_line(image, pts[i], pts[i + 1], _step_color(i, len(pts) - 1),
                      dashed=not traj.valid)
    return image


def trajectories_svg(pack, background_note=""):
    """Single SVG with every trajectory of the pack, dark-to-light strokes."""
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{pack.width}" height="{pack.height}" '
        f'viewBox="0 0 {pack.width} {pack.height}">',
        f'<rect width="{pack.width}" height="{pack.height}" fill="#101010"/>',
    ]
    if background_note:
        lines.append(f"<!-- {background_note} -->")
    for anchor, traj in zip(pack.anchors, pack.trajectories):
        pts = traj.points
        dash = ' stroke-dasharray="2,2"' if not traj.valid else ""
        for i in range(len(pts) - 1):
            r, g, b = _step_color(i, len(pts) - 1)
            lines.append(
                f'<line x1="{pts[i][0]:.2f}" y1="{pts[i][1]:.2f}" '
                f'x2="{pts[i + 1][0]:.2f}" y2="{pts[i + 1][1]:.2f}" '
                f'stroke="rgb({r},{g},{b})" stroke-width="0.6"{dash}>'
                f"<title>anchor {anchor}</title></line>"
            )
    lines.append("</svg>")
    return "\n".join(lines)
