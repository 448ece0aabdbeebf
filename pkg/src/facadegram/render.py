"""SVG rendering of rect layouts."""

from __future__ import annotations

from .grammar import RectLayout, canonical_rect_order

DEFAULT_PALETTE = {
    "Wall": "#d8cfc0",
    "Window": "#3b6ea5",
    "Door": "#7a4a21",
    "Balcony": "#8c9e6e",
    "Shop": "#c76b4a",
}


def render_svg(layout: RectLayout, palette: dict[str, str] | None = None) -> str:
    """One <rect> per layout rect in canonical order, y-axis flipped so the
    layout's bottom-left origin maps to SVG's top-left convention."""
    colors = dict(DEFAULT_PALETTE)
    if palette:
        colors.update(palette)
    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 1 1" '
        'preserveAspectRatio="xMidYMid meet">'
    ]
    for r in canonical_rect_order(layout.rects):
        y_svg = 1.0 - (r.y + r.h)
        parts.append(
            f'<rect x="{r.x!r}" y="{y_svg!r}" width="{r.w!r}" height="{r.h!r}" '
            f'fill="{colors[r.label]}" data-label="{r.label}"/>'
        )
    parts.append("</svg>")
    return "".join(parts)
