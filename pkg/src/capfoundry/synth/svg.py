"""Minimal deterministic SVG builder.

Every numeric attribute goes through fmt(): fixed 6-decimal formatting, so
artifacts are byte-identical across platforms regardless of float repr.
"""

from __future__ import annotations

from xml.sax.saxutils import escape


def fmt(x: float) -> str:
    value = f"{float(x):.6f}"
    # -0.000000 and 0.000000 are the same coordinate; pick one spelling
    if value == "-0.000000":
        value = "0.000000"
    return value


def esc(text: str) -> str:
    return escape(text, {'"': "&quot;"})


class SvgDoc:
    def __init__(self, width: float, height: float):
        self.width = width
        self.height = height
        self._parts: list[str] = []

    def line(self, x1: float, y1: float, x2: float, y2: float, stroke: str = "black", stroke_width: float = 1.0) -> None:
        self._parts.append(
            f'<line x1="{fmt(x1)}" y1="{fmt(y1)}" x2="{fmt(x2)}" y2="{fmt(y2)}" '
            f'stroke="{stroke}" stroke-width="{fmt(stroke_width)}" />'
        )

    def rect(self, x: float, y: float, w: float, h: float, fill: str = "none", stroke: str = "black") -> None:
        self._parts.append(
            f'<rect x="{fmt(x)}" y="{fmt(y)}" width="{fmt(w)}" height="{fmt(h)}" '
            f'fill="{fill}" stroke="{stroke}" />'
        )

    def text(self, x: float, y: float, content: str, font_size: float = 14.0, anchor: str = "start") -> None:
        self._parts.append(
            f'<text x="{fmt(x)}" y="{fmt(y)}" font-family="monospace" '
            f'font-size="{fmt(font_size)}" text-anchor="{anchor}">{esc(content)}</text>'
        )

    def polyline(self, points: list[tuple[float, float]], stroke: str = "black", stroke_width: float = 1.5) -> None:
        coords = " ".join(f"{fmt(x)},{fmt(y)}" for x, y in points)
        self._parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{stroke}" '
            f'stroke-width="{fmt(stroke_width)}" />'
        )

    def circle(self, cx: float, cy: float, r: float, fill: str = "none", stroke: str = "black") -> None:
        self._parts.append(
            f'<circle cx="{fmt(cx)}" cy="{fmt(cy)}" r="{fmt(r)}" fill="{fill}" stroke="{stroke}" />'
        )

    def path(self, d: str, fill: str = "none", stroke: str = "black") -> None:
        self._parts.append(f'<path d="{d}" fill="{fill}" stroke="{stroke}" />')

    def to_string(self) -> str:
        body = "\n".join(f"  {part}" for part in self._parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{fmt(self.width)}" '
            f'height="{fmt(self.height)}" viewBox="0 0 {fmt(self.width)} {fmt(self.height)}">\n'
            f"{body}\n</svg>\n"
        )
