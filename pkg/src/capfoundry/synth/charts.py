"""Chart synthesis: bar, line, and pie SVGs with a markdown-table source.

Axis ticks come from nice_ticks (Heckbert nice numbers restricted to steps
of 1, 2, or 5 times a power of ten). Bars and lines share one value-to-pixel
affine map; the bar scale always passes through zero so value ratios equal
pixel-height ratios.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

from capfoundry.records import ImageDomain, SeedArtifact, content_digest
from capfoundry.synth.svg import SvgDoc, fmt
from capfoundry.synth.tables import SpecInvalid

PLOT_W = 400.0
PLOT_H = 260.0
MARGIN_LEFT = 60.0
MARGIN_RIGHT = 20.0
MARGIN_TOP = 40.0
MARGIN_BOTTOM = 50.0
PIE_RADIUS = 120.0

SERIES_COLORS = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377")

CHART_KINDS = ("bar", "line", "pie")


class DegenerateRange(ValueError):
    pass


def nice_ticks(lo: float, hi: float, target_count: int) -> list[float]:
    """Ticks with step in {1,2,5}x10^k spanning [lo, hi].

    Candidate steps come from the nice-number ladder around the rough step
    (hi-lo)/(target_count-1); the chosen step is the one whose tick count
    lands inside [target_count-2, target_count+3] and closest to target,
    smaller step breaking ties. Tick positions use integer multiples of the
    step so large offsets cannot cancel into a wrong count.
    """
    if lo == hi:
        raise DegenerateRange(f"min == max == {lo}")
    if lo > hi:
        raise ValueError("min must be < max")
    if not 2 <= target_count <= 12:
        raise ValueError("target_count must be in 2..12")
    rough = (hi - lo) / (target_count - 1)
    k0 = math.floor(math.log10(rough))
    best = None
    for k in range(k0 - 2, k0 + 3):
        for mantissa in (1.0, 2.0, 5.0):
            step = mantissa * (10.0 ** k)
            first_idx = math.floor(lo / step)
            last_idx = math.ceil(hi / step)
            count = last_idx - first_idx + 1
            in_window = target_count - 2 <= count <= target_count + 3
            key = (0 if in_window else 1, abs(count - target_count), step)
            if best is None or key < best[0]:
                best = (key, step, first_idx, count, k)
    _, step, first_idx, count, k = best
    decimals = max(0, -k + 1)
    return [round((first_idx + i) * step, decimals + 6) for i in range(count)]


@dataclass(frozen=True)
class ChartSpec:
    kind: str
    series: tuple[tuple[str, tuple[tuple[str, float], ...]], ...]
    title: str = ""
    x_label: str = ""
    y_label: str = ""

    def validate(self) -> None:
        if self.kind not in CHART_KINDS:
            raise SpecInvalid(f"kind: unknown {self.kind!r}")
        if not self.series:
            raise SpecInvalid("series: at least one required")
        x_labels = [x for x, _ in self.series[0][1]]
        if not x_labels:
            raise SpecInvalid("series[0]: no points")
        for s, (label, points) in enumerate(self.series):
            if [x for x, _ in points] != x_labels:
                raise SpecInvalid(f"series[{s}]: x-labels differ from series[0]")
            for x, value in points:
                if not math.isfinite(value):
                    raise SpecInvalid(f"series[{s}] point {x!r}: non-finite value")
        if self.kind == "pie":
            if len(self.series) != 1:
                raise SpecInvalid("pie: exactly one series required")
            values = [v for _, v in self.series[0][1]]
            if any(v < 0 for v in values):
                raise SpecInvalid("pie: negative value")
            if sum(values) <= 0:
                raise SpecInvalid("pie: values sum to zero")

    def x_labels(self) -> list[str]:
        return [x for x, _ in self.series[0][1]]

    def to_json_dict(self) -> dict:
        return {
            "kind": "chart",
            "chart_kind": self.kind,
            "series": [
                {"label": label, "points": [[x, v] for x, v in points]}
                for label, points in self.series
            ],
            "title": self.title,
            "x_label": self.x_label,
            "y_label": self.y_label,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ChartSpec":
        return cls(
            kind=obj["chart_kind"],
            series=tuple(
                (s["label"], tuple((p[0], float(p[1])) for p in s["points"]))
                for s in obj["series"]
            ),
            title=obj.get("title", ""),
            x_label=obj.get("x_label", ""),
            y_label=obj.get("y_label", ""),
        )


def _fmt_value(v: float) -> str:
    text = f"{v:.6f}".rstrip("0").rstrip(".")
    return text if text else "0"


def chart_to_markdown(spec: ChartSpec) -> str:
    x_header = spec.x_label if spec.x_label else "x"
    header = [x_header] + [label for label, _ in spec.series]
    lines = ["| " + " | ".join(h.replace("|", "\\|") for h in header) + " |"]
    lines.append("| " + " | ".join("---" for _ in header) + " |")
    for i, x in enumerate(spec.x_labels()):
        row = [x] + [_fmt_value(points[i][1]) for _, points in spec.series]
        lines.append("| " + " | ".join(c.replace("|", "\\|") for c in row) + " |")
    return "\n".join(lines)


def _value_range(spec: ChartSpec) -> tuple[float, float]:
    values = [v for _, points in spec.series for _, v in points]
    lo = min(values)
    hi = max(values)
    if spec.kind == "bar":
        lo = min(0.0, lo)  # bar scale passes through zero
        hi = max(0.0, hi)
    if lo == hi:
        hi = lo + 1.0
    return lo, hi


def chart_axes(spec: ChartSpec, target_count: int = 5) -> list[float]:
    lo, hi = _value_range(spec)
    return nice_ticks(lo, hi, target_count)


def _y_to_px(value: float, tick_lo: float, tick_hi: float) -> float:
    frac = (value - tick_lo) / (tick_hi - tick_lo)
    return MARGIN_TOP + PLOT_H - frac * PLOT_H


def chart_to_svg(spec: ChartSpec) -> str:
    width = MARGIN_LEFT + PLOT_W + MARGIN_RIGHT
    height = MARGIN_TOP + PLOT_H + MARGIN_BOTTOM
    doc = SvgDoc(width, height)
    doc.rect(0, 0, width, height, fill="white", stroke="none")
    if spec.title:
        doc.text(width / 2, MARGIN_TOP / 2, spec.title, font_size=16.0, anchor="middle")
    if spec.kind == "pie":
        _pie(doc, spec, width, height)
        return doc.to_string()

    ticks = chart_axes(spec)
    tick_lo, tick_hi = ticks[0], ticks[-1]
    doc.line(MARGIN_LEFT, MARGIN_TOP, MARGIN_LEFT, MARGIN_TOP + PLOT_H)
    doc.line(MARGIN_LEFT, MARGIN_TOP + PLOT_H, MARGIN_LEFT + PLOT_W, MARGIN_TOP + PLOT_H)
    for tick in ticks:
        y = _y_to_px(tick, tick_lo, tick_hi)
        doc.line(MARGIN_LEFT - 4, y, MARGIN_LEFT, y)
        doc.text(MARGIN_LEFT - 8, y + 4, _fmt_value(tick), font_size=11.0, anchor="end")
    labels = spec.x_labels()
    band = PLOT_W / len(labels)
    for i, label in enumerate(labels):
        doc.text(MARGIN_LEFT + band * (i + 0.5), MARGIN_TOP + PLOT_H + 18, label, font_size=11.0, anchor="middle")
    if spec.x_label:
        doc.text(MARGIN_LEFT + PLOT_W / 2, height - 10, spec.x_label, font_size=12.0, anchor="middle")
    if spec.y_label:
        doc.text(14, MARGIN_TOP - 10, spec.y_label, font_size=12.0, anchor="start")

    if spec.kind == "bar":
        n_series = len(spec.series)
        bar_total = band * 0.8  # 80% bars, 20% gap per band
        bar_w = bar_total / n_series
        zero_y = _y_to_px(0.0, tick_lo, tick_hi)
        for s, (label, points) in enumerate(spec.series):
            color = SERIES_COLORS[s % len(SERIES_COLORS)]
            for i, (_, value) in enumerate(points):
                x = MARGIN_LEFT + band * i + band * 0.1 + bar_w * s
                y = _y_to_px(value, tick_lo, tick_hi)
                top = min(y, zero_y)
                h = abs(zero_y - y)
                doc.rect(x, top, bar_w, h, fill=color, stroke="black")
    else:
        for s, (label, points) in enumerate(spec.series):
            color = SERIES_COLORS[s % len(SERIES_COLORS)]
            coords = [
                (MARGIN_LEFT + band * (i + 0.5), _y_to_px(value, tick_lo, tick_hi))
                for i, (_, value) in enumerate(points)
            ]
            doc.polyline(coords, stroke=color)
            for cx, cy in coords:
                doc.circle(cx, cy, 3.0, fill=color, stroke="none")
    return doc.to_string()


def _pie(doc: SvgDoc, spec: ChartSpec, width: float, height: float) -> None:
    cx = width / 2
    cy = MARGIN_TOP + PLOT_H / 2
    points = spec.series[0][1]
    total = sum(v for _, v in points)
    # arcs start at 12 o'clock and sweep clockwise
    angle = -math.pi / 2
    for i, (label, value) in enumerate(points):
        if value == 0:
            continue
        sweep = 2 * math.pi * (value / total)
        x1 = cx + PIE_RADIUS * math.cos(angle)
        y1 = cy + PIE_RADIUS * math.sin(angle)
        angle_end = angle + sweep
        x2 = cx + PIE_RADIUS * math.cos(angle_end)
        y2 = cy + PIE_RADIUS * math.sin(angle_end)
        large = 1 if sweep > math.pi else 0
        color = SERIES_COLORS[i % len(SERIES_COLORS)]
        if abs(sweep - 2 * math.pi) < 1e-12:
            doc.circle(cx, cy, PIE_RADIUS, fill=color)
        else:
            doc.path(
                f"M {fmt(cx)} {fmt(cy)} L {fmt(x1)} {fmt(y1)} "
                f"A {fmt(PIE_RADIUS)} {fmt(PIE_RADIUS)} 0 {large} 1 {fmt(x2)} {fmt(y2)} Z",
                fill=color,
                stroke="black",
            )
        mid = angle + sweep / 2
        lx = cx + (PIE_RADIUS + 16) * math.cos(mid)
        ly = cy + (PIE_RADIUS + 16) * math.sin(mid)
        doc.text(lx, ly, label, font_size=11.0, anchor="middle")
        angle = angle_end


def gen_chart(spec: ChartSpec, rng_seed: int = 0, preamble: Optional[str] = None) -> SeedArtifact:
    spec.validate()
    if preamble is None:
        from capfoundry.prompts import get_seed_template

        preamble = get_seed_template(ImageDomain.CHART).body.strip()
    markdown = chart_to_markdown(spec)
    title_note = f' titled "{spec.title}"' if spec.title else ""
    axis_note = ""
    if spec.x_label or spec.y_label:
        axis_note = f" The x axis is {spec.x_label or 'unlabeled'}; the y axis is {spec.y_label or 'unlabeled'}."
    description = (
        f"{preamble}\n"
        f"This is a {spec.kind} chart{title_note} with {len(spec.series)} series "
        f"over {len(spec.x_labels())} categories.{axis_note}\n"
        f"Markdown source:\n{markdown}"
    )
    return SeedArtifact(
        domain=ImageDomain.CHART,
        spec_digest=content_digest(
            json.dumps(spec.to_json_dict(), sort_keys=True, ensure_ascii=False).encode("utf-8")
        ),
        image=chart_to_svg(spec),
        source_code=markdown,
        seed_description=description,
        rng_seed=rng_seed,
        markdown=markdown,
    )
