"""Geometry synthesis: scene of points/segments/circles/angle-marks on a
512x512 canvas, with a seed description that asserts only relations passing
a numeric incidence test. Nothing unverified is ever written, which is the
whole point of the code-rule path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

from capfoundry.records import ImageDomain, SeedArtifact, content_digest
from capfoundry.synth.svg import SvgDoc
from capfoundry.synth.tables import SpecInvalid

CANVAS = 512.0
ON_CIRCLE_REL_TOL = 1e-6
COLLINEAR_TOL = 1e-6


@dataclass(frozen=True)
class Point:
    name: str
    x: float
    y: float


@dataclass(frozen=True)
class Segment:
    a: str
    b: str


@dataclass(frozen=True)
class Circle:
    center: str
    radius: float


@dataclass(frozen=True)
class AngleMark:
    vertex: str
    ray_a: str
    ray_b: str


@dataclass(frozen=True)
class GeometryScene:
    points: tuple[Point, ...]
    segments: tuple[Segment, ...] = ()
    circles: tuple[Circle, ...] = ()
    angle_marks: tuple[AngleMark, ...] = ()

    def validate(self) -> None:
        names = [p.name for p in self.points]
        if len(set(names)) != len(names):
            raise SpecInvalid("points: duplicate names")
        for p in self.points:
            if not (len(p.name) == 1 and p.name.isalpha() and p.name.isupper()):
                raise SpecInvalid(f"points: name {p.name!r} is not a single capital letter")
            if not (-CANVAS / 2 <= p.x <= CANVAS / 2 and -CANVAS / 2 <= p.y <= CANVAS / 2):
                raise SpecInvalid(f"points: {p.name} outside canvas")
        known = set(names)
        for seg in self.segments:
            for end in (seg.a, seg.b):
                if end not in known:
                    raise SpecInvalid(f"segments: unknown point {end!r}")
            if seg.a == seg.b:
                raise SpecInvalid(f"segments: degenerate {seg.a}{seg.b}")
        for circle in self.circles:
            if circle.center not in known:
                raise SpecInvalid(f"circles: unknown center {circle.center!r}")
            if circle.radius <= 0:
                raise SpecInvalid(f"circles: radius {circle.radius} not positive")
        for mark in self.angle_marks:
            for name in (mark.vertex, mark.ray_a, mark.ray_b):
                if name not in known:
                    raise SpecInvalid(f"angle_marks: unknown point {name!r}")

    def point(self, name: str) -> Point:
        for p in self.points:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_json_dict(self) -> dict:
        return {
            "kind": "geometry",
            "points": [[p.name, p.x, p.y] for p in self.points],
            "segments": [[s.a, s.b] for s in self.segments],
            "circles": [[c.center, c.radius] for c in self.circles],
            "angle_marks": [[m.vertex, m.ray_a, m.ray_b] for m in self.angle_marks],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "GeometryScene":
        return cls(
            points=tuple(Point(n, float(x), float(y)) for n, x, y in obj["points"]),
            segments=tuple(Segment(a, b) for a, b in obj.get("segments", [])),
            circles=tuple(Circle(c, float(r)) for c, r in obj.get("circles", [])),
            angle_marks=tuple(AngleMark(v, a, b) for v, a, b in obj.get("angle_marks", [])),
        )


def dist(p: Point, q: Point) -> float:
    return math.hypot(p.x - q.x, p.y - q.y)


def is_on_circle(p: Point, center: Point, radius: float) -> bool:
    return abs(dist(p, center) - radius) <= ON_CIRCLE_REL_TOL * radius


def is_between(p: Point, a: Point, b: Point) -> bool:
    """p lies on segment ab: triangle inequality becomes equality."""
    ab = dist(a, b)
    if ab == 0:
        return False
    return abs(dist(a, p) + dist(p, b) - ab) <= COLLINEAR_TOL * ab


def _coord(v: float) -> str:
    text = f"{v:.6f}".rstrip("0").rstrip(".")
    return text if text not in ("", "-0") else "0"


def scene_source(scene: GeometryScene) -> str:
    """Declarative scene text: one element per line, canonical order."""
    lines = []
    for p in scene.points:
        lines.append(f"point {p.name} {_coord(p.x)} {_coord(p.y)}")
    for c in scene.circles:
        lines.append(f"circle {c.center} {_coord(c.radius)}")
    for s in scene.segments:
        lines.append(f"segment {s.a} {s.b}")
    for m in scene.angle_marks:
        lines.append(f"angle {m.vertex} {m.ray_a} {m.ray_b}")
    return "\n".join(lines)


def parse_scene_source(text: str) -> GeometryScene:
    points, segments, circles, marks = [], [], [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "point":
            points.append(Point(parts[1], float(parts[2]), float(parts[3])))
        elif parts[0] == "circle":
            circles.append(Circle(parts[1], float(parts[2])))
        elif parts[0] == "segment":
            segments.append(Segment(parts[1], parts[2]))
        elif parts[0] == "angle":
            marks.append(AngleMark(parts[1], parts[2], parts[3]))
        else:
            raise SpecInvalid(f"scene source: unknown element {parts[0]!r}")
    return GeometryScene(tuple(points), tuple(segments), tuple(circles), tuple(marks))


@dataclass(frozen=True)
class Relation:
    """A numerically verified incidence fact, with its rendered sentence."""
    kind: str
    sentence: str


def derive_relations(scene: GeometryScene) -> list[Relation]:
    """Canonical order: circles, then segments, then angle-marks. Every
    relation here has passed its numeric test; nothing else is derivable."""
    relations: list[Relation] = []
    for circle in scene.circles:
        center = scene.point(circle.center)
        on_circle = [
            p.name for p in scene.points
            if p.name != circle.center and is_on_circle(p, center, circle.radius)
        ]
        for name in on_circle:
            relations.append(Relation(
                "point_on_circle",
                f"Point {name} lies on circle {circle.center}.",
            ))
        for seg in scene.segments:
            a = scene.point(seg.a)
            b = scene.point(seg.b)
            through_center = is_between(center, a, b)
            a_on = seg.a in on_circle
            b_on = seg.b in on_circle
            if a_on and b_on and through_center:
                relations.append(Relation(
                    "diameter",
                    f"{seg.a}{seg.b} is a diameter of circle {circle.center}.",
                ))
            elif a_on and b_on:
                relations.append(Relation(
                    "chord",
                    f"{seg.a}{seg.b} is a chord of circle {circle.center}.",
                ))
            elif through_center:
                relations.append(Relation(
                    "through_center",
                    f"Segment {seg.a}{seg.b} passes through {circle.center}.",
                ))
    return relations


def scene_to_svg(scene: GeometryScene) -> str:
    doc = SvgDoc(CANVAS, CANVAS)
    doc.rect(0, 0, CANVAS, CANVAS, fill="white", stroke="none")

    def to_px(p: Point) -> tuple[float, float]:
        return (p.x + CANVAS / 2, CANVAS / 2 - p.y)

    for circle in scene.circles:
        cx, cy = to_px(scene.point(circle.center))
        doc.circle(cx, cy, circle.radius)
    for seg in scene.segments:
        x1, y1 = to_px(scene.point(seg.a))
        x2, y2 = to_px(scene.point(seg.b))
        doc.line(x1, y1, x2, y2)
    for mark in scene.angle_marks:
        v = scene.point(mark.vertex)
        a = scene.point(mark.ray_a)
        b = scene.point(mark.ray_b)
        vx, vy = to_px(v)
        for target in (a, b):
            angle = math.atan2(-(target.y - v.y), target.x - v.x)
            doc.line(vx, vy, vx + 18 * math.cos(angle), vy + 18 * math.sin(angle), stroke_width=1.0)
    for p in scene.points:
        px, py = to_px(p)
        doc.circle(px, py, 2.5, fill="black")
        doc.text(px + 5, py - 5, p.name, font_size=13.0)
    return doc.to_string()


def describe_scene(scene: GeometryScene) -> tuple[str, list[Relation]]:
    lines = []
    for circle in scene.circles:
        center = scene.point(circle.center)
        lines.append(
            f"Circle {circle.center} has center {circle.center}({_coord(center.x)}, "
            f"{_coord(center.y)}) and radius {_coord(circle.radius)}."
        )
    for seg in scene.segments:
        a = scene.point(seg.a)
        b = scene.point(seg.b)
        lines.append(
            f"Segment {seg.a}{seg.b} connects {seg.a}({_coord(a.x)}, {_coord(a.y)}) "
            f"and {seg.b}({_coord(b.x)}, {_coord(b.y)})."
        )
    for mark in scene.angle_marks:
        lines.append(
            f"An angle is marked at {mark.vertex} between rays {mark.vertex}{mark.ray_a} "
            f"and {mark.vertex}{mark.ray_b}."
        )
    relations = derive_relations(scene)
    lines.extend(r.sentence for r in relations)
    return "\n".join(lines), relations


def gen_geometry(scene: GeometryScene, rng_seed: int = 0, preamble: Optional[str] = None) -> SeedArtifact:
    scene.validate()
    if preamble is None:
        from capfoundry.prompts import get_seed_template

        preamble = get_seed_template(ImageDomain.GEOMETRY).body.strip()
    source = scene_source(scene)
    element_text, _ = describe_scene(scene)
    description = f"{preamble}\n{element_text}\nScene source:\n{source}"
    return SeedArtifact(
        domain=ImageDomain.GEOMETRY,
        spec_digest=content_digest(
            json.dumps(scene.to_json_dict(), sort_keys=True, ensure_ascii=False).encode("utf-8")
        ),
        image=scene_to_svg(scene),
        source_code=source,
        seed_description=description,
        rng_seed=rng_seed,
    )
