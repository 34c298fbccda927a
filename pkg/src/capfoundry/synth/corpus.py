"""Seeded spec samplers and batch corpus generation.

Samplers draw from a caller-supplied random.Random so a corpus is a pure
function of (seed, counts). Cell text is restricted to an alphabet that the
markdown round-trip parser can never misread: every cell contains at least
one alphanumeric character, so no cell is separator-shaped, and edge
whitespace is never generated.
"""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import dataclass
from typing import Mapping, Optional, Union

from capfoundry.records import CODE_RULE, ImageDomain, SeedArtifact
from capfoundry.synth.charts import CHART_KINDS, ChartSpec, gen_chart
from capfoundry.synth.equations import (
    Binary,
    EquationAst,
    Frac,
    Number,
    Pow,
    Sqrt,
    Sub,
    SumLimits,
    Symbol,
    ast_from_json_dict,
    render_equation,
)
from capfoundry.synth.geometry import (
    AngleMark,
    Circle,
    GeometryScene,
    Point,
    Segment,
    gen_geometry,
)
from capfoundry.synth.tables import ALIGNMENTS, SpecInvalid, TableSpec, gen_table

_WORDS = (
    "alpha", "beta", "gamma", "delta", "total", "mean", "north", "south",
    "east", "west", "red", "blue", "green", "index", "score", "rate",
    "count", "item", "group", "phase",
)

_MONTHS = ("Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug")


def _word(rng: random.Random) -> str:
    return rng.choice(_WORDS)


def _cell_text(rng: random.Random) -> str:
    """Cell content safe for markdown round-trip; exercises escapes rarely."""
    roll = rng.random()
    if roll < 0.35:
        return _word(rng)
    if roll < 0.60:
        return str(rng.randrange(0, 1000))
    if roll < 0.75:
        return f"{rng.uniform(0, 100):.1f}"
    if roll < 0.85:
        return f"{_word(rng)} {rng.randrange(0, 100)}"
    if roll < 0.92:
        return f"{_word(rng)}|{rng.randrange(0, 10)}"  # escaped pipe
    return f"{_word(rng)}\\{rng.randrange(0, 10)}"  # escaped backslash


def sample_table_spec(rng: random.Random) -> TableSpec:
    n_rows = rng.randint(1, 6)
    n_cols = rng.randint(1, 4)
    return TableSpec(
        n_rows=n_rows,
        n_cols=n_cols,
        header=rng.random() < 0.6 and n_rows >= 2,
        alignments=tuple(rng.choice(ALIGNMENTS) for _ in range(n_cols)),
        cells=tuple(
            tuple(_cell_text(rng) for _ in range(n_cols)) for _ in range(n_rows)
        ),
        caption_text=_word(rng) if rng.random() < 0.3 else None,
    )


_SYMBOLS = "abcxyznmk"


def _sample_leaf(rng: random.Random) -> EquationAst:
    if rng.random() < 0.5:
        if rng.random() < 0.8:
            return Number(str(rng.randrange(0, 100)))
        return Number(f"{rng.randrange(0, 10)}.{rng.randrange(0, 10)}")
    return Symbol(rng.choice(_SYMBOLS))


def _sample_expr(rng: random.Random, budget: int) -> EquationAst:
    if budget <= 1:
        return _sample_leaf(rng)
    roll = rng.random()
    if roll < 0.30:
        return _sample_leaf(rng)
    if roll < 0.58:
        op = rng.choice(("+", "−", "×"))
        return Binary(op, _sample_expr(rng, budget - 1), _sample_expr(rng, budget - 1))
    if roll < 0.72:
        return Frac(_sample_expr(rng, budget - 1), _sample_expr(rng, budget - 1))
    if roll < 0.84:
        return Pow(_sample_expr(rng, budget - 1), _sample_leaf(rng))
    if roll < 0.90:
        return Sub(Symbol(rng.choice(_SYMBOLS)), _sample_leaf(rng))
    if roll < 0.96:
        return Sqrt(_sample_expr(rng, budget - 1))
    return SumLimits(
        Sub(Symbol("i"), Number("1")),
        _sample_leaf(rng),
        _sample_expr(rng, budget - 1),
    )


def sample_equation_ast(rng: random.Random) -> EquationAst:
    budget = rng.randint(2, 5)
    if rng.random() < 0.6:
        return Binary("=", _sample_expr(rng, budget), _sample_expr(rng, budget))
    return _sample_expr(rng, budget)


def sample_chart_spec(rng: random.Random) -> ChartSpec:
    kind = rng.choice(CHART_KINDS)
    n_points = rng.randint(2, 6)
    if rng.random() < 0.5:
        xs = list(_MONTHS[:n_points])
    else:
        xs = [f"{_word(rng)}{i}" for i in range(1, n_points + 1)]
    if kind == "pie":
        n_series = 1
    else:
        n_series = rng.randint(1, 3)
    series = []
    for _ in range(n_series):
        if kind == "pie":
            values = [round(rng.uniform(0.5, 40.0), 1) for _ in xs]
        else:
            values = [round(rng.uniform(-50.0, 120.0), 1) for _ in xs]
        series.append((_word(rng), tuple(zip(xs, values))))
    return ChartSpec(
        kind=kind,
        series=tuple(series),
        title=f"{_word(rng)} {_word(rng)}",
        x_label=_word(rng),
        y_label=_word(rng),
    )


_POINT_NAMES = "ABCDEFGHJKLMNP"  # I and O skipped; O is the circle center


def _round6(v: float) -> float:
    # Matches scene_source's 6-decimal coordinate precision, so a sampled
    # scene and its parsed-back form verify the same relations.
    return round(v, 6)


def sample_geometry_scene(rng: random.Random) -> GeometryScene:
    points: list[Point] = []
    segments: list[Segment] = []
    circles: list[Circle] = []
    marks: list[AngleMark] = []
    names = iter(_POINT_NAMES)

    if rng.random() < 0.8:
        cx = float(rng.randint(-40, 40))
        cy = float(rng.randint(-40, 40))
        radius = float(rng.randint(60, 200))
        points.append(Point("O", cx, cy))
        circles.append(Circle("O", radius))
        angles = rng.sample(range(0, 24), rng.randint(2, 4))
        on_circle = []
        for step in angles:
            theta = step * math.pi / 12
            name = next(names)
            p = Point(
                name,
                _round6(cx + radius * math.cos(theta)),
                _round6(cy + radius * math.sin(theta)),
            )
            points.append(p)
            on_circle.append(p)
        if rng.random() < 0.6:
            # Antipodal pair: an exact diameter up to coordinate rounding.
            theta = rng.randrange(0, 24) * math.pi / 12
            pa = Point(
                next(names),
                _round6(cx + radius * math.cos(theta)),
                _round6(cy + radius * math.sin(theta)),
            )
            pb = Point(
                next(names),
                _round6(cx - radius * math.cos(theta)),
                _round6(cy - radius * math.sin(theta)),
            )
            points.extend([pa, pb])
            segments.append(Segment(pa.name, pb.name))
            on_circle.extend([pa, pb])
        for _ in range(rng.randint(0, 2)):
            a, b = rng.sample(on_circle, 2)
            seg = Segment(a.name, b.name)
            if not any({s.a, s.b} == {seg.a, seg.b} for s in segments):
                segments.append(seg)
        if rng.random() < 0.4 and on_circle:
            spoke = rng.choice(on_circle)
            segments.append(Segment("O", spoke.name))
    else:
        for _ in range(rng.randint(3, 5)):
            points.append(
                Point(
                    next(names),
                    float(rng.randint(-250, 250)),
                    float(rng.randint(-250, 250)),
                )
            )
        ring = [p.name for p in points]
        for i in range(len(ring)):
            segments.append(Segment(ring[i], ring[(i + 1) % len(ring)]))

    if rng.random() < 0.5:
        points.append(
            Point(next(names), float(rng.randint(-250, 250)), float(rng.randint(-250, 250)))
        )

    # Mark an angle where two segments share a vertex.
    by_vertex: dict[str, list[str]] = {}
    for seg in segments:
        by_vertex.setdefault(seg.a, []).append(seg.b)
        by_vertex.setdefault(seg.b, []).append(seg.a)
    candidates = sorted(v for v, others in by_vertex.items() if len(set(others)) >= 2)
    if candidates and rng.random() < 0.5:
        vertex = rng.choice(candidates)
        ray_a, ray_b = sorted(set(by_vertex[vertex]))[:2]
        marks.append(AngleMark(vertex, ray_a, ray_b))

    scene = GeometryScene(
        points=tuple(points),
        segments=tuple(segments),
        circles=tuple(circles),
        angle_marks=tuple(marks),
    )
    scene.validate()
    return scene


SpecObject = Union[TableSpec, ChartSpec, EquationAst, GeometryScene]

_DOMAIN_ORDER = (
    ImageDomain.TABLE,
    ImageDomain.CHART,
    ImageDomain.EQUATION,
    ImageDomain.GEOMETRY,
)

_SAMPLERS = {
    ImageDomain.TABLE: sample_table_spec,
    ImageDomain.CHART: sample_chart_spec,
    ImageDomain.EQUATION: sample_equation_ast,
    ImageDomain.GEOMETRY: sample_geometry_scene,
}


def sample_spec(domain: ImageDomain, rng: random.Random) -> SpecObject:
    if domain not in _SAMPLERS:
        raise SpecInvalid(f"domain: {domain.value} is not a code-rule domain")
    return _SAMPLERS[domain](rng)


def artifact_for_spec(spec: SpecObject, rng_seed: int = 0) -> SeedArtifact:
    if isinstance(spec, TableSpec):
        return gen_table(spec, rng_seed=rng_seed)
    if isinstance(spec, ChartSpec):
        return gen_chart(spec, rng_seed=rng_seed)
    if isinstance(spec, GeometryScene):
        return gen_geometry(spec, rng_seed=rng_seed)
    return render_equation(spec, rng_seed=rng_seed)


def spec_to_json_dict(spec: SpecObject) -> dict:
    if isinstance(spec, (TableSpec, ChartSpec, GeometryScene)):
        return spec.to_json_dict()
    from capfoundry.synth.equations import ast_to_json_dict

    return {"kind": "equation", "ast": ast_to_json_dict(spec)}


def artifact_from_spec_obj(obj: dict, rng_seed: int = 0) -> SeedArtifact:
    """Rebuild the artifact for a stored spec JSON object ("kind" dispatch)."""
    kind = obj.get("kind")
    if kind == "table":
        return gen_table(TableSpec.from_json_dict(obj), rng_seed=rng_seed)
    if kind == "chart":
        return gen_chart(ChartSpec.from_json_dict(obj), rng_seed=rng_seed)
    if kind == "equation":
        return render_equation(ast_from_json_dict(obj["ast"]), rng_seed=rng_seed)
    if kind == "geometry":
        return gen_geometry(GeometryScene.from_json_dict(obj), rng_seed=rng_seed)
    raise SpecInvalid(f"kind: unknown {kind!r}")


@dataclass(frozen=True)
class CorpusItem:
    domain: ImageDomain
    spec_digest: str
    spec_path: str  # relative to the corpus root
    svg_path: str


def generate_corpus(
    out_dir: str,
    counts: Mapping[ImageDomain, int],
    seed: int = 0,
    manifest_name: str = "manifest.jsonl",
) -> list[CorpusItem]:
    """Sample, render and write a corpus; returns items in manifest order.

    Per-item RNG is seeded from (seed, domain, index) as a string, which
    random.Random hashes stably, so any single item can be regenerated
    without replaying the stream. Duplicate specs (same digest) are skipped
    and resampled, bounded at 4x the requested count.
    """
    for domain, count in counts.items():
        if count < 0:
            raise SpecInvalid(f"counts[{domain.value}]: negative")
        if count and domain not in CODE_RULE:
            raise SpecInvalid(f"counts[{domain.value}]: not a code-rule domain")
    os.makedirs(out_dir, exist_ok=True)
    items: list[CorpusItem] = []
    for domain in _DOMAIN_ORDER:
        count = counts.get(domain, 0)
        seen: set[str] = set()
        attempts = 0
        while len(seen) < count and attempts < count * 4:
            rng = random.Random(f"{seed}:{domain.value}:{attempts}")
            attempts += 1
            spec = sample_spec(domain, rng)
            artifact = artifact_for_spec(spec, rng_seed=seed)
            if artifact.spec_digest in seen:
                continue
            seen.add(artifact.spec_digest)
            stem = os.path.join(domain.value, artifact.spec_digest[:12])
            spec_path = stem + ".json"
            svg_path = stem + ".svg"
            os.makedirs(os.path.join(out_dir, domain.value), exist_ok=True)
            with open(os.path.join(out_dir, spec_path), "w", encoding="utf-8") as fh:
                json.dump(spec_to_json_dict(spec), fh, sort_keys=True, indent=2)
                fh.write("\n")
            with open(os.path.join(out_dir, svg_path), "w", encoding="utf-8") as fh:
                fh.write(artifact.image)
            items.append(
                CorpusItem(
                    domain=domain,
                    spec_digest=artifact.spec_digest,
                    spec_path=spec_path,
                    svg_path=svg_path,
                )
            )
    manifest_path = os.path.join(out_dir, manifest_name)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for item in items:
            row = {
                "spec_digest": item.spec_digest,
                "paths": {"spec": item.spec_path, "svg": item.svg_path},
                "domain": item.domain.value,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return items


def load_corpus_manifest(path: str) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
