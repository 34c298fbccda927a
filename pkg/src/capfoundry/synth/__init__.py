"""Structured-image synthesis: exact source representations rendered to SVG.

Four code-rule domains (table, chart, equation, geometry) each pair a spec
type with a gen_* function returning a SeedArtifact whose seed_description
embeds the source representation verbatim. Everything here is a pure
function of (spec, rng_seed); byte-identical output is a contract, not an
accident.
"""

from capfoundry.synth.charts import (
    CHART_KINDS,
    ChartSpec,
    DegenerateRange,
    chart_axes,
    chart_to_markdown,
    chart_to_svg,
    gen_chart,
    nice_ticks,
)
from capfoundry.synth.corpus import (
    CorpusItem,
    artifact_from_spec_obj,
    generate_corpus,
    sample_chart_spec,
    sample_equation_ast,
    sample_geometry_scene,
    sample_table_spec,
)
from capfoundry.synth.equations import (
    AstInvalid,
    Binary,
    DepthExceeded,
    EquationAst,
    Frac,
    Number,
    Pow,
    SumLimits,
    Sqrt,
    Sub,
    Symbol,
    ast_from_json_dict,
    ast_to_json_dict,
    ast_to_latex,
    equation_to_svg,
    layout_equation,
    render_equation,
)
from capfoundry.synth.geometry import (
    AngleMark,
    Circle,
    GeometryScene,
    Point,
    Segment,
    derive_relations,
    describe_scene,
    gen_geometry,
    parse_scene_source,
    scene_source,
    scene_to_svg,
)
from capfoundry.synth.tables import (
    ALIGNMENTS,
    SpecInvalid,
    TableSpec,
    gen_table,
    parse_markdown_table,
    table_to_latex,
    table_to_markdown,
    table_to_svg,
)

__all__ = [
    "ALIGNMENTS",
    "AngleMark",
    "AstInvalid",
    "Binary",
    "CHART_KINDS",
    "ChartSpec",
    "Circle",
    "CorpusItem",
    "DegenerateRange",
    "DepthExceeded",
    "EquationAst",
    "Frac",
    "GeometryScene",
    "Number",
    "Point",
    "Pow",
    "Segment",
    "SpecInvalid",
    "Sqrt",
    "Sub",
    "SumLimits",
    "Symbol",
    "TableSpec",
    "artifact_from_spec_obj",
    "ast_from_json_dict",
    "ast_to_json_dict",
    "ast_to_latex",
    "chart_axes",
    "chart_to_markdown",
    "chart_to_svg",
    "derive_relations",
    "describe_scene",
    "equation_to_svg",
    "gen_chart",
    "gen_geometry",
    "gen_table",
    "generate_corpus",
    "layout_equation",
    "nice_ticks",
    "parse_markdown_table",
    "parse_scene_source",
    "render_equation",
    "sample_chart_spec",
    "sample_equation_ast",
    "sample_geometry_scene",
    "sample_table_spec",
    "scene_source",
    "scene_to_svg",
    "table_to_latex",
    "table_to_markdown",
    "table_to_svg",
]
