"""Equation synthesis: AST, LaTeX printer, abstract box-model layout, SVG.

Glyph metrics are a fixed abstract font box (10 wide, 16 high, baseline 12),
not real font metrics; the fidelity target is structural correctness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Union

from capfoundry.records import ImageDomain, SeedArtifact, content_digest
from capfoundry.synth.svg import SvgDoc, fmt

GLYPH_W = 10.0
GLYPH_H = 16.0
GLYPH_BASELINE = 12.0
FRAC_PAD = 2.0
RULE_THICKNESS = 2.0
SCRIPT_SCALE = 0.7
SUP_RAISE = 6.0  # exponent bottom sits this far above the base baseline
SUB_DROP = 4.0   # index top sits this far above the base bottom
BINARY_GAP = 4.0
MAX_DEPTH = 12


class DepthExceeded(ValueError):
    pass


class AstInvalid(ValueError):
    pass


@dataclass(frozen=True)
class Number:
    value: str


@dataclass(frozen=True)
class Symbol:
    name: str


@dataclass(frozen=True)
class Binary:
    op: str  # one of + − × =
    left: "EquationAst"
    right: "EquationAst"


@dataclass(frozen=True)
class Frac:
    numerator: "EquationAst"
    denominator: "EquationAst"


@dataclass(frozen=True)
class Pow:
    base: "EquationAst"
    exponent: "EquationAst"


@dataclass(frozen=True)
class Sub:
    base: "EquationAst"
    index: "EquationAst"


@dataclass(frozen=True)
class Sqrt:
    radicand: "EquationAst"


@dataclass(frozen=True)
class SumLimits:
    lower: "EquationAst"
    upper: "EquationAst"
    body: "EquationAst"


EquationAst = Union[Number, Symbol, Binary, Frac, Pow, Sub, Sqrt, SumLimits]

BINARY_OPS = ("+", "−", "×", "=")
_OP_LATEX = {"+": "+", "−": "-", "×": "\\times", "=": "="}
_OP_GLYPH = {"+": "+", "−": "−", "×": "×", "=": "="}
_PRECEDENCE = {"=": 0, "+": 1, "−": 1, "×": 2}


def _children(ast: EquationAst) -> tuple[EquationAst, ...]:
    if isinstance(ast, Binary):
        return (ast.left, ast.right)
    if isinstance(ast, Frac):
        return (ast.numerator, ast.denominator)
    if isinstance(ast, Pow):
        return (ast.base, ast.exponent)
    if isinstance(ast, Sub):
        return (ast.base, ast.index)
    if isinstance(ast, Sqrt):
        return (ast.radicand,)
    if isinstance(ast, SumLimits):
        return (ast.lower, ast.upper, ast.body)
    return ()


def validate_ast(ast: EquationAst, _depth: int = 1) -> None:
    if _depth > MAX_DEPTH:
        raise DepthExceeded(f"tree depth exceeds {MAX_DEPTH}")
    if isinstance(ast, Number):
        if not ast.value or not all(c.isdigit() or c == "." for c in ast.value):
            raise AstInvalid(f"Number value {ast.value!r}")
        return
    if isinstance(ast, Symbol):
        if not ast.name:
            raise AstInvalid("empty Symbol name")
        return
    if isinstance(ast, Binary) and ast.op not in BINARY_OPS:
        raise AstInvalid(f"unknown operator {ast.op!r}")
    kids = _children(ast)
    if not kids:
        raise AstInvalid(f"unknown node {type(ast).__name__}")
    for kid in kids:
        validate_ast(kid, _depth + 1)


def ast_depth(ast: EquationAst) -> int:
    kids = _children(ast)
    return 1 + (max(ast_depth(k) for k in kids) if kids else 0)


def _needs_parens(child: EquationAst, parent_prec: int, right_side: bool) -> bool:
    if not isinstance(child, Binary):
        return False
    child_prec = _PRECEDENCE[child.op]
    return child_prec < parent_prec or (right_side and child_prec == parent_prec)


def ast_to_latex(ast: EquationAst) -> str:
    if isinstance(ast, Number):
        return ast.value
    if isinstance(ast, Symbol):
        return ast.name
    if isinstance(ast, Binary):
        prec = _PRECEDENCE[ast.op]
        left = ast_to_latex(ast.left)
        right = ast_to_latex(ast.right)
        if _needs_parens(ast.left, prec, right_side=False):
            left = f"({left})"
        if _needs_parens(ast.right, prec, right_side=True):
            right = f"({right})"
        return f"{left} {_OP_LATEX[ast.op]} {right}"
    if isinstance(ast, Frac):
        return f"\\frac{{{ast_to_latex(ast.numerator)}}}{{{ast_to_latex(ast.denominator)}}}"
    if isinstance(ast, Pow):
        return f"{{{ast_to_latex(ast.base)}}}^{{{ast_to_latex(ast.exponent)}}}"
    if isinstance(ast, Sub):
        return f"{{{ast_to_latex(ast.base)}}}_{{{ast_to_latex(ast.index)}}}"
    if isinstance(ast, Sqrt):
        return f"\\sqrt{{{ast_to_latex(ast.radicand)}}}"
    if isinstance(ast, SumLimits):
        return (
            f"\\sum_{{{ast_to_latex(ast.lower)}}}^{{{ast_to_latex(ast.upper)}}} "
            f"{ast_to_latex(ast.body)}"
        )
    raise AstInvalid(f"unknown node {type(ast).__name__}")


@dataclass(frozen=True)
class Box:
    """Layout box: width, height, baseline measured from the top edge."""

    width: float
    height: float
    baseline: float
    node: EquationAst
    children: tuple["PlacedBox", ...] = ()


@dataclass(frozen=True)
class PlacedBox:
    dx: float
    dy: float
    scale: float
    box: Box


def _glyph_row_box(text: str, node: EquationAst) -> Box:
    return Box(width=GLYPH_W * max(len(text), 1), height=GLYPH_H, baseline=GLYPH_BASELINE, node=node)


def _hstack(node: EquationAst, items: list[tuple[Box, float]], gap: float = 0.0) -> Box:
    """Place boxes left to right on a common baseline; items carry scale."""
    ascent = max(box.baseline * scale for box, scale in items)
    descent = max((box.height - box.baseline) * scale for box, scale in items)
    placed = []
    x = 0.0
    for k, (box, scale) in enumerate(items):
        if k:
            x += gap
        placed.append(PlacedBox(dx=x, dy=ascent - box.baseline * scale, scale=scale, box=box))
        x += box.width * scale
    return Box(width=x, height=ascent + descent, baseline=ascent, node=node, children=tuple(placed))


def layout_equation(ast: EquationAst) -> Box:
    validate_ast(ast)
    return _layout(ast)


def _paren_wrap(inner: Box) -> list[tuple[Box, float]]:
    open_box = _glyph_row_box("(", Symbol("("))
    close_box = _glyph_row_box(")", Symbol(")"))
    return [(open_box, 1.0), (inner, 1.0), (close_box, 1.0)]


def _layout(ast: EquationAst) -> Box:
    if isinstance(ast, Number):
        return _glyph_row_box(ast.value, ast)
    if isinstance(ast, Symbol):
        return _glyph_row_box(ast.name, ast)
    if isinstance(ast, Binary):
        prec = _PRECEDENCE[ast.op]
        left = _layout(ast.left)
        right = _layout(ast.right)
        op_box = _glyph_row_box(_OP_GLYPH[ast.op], Symbol(_OP_GLYPH[ast.op]))
        items: list[tuple[Box, float]] = []
        if _needs_parens(ast.left, prec, right_side=False):
            items.extend(_paren_wrap(left))
        else:
            items.append((left, 1.0))
        items.append((op_box, 1.0))
        if _needs_parens(ast.right, prec, right_side=True):
            items.extend(_paren_wrap(right))
        else:
            items.append((right, 1.0))
        return _hstack(ast, items, gap=BINARY_GAP)
    if isinstance(ast, Frac):
        num = _layout(ast.numerator)
        den = _layout(ast.denominator)
        width = max(num.width, den.width) + 2 * FRAC_PAD
        height = num.height + RULE_THICKNESS + den.height + 2 * FRAC_PAD
        baseline = num.height + FRAC_PAD + RULE_THICKNESS / 2
        placed = (
            PlacedBox(dx=(width - num.width) / 2, dy=0.0, scale=1.0, box=num),
            PlacedBox(dx=(width - den.width) / 2, dy=num.height + RULE_THICKNESS + 2 * FRAC_PAD, scale=1.0, box=den),
        )
        return Box(width=width, height=height, baseline=baseline, node=ast, children=placed)
    if isinstance(ast, Pow):
        base = _layout(ast.base)
        exp = _layout(ast.exponent)
        exp_h = exp.height * SCRIPT_SCALE
        exp_w = exp.width * SCRIPT_SCALE
        # exponent bottom sits SUP_RAISE above the base baseline
        rise = max(0.0, exp_h + SUP_RAISE - base.baseline)
        placed = (
            PlacedBox(dx=0.0, dy=rise, scale=1.0, box=base),
            PlacedBox(dx=base.width, dy=rise + base.baseline - SUP_RAISE - exp_h, scale=SCRIPT_SCALE, box=exp),
        )
        return Box(
            width=base.width + exp_w,
            height=base.height + rise,
            baseline=base.baseline + rise,
            node=ast,
            children=placed,
        )
    if isinstance(ast, Sub):
        base = _layout(ast.base)
        idx = _layout(ast.index)
        idx_h = idx.height * SCRIPT_SCALE
        idx_w = idx.width * SCRIPT_SCALE
        idx_top = base.height - SUB_DROP
        drop = max(0.0, idx_top + idx_h - base.height)
        placed = (
            PlacedBox(dx=0.0, dy=0.0, scale=1.0, box=base),
            PlacedBox(dx=base.width, dy=idx_top, scale=SCRIPT_SCALE, box=idx),
        )
        return Box(
            width=base.width + idx_w,
            height=base.height + drop,
            baseline=base.baseline,
            node=ast,
            children=placed,
        )
    if isinstance(ast, Sqrt):
        rad = _layout(ast.radicand)
        bar = 2.0
        gap = 2.0
        width = GLYPH_W + rad.width + gap
        height = rad.height + bar + gap
        placed = (PlacedBox(dx=GLYPH_W, dy=bar + gap, scale=1.0, box=rad),)
        return Box(width=width, height=height, baseline=rad.baseline + bar + gap, node=ast, children=placed)
    if isinstance(ast, SumLimits):
        lower = _layout(ast.lower)
        upper = _layout(ast.upper)
        body = _layout(ast.body)
        sigma = _glyph_row_box("∑", Symbol("∑"))
        lower_h = lower.height * SCRIPT_SCALE
        upper_h = upper.height * SCRIPT_SCALE
        col_w = max(sigma.width, lower.width * SCRIPT_SCALE, upper.width * SCRIPT_SCALE)
        col_h = upper_h + 2.0 + sigma.height + 2.0 + lower_h
        col_baseline = upper_h + 2.0 + sigma.baseline
        placed = (
            PlacedBox(dx=(col_w - upper.width * SCRIPT_SCALE) / 2, dy=0.0, scale=SCRIPT_SCALE, box=upper),
            PlacedBox(dx=(col_w - sigma.width) / 2, dy=upper_h + 2.0, scale=1.0, box=sigma),
            PlacedBox(dx=(col_w - lower.width * SCRIPT_SCALE) / 2, dy=upper_h + 2.0 + sigma.height + 2.0, scale=SCRIPT_SCALE, box=lower),
        )
        column = Box(width=col_w, height=col_h, baseline=col_baseline, node=Symbol("∑col"), children=placed)
        return _hstack(ast, [(column, 1.0), (body, 1.0)], gap=BINARY_GAP)
    raise AstInvalid(f"unknown node {type(ast).__name__}")


def _emit_svg(doc: SvgDoc, box: Box, x: float, y: float, scale: float) -> None:
    node = box.node
    if isinstance(node, (Number, Symbol)) and not box.children:
        text = node.value if isinstance(node, Number) else node.name
        doc.text(x, y + box.baseline * scale, text, font_size=14.0 * scale)
        return
    if isinstance(node, Frac):
        rule_y = y + (box.children[0].box.height + FRAC_PAD + RULE_THICKNESS / 2) * scale
        doc.line(x, rule_y, x + box.width * scale, rule_y, stroke_width=RULE_THICKNESS * scale)
    if isinstance(node, Sqrt):
        doc.line(x, y + 3 * scale, x + GLYPH_W * scale, y + box.height * scale, stroke_width=1.5)
        doc.line(x + GLYPH_W * scale, y + 1.0 * scale, x + box.width * scale, y + 1.0 * scale, stroke_width=2.0 * scale)
    for placed in box.children:
        _emit_svg(doc, placed.box, x + placed.dx * scale, y + placed.dy * scale, scale * placed.scale)


def equation_to_svg(ast: EquationAst) -> str:
    # The document box IS the root layout box; no margin, so consumers can
    # recover layout dimensions from the SVG header alone.
    root = layout_equation(ast)
    doc = SvgDoc(root.width, root.height)
    _emit_svg(doc, root, 0.0, 0.0, 1.0)
    return doc.to_string()


def ast_to_json_dict(ast: EquationAst) -> dict:
    if isinstance(ast, Number):
        return {"kind": "number", "value": ast.value}
    if isinstance(ast, Symbol):
        return {"kind": "symbol", "name": ast.name}
    if isinstance(ast, Binary):
        return {"kind": "binary", "op": ast.op, "left": ast_to_json_dict(ast.left), "right": ast_to_json_dict(ast.right)}
    if isinstance(ast, Frac):
        return {"kind": "frac", "numerator": ast_to_json_dict(ast.numerator), "denominator": ast_to_json_dict(ast.denominator)}
    if isinstance(ast, Pow):
        return {"kind": "pow", "base": ast_to_json_dict(ast.base), "exponent": ast_to_json_dict(ast.exponent)}
    if isinstance(ast, Sub):
        return {"kind": "sub", "base": ast_to_json_dict(ast.base), "index": ast_to_json_dict(ast.index)}
    if isinstance(ast, Sqrt):
        return {"kind": "sqrt", "radicand": ast_to_json_dict(ast.radicand)}
    if isinstance(ast, SumLimits):
        return {
            "kind": "sum",
            "lower": ast_to_json_dict(ast.lower),
            "upper": ast_to_json_dict(ast.upper),
            "body": ast_to_json_dict(ast.body),
        }
    raise AstInvalid(f"unknown node {type(ast).__name__}")


def ast_from_json_dict(obj: dict) -> EquationAst:
    kind = obj["kind"]
    if kind == "number":
        return Number(obj["value"])
    if kind == "symbol":
        return Symbol(obj["name"])
    if kind == "binary":
        return Binary(obj["op"], ast_from_json_dict(obj["left"]), ast_from_json_dict(obj["right"]))
    if kind == "frac":
        return Frac(ast_from_json_dict(obj["numerator"]), ast_from_json_dict(obj["denominator"]))
    if kind == "pow":
        return Pow(ast_from_json_dict(obj["base"]), ast_from_json_dict(obj["exponent"]))
    if kind == "sub":
        return Sub(ast_from_json_dict(obj["base"]), ast_from_json_dict(obj["index"]))
    if kind == "sqrt":
        return Sqrt(ast_from_json_dict(obj["radicand"]))
    if kind == "sum":
        return SumLimits(ast_from_json_dict(obj["lower"]), ast_from_json_dict(obj["upper"]), ast_from_json_dict(obj["body"]))
    raise AstInvalid(f"unknown kind {kind!r}")


def render_equation(ast: EquationAst, rng_seed: int = 0, preamble: "str | None" = None) -> SeedArtifact:
    validate_ast(ast)
    if preamble is None:
        from capfoundry.prompts import get_seed_template

        preamble = get_seed_template(ImageDomain.EQUATION).body.strip()
    latex = ast_to_latex(ast)
    spec_json = {"kind": "equation", "ast": ast_to_json_dict(ast)}
    description = f"{preamble}\nLaTeX source:\n{latex}"
    return SeedArtifact(
        domain=ImageDomain.EQUATION,
        spec_digest=content_digest(json.dumps(spec_json, sort_keys=True, ensure_ascii=False).encode("utf-8")),
        image=equation_to_svg(ast),
        source_code=latex,
        seed_description=description,
        rng_seed=rng_seed,
    )
