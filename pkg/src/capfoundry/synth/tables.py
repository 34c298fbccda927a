"""Table synthesis: LaTeX tabular source, markdown rendering, monospace-grid SVG.

The markdown form is the round-trip carrier: parse_markdown_table inverts
render exactly (pipes escaped as \\|). The LaTeX form is canonical plain
tabular with one whitespace convention, not a round-trip target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

from capfoundry.records import ImageDomain, SeedArtifact, content_digest
from capfoundry.synth.svg import SvgDoc

CHAR_W = 9.0  # monospace glyph advance in px
ROW_H = 22.0
CELL_PAD = 6.0
FONT_SIZE = 14.0


class SpecInvalid(ValueError):
    """Carries the offending field path in the message."""


ALIGNMENTS = ("left", "center", "right")


@dataclass(frozen=True)
class TableSpec:
    n_rows: int
    n_cols: int
    header: bool
    alignments: tuple[str, ...]
    cells: tuple[tuple[str, ...], ...]
    caption_text: Optional[str] = None

    def validate(self) -> None:
        if not 1 <= self.n_rows <= 20:
            raise SpecInvalid(f"n_rows: {self.n_rows} outside 1..20")
        if not 1 <= self.n_cols <= 20:
            raise SpecInvalid(f"n_cols: {self.n_cols} outside 1..20")
        if len(self.alignments) != self.n_cols:
            raise SpecInvalid(f"alignments: {len(self.alignments)} entries for {self.n_cols} columns")
        for j, align in enumerate(self.alignments):
            if align not in ALIGNMENTS:
                raise SpecInvalid(f"alignments[{j}]: unknown {align!r}")
        if len(self.cells) != self.n_rows:
            raise SpecInvalid(f"cells: {len(self.cells)} rows for n_rows={self.n_rows}")
        for i, row in enumerate(self.cells):
            if len(row) != self.n_cols:
                raise SpecInvalid(f"cells[{i}]: {len(row)} cells for n_cols={self.n_cols}")
            for j, cell in enumerate(row):
                if "\n" in cell:
                    raise SpecInvalid(f"cells[{i}][{j}]: newline in cell")
        if self.header and self.n_rows < 1:
            raise SpecInvalid("header: header row requires n_rows >= 1")

    def to_json_dict(self) -> dict:
        return {
            "kind": "table",
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "header": self.header,
            "alignments": list(self.alignments),
            "cells": [list(row) for row in self.cells],
            "caption_text": self.caption_text,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TableSpec":
        return cls(
            n_rows=int(obj["n_rows"]),
            n_cols=int(obj["n_cols"]),
            header=bool(obj["header"]),
            alignments=tuple(obj["alignments"]),
            cells=tuple(tuple(row) for row in obj["cells"]),
            caption_text=obj.get("caption_text"),
        )


def spec_digest_for(obj: dict) -> str:
    return content_digest(json.dumps(obj, sort_keys=True, ensure_ascii=False).encode("utf-8"))


_LATEX_COLSPEC = {"left": "l", "center": "c", "right": "r"}


def table_to_latex(spec: TableSpec) -> str:
    colspec = "".join(_LATEX_COLSPEC[a] for a in spec.alignments)
    lines = [f"\\begin{{tabular}}{{{colspec}}}"]
    for i, row in enumerate(spec.cells):
        rendered = " & ".join(cell.replace("&", "\\&") for cell in row)
        lines.append(f"{rendered} \\\\")
        if spec.header and i == 0:
            lines.append("\\hline")
    lines.append("\\end{tabular}")
    return "\n".join(lines)


_MD_SEPARATOR = {"left": "---", "center": ":---:", "right": "---:"}


def _md_escape(cell: str) -> str:
    return cell.replace("\\", "\\\\").replace("|", "\\|")


def _md_unescape(cell: str) -> str:
    out = []
    i = 0
    while i < len(cell):
        if cell[i] == "\\" and i + 1 < len(cell) and cell[i + 1] in ("\\", "|"):
            out.append(cell[i + 1])
            i += 2
        else:
            out.append(cell[i])
            i += 1
    return "".join(out)


def table_to_markdown(spec: TableSpec) -> str:
    def row_line(row: tuple[str, ...]) -> str:
        return "| " + " | ".join(_md_escape(cell) for cell in row) + " |"

    lines = []
    rows = list(spec.cells)
    if spec.header:
        lines.append(row_line(rows[0]))
        lines.append("| " + " | ".join(_MD_SEPARATOR[a] for a in spec.alignments) + " |")
        rows = rows[1:]
    for row in rows:
        lines.append(row_line(row))
    return "\n".join(lines)


@dataclass(frozen=True)
class ParsedTable:
    cells: tuple[tuple[str, ...], ...]
    header: bool
    alignments: Optional[tuple[str, ...]]


def _split_md_row(line: str) -> list[str]:
    line = line.strip()
    if not (line.startswith("|") and line.endswith("|")):
        raise SpecInvalid(f"markdown row not pipe-delimited: {line!r}")
    inner = line[1:-1]
    cells = []
    current: list[str] = []
    i = 0
    while i < len(inner):
        ch = inner[i]
        if ch == "\\" and i + 1 < len(inner):
            current.append(inner[i : i + 2])
            i += 2
        elif ch == "|":
            cells.append("".join(current))
            current = []
            i += 1
        else:
            current.append(ch)
            i += 1
    cells.append("".join(current))
    return [_md_unescape(cell.strip()) for cell in cells]


def _is_separator(cells: list[str]) -> bool:
    if not cells:
        return False
    for cell in cells:
        body = cell.strip()
        if body.startswith(":"):
            body = body[1:]
        if body.endswith(":"):
            body = body[:-1]
        if not body or set(body) != {"-"}:
            return False
    return True


def _separator_alignment(cell: str) -> str:
    cell = cell.strip()
    left = cell.startswith(":")
    right = cell.endswith(":")
    if left and right:
        return "center"
    if right:
        return "right"
    return "left"


def parse_markdown_table(markdown: str) -> ParsedTable:
    """Independent inverse of table_to_markdown (also the round-trip oracle)."""
    lines = [line for line in markdown.splitlines() if line.strip()]
    if not lines:
        raise SpecInvalid("empty markdown table")
    rows = [_split_md_row(line) for line in lines]
    header = False
    alignments: Optional[tuple[str, ...]] = None
    if len(rows) >= 2 and _is_separator([c for c in rows[1]]):
        # second parsed row before unescaping is the separator; re-split raw
        raw_sep = lines[1].strip()[1:-1].split("|")
        alignments = tuple(_separator_alignment(c) for c in raw_sep)
        header = True
        rows = [rows[0]] + rows[2:]
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise SpecInvalid(f"row {i}: {len(row)} cells, expected {width}")
    return ParsedTable(cells=tuple(tuple(r) for r in rows), header=header, alignments=alignments)


def table_to_svg(spec: TableSpec) -> str:
    col_widths = []
    for j in range(spec.n_cols):
        longest = max(len(spec.cells[i][j]) for i in range(spec.n_rows))
        col_widths.append(2 * CELL_PAD + CHAR_W * max(longest, 1))
    total_w = sum(col_widths)
    total_h = ROW_H * spec.n_rows
    doc = SvgDoc(total_w, total_h)
    doc.rect(0, 0, total_w, total_h, fill="white", stroke="black")
    x = 0.0
    for width in col_widths[:-1]:
        x += width
        doc.line(x, 0, x, total_h)
    for i in range(1, spec.n_rows):
        doc.line(0, ROW_H * i, total_w, ROW_H * i, stroke_width=2.0 if (spec.header and i == 1) else 1.0)
    for i, row in enumerate(spec.cells):
        y = ROW_H * i + ROW_H - CELL_PAD
        x = 0.0
        for j, cell in enumerate(row):
            align = spec.alignments[j]
            if align == "left":
                doc.text(x + CELL_PAD, y, cell, FONT_SIZE, anchor="start")
            elif align == "center":
                doc.text(x + col_widths[j] / 2, y, cell, FONT_SIZE, anchor="middle")
            else:
                doc.text(x + col_widths[j] - CELL_PAD, y, cell, FONT_SIZE, anchor="end")
            x += col_widths[j]
    return doc.to_string()


def _describe_alignments(spec: TableSpec) -> str:
    return ", ".join(spec.alignments)


def gen_table(spec: TableSpec, rng_seed: int = 0, preamble: Optional[str] = None) -> SeedArtifact:
    spec.validate()
    if preamble is None:
        from capfoundry.prompts import get_seed_template

        preamble = get_seed_template(ImageDomain.TABLE).body.strip()
    latex = table_to_latex(spec)
    markdown = table_to_markdown(spec)
    header_note = "the first row is a header row" if spec.header else "there is no header row"
    caption_note = f' The caption reads "{spec.caption_text}".' if spec.caption_text else ""
    description = (
        f"{preamble}\n"
        f"The table has {spec.n_rows} rows and {spec.n_cols} columns; {header_note}. "
        f"Column alignments: {_describe_alignments(spec)}.{caption_note}\n"
        f"LaTeX source:\n{latex}\n"
        f"Markdown rendering:\n{markdown}"
    )
    return SeedArtifact(
        domain=ImageDomain.TABLE,
        spec_digest=spec_digest_for(spec.to_json_dict()),
        image=table_to_svg(spec),
        source_code=latex,
        seed_description=description,
        rng_seed=rng_seed,
        markdown=markdown,
    )
