"""Caption-inserted reasoning: image -> captioner -> text-only LLM -> grade.

The captioner backend sees the image with the trained-captioner system
prompt for the item's domain and returns a detailed caption. The reasoner
backend then receives ONLY text: the caption, the question, the options
when present, and a fixed answer-format instruction. Perception and
reasoning stay decoupled; no reasoner request ever carries image bytes.

Answer extraction is rule-ordered and total: explicit "answer is X"
statements win, then a lone final-line label, then a unique verbatim
option quote; anything else is ABSTAIN, which grades as incorrect.
Scoring is plain accuracy x100 except for MME, which uses the paired
per-category convention (acc + acc_plus summed over categories, then
divided by 100 onto the common scale).
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from capfoundry.gateway import BackendBinding, Gateway
from capfoundry.prompts import get_system_prompt, render
from capfoundry.records import CaptionStyle, ImageDomain, Language, StyleVariant

__all__ = [
    "ABSTAIN",
    "DEFAULT_TOLERANCE",
    "BENCHMARK_DOMAIN",
    "BridgeError",
    "EmptyRun",
    "BenchmarkItem",
    "BridgeResult",
    "ItemFailure",
    "ScoreReport",
    "ReasonBridge",
    "compose_reasoner_prompt",
    "extract_choice",
    "extract_numeric",
    "extract_yesno",
    "load_benchmark_items",
    "numeric_match",
    "parse_number",
    "score_benchmark",
]

log = logging.getLogger(__name__)

ABSTAIN = "ABSTAIN"
DEFAULT_TOLERANCE = 1e-4
_LETTERS = "ABCDE"

# What the user turn asks the trained captioner; the task itself lives in
# the system/* prompt. Frozen: it is part of the gateway cache key.
CAPTION_REQUEST = "Describe the image."

# Default image domain per benchmark, overridable per item. Math
# benchmarks split by their dominant figure type: geometry diagrams vs
# typeset formulas.
BENCHMARK_DOMAIN: dict[str, ImageDomain] = {
    "mme": ImageDomain.NATURAL,
    "mmmu": ImageDomain.NATURAL,
    "mathverse": ImageDomain.GEOMETRY,
    "mathvision": ImageDomain.EQUATION,
    "olympiadbench": ImageDomain.EQUATION,
}

_DETAILED_EN = CaptionStyle(StyleVariant.DETAILED, Language.EN)


class BridgeError(Exception):
    pass


class EmptyRun(BridgeError):
    """score_benchmark received zero results."""


def _normalize_benchmark(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


# --------------------------------------------------------------------------
# Number grammar: integers, decimals, simple fractions "a/b".

_NUMBER = re.compile(r"-?\d+(?:\.\d+)?(?:\s*/\s*-?\d+(?:\.\d+)?)?")
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+|\n+")


def parse_number(token: str) -> Optional[float]:
    """Evaluate one token of the number grammar; None when it is not one."""
    token = token.strip()
    if not _NUMBER.fullmatch(token):
        return None
    if "/" in token:
        num_s, den_s = token.split("/", 1)
        num, den = float(num_s), float(den_s)
        # A zero denominator is not a fraction; read the numerator alone.
        return num if den == 0 else num / den
    return float(token)


def numeric_match(value: float, gold: float, tolerance: float = DEFAULT_TOLERANCE) -> bool:
    """Relative comparison; the same magnitude serves as the absolute
    floor so a gold of exactly zero remains matchable."""
    return math.isclose(value, gold, rel_tol=tolerance, abs_tol=tolerance)


# --------------------------------------------------------------------------
# Extraction rules. Ordered by priority; each rule only fires when every
# higher rule abstained, so adding a rule can never flip a label.

_ANSWER_CHOICE = re.compile(
    r"\banswer\s*(?:is|:)\s*(?:option\s+)?\(?([A-Ea-e])\)?(?![A-Za-z0-9])", re.IGNORECASE
)
_FINAL_CHOICE = re.compile(r"\(?([A-Ea-e])\)?[.)]?")
_ANSWER_YESNO = re.compile(r"\banswer\s*(?:is|:)\s*\"?(yes|no)\b", re.IGNORECASE)
_FINAL_YESNO = re.compile(r"\"?(yes|no)\"?[.!]?", re.IGNORECASE)


def _final_line(text: str) -> str:
    lines = [line.strip() for line in text.strip().splitlines() if line.strip()]
    return lines[-1] if lines else ""


def _final_paragraph(text: str) -> str:
    paragraphs = [p.strip() for p in text.strip().split("\n\n") if p.strip()]
    return paragraphs[-1] if paragraphs else ""


def extract_choice(text: str, options: Sequence[str], max_rule: int = 3) -> str:
    """Pull an option letter out of free-form reasoner text.

    Rule 1: last "answer is (X)" / "Answer: X" with a letter valid for the
    option count. Rule 2: final non-empty line is a lone valid letter.
    Rule 3: exactly one option's full text appears (case-insensitively) in
    the final paragraph. Otherwise ABSTAIN. `max_rule` exists for the
    monotonicity regression test and is not part of the public contract.
    """
    if not 2 <= len(options) <= 5:
        raise ValueError(f"choice extraction needs 2-5 options, got {len(options)}")
    valid = _LETTERS[: len(options)]

    hits = [m.group(1).upper() for m in _ANSWER_CHOICE.finditer(text)]
    hits = [h for h in hits if h in valid]
    if hits:
        return hits[-1]

    if max_rule >= 2:
        m = _FINAL_CHOICE.fullmatch(_final_line(text))
        if m and m.group(1).upper() in valid:
            return m.group(1).upper()

    if max_rule >= 3:
        paragraph = _final_paragraph(text).lower()
        quoted = [
            valid[i] for i, option in enumerate(options) if option.strip().lower() in paragraph
        ]
        if len(quoted) == 1:
            return quoted[0]

    return ABSTAIN


def extract_yesno(text: str, max_rule: int = 3) -> str:
    hits = [m.group(1).lower() for m in _ANSWER_YESNO.finditer(text)]
    if hits:
        return hits[-1]

    if max_rule >= 2:
        m = _FINAL_YESNO.fullmatch(_final_line(text))
        if m:
            return m.group(1).lower()

    if max_rule >= 3:
        paragraph = _final_paragraph(text).lower()
        present = [w for w in ("yes", "no") if re.search(rf"\b{w}\b", paragraph)]
        if len(present) == 1:
            return present[0]

    return ABSTAIN


def extract_numeric(text: str) -> Union[float, str]:
    """Last number in the final number-bearing sentence, else ABSTAIN."""
    for sentence in reversed(_SENTENCE_SPLIT.split(text)):
        matches = _NUMBER.findall(sentence)
        if matches:
            value = parse_number(matches[-1])
            if value is not None:
                return value
    return ABSTAIN


# --------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class BenchmarkItem:
    item_id: str
    image_ref: str
    question: str
    benchmark: str
    answer: str
    options: Optional[tuple[str, ...]] = None
    category: Optional[str] = None
    tolerance: float = DEFAULT_TOLERANCE
    domain: Optional[ImageDomain] = None

    @property
    def answer_kind(self) -> str:
        a = self.answer.strip()
        if re.fullmatch(r"[A-Ea-e]", a):
            return "letter"
        if a.lower() in ("yes", "no"):
            return "yesno"
        if parse_number(a) is not None:
            return "number"
        raise BridgeError(f"{self.item_id}: unintelligible gold answer {self.answer!r}")

    def validate(self) -> None:
        if not self.item_id or not self.question:
            raise BridgeError("item_id and question must be non-empty")
        kind = self.answer_kind
        if (kind == "letter") != (self.options is not None):
            raise BridgeError(
                f"{self.item_id}: options must be present exactly when the gold answer is a letter"
            )
        if self.options is not None:
            if not 2 <= len(self.options) <= 5:
                raise BridgeError(f"{self.item_id}: need 2-5 options, got {len(self.options)}")
            if self.answer.upper() not in _LETTERS[: len(self.options)]:
                raise BridgeError(f"{self.item_id}: gold letter {self.answer!r} out of range")
        if self.tolerance <= 0:
            raise BridgeError(f"{self.item_id}: tolerance must be positive")

    def to_json_dict(self) -> dict:
        out: dict = {
            "item_id": self.item_id,
            "image_ref": self.image_ref,
            "question": self.question,
            "benchmark": self.benchmark,
            "answer": self.answer,
        }
        if self.options is not None:
            out["options"] = list(self.options)
        if self.category is not None:
            out["category"] = self.category
        if self.tolerance != DEFAULT_TOLERANCE:
            out["tolerance"] = self.tolerance
        if self.domain is not None:
            out["domain"] = self.domain.value
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "BenchmarkItem":
        item = cls(
            item_id=obj["item_id"],
            image_ref=obj["image_ref"],
            question=obj["question"],
            benchmark=obj["benchmark"],
            answer=str(obj["answer"]),
            options=tuple(obj["options"]) if obj.get("options") is not None else None,
            category=obj.get("category"),
            tolerance=obj.get("tolerance", DEFAULT_TOLERANCE),
            domain=ImageDomain(obj["domain"]) if obj.get("domain") else None,
        )
        item.validate()
        return item


def load_benchmark_items(path: str | Path) -> list[BenchmarkItem]:
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                items.append(BenchmarkItem.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise BridgeError(f"{path}:{line_no}: {exc}") from exc
    seen = [item.item_id for item in items]
    if len(set(seen)) != len(seen):
        raise BridgeError(f"{path}: duplicate item_ids")
    return items


@dataclass(frozen=True)
class BridgeResult:
    item_id: str
    image_ref: str
    category: Optional[str]
    caption_text: str
    reasoner_text: str
    extracted: Union[str, float]
    correct: bool
    captioner_ms: float
    reasoner_ms: float

    def to_json_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "image_ref": self.image_ref,
            "category": self.category,
            "caption_text": self.caption_text,
            "reasoner_text": self.reasoner_text,
            "extracted": self.extracted,
            "correct": self.correct,
            "captioner_ms": self.captioner_ms,
            "reasoner_ms": self.reasoner_ms,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "BridgeResult":
        return cls(**{k: obj[k] for k in (
            "item_id", "image_ref", "category", "caption_text", "reasoner_text",
            "extracted", "correct", "captioner_ms", "reasoner_ms",
        )})


@dataclass(frozen=True)
class ItemFailure:
    item_id: str
    error: str
    message: str

    def to_json_dict(self) -> dict:
        return {"item_id": self.item_id, "error": self.error, "message": self.message}


# --------------------------------------------------------------------------
# Prompt composition


def compose_reasoner_prompt(caption: str, item: BenchmarkItem) -> str:
    """The fixed text-only prompt: caption, question, options, format line.

    Byte-stable by contract; tests pin it against golden files.
    """
    parts = [f"Image description:\n{caption}", f"Question:\n{item.question}"]
    if item.options is not None:
        lines = "\n".join(f"{_LETTERS[i]}. {text}" for i, text in enumerate(item.options))
        parts.append(f"Options:\n{lines}")
    kind = item.answer_kind
    if kind == "letter":
        parts.append("Answer with the option letter only.")
    elif kind == "yesno":
        parts.append("Answer with yes or no only.")
    else:
        parts.append('Give the final answer on the last line in the form "Answer: <number>".')
    return "\n\n".join(parts)


def grade(item: BenchmarkItem, reasoner_text: str) -> tuple[Union[str, float], bool]:
    """Extract per the item's answer kind and compare to gold.

    ABSTAIN is always incorrect; correctness depends only on the
    extraction, never on the raw text.
    """
    kind = item.answer_kind
    if kind == "letter":
        extracted = extract_choice(reasoner_text, item.options or ())
        return extracted, extracted == item.answer.upper()
    if kind == "yesno":
        extracted = extract_yesno(reasoner_text)
        return extracted, extracted == item.answer.lower()
    extracted = extract_numeric(reasoner_text)
    if extracted == ABSTAIN:
        return extracted, False
    gold = parse_number(item.answer)
    assert gold is not None  # answer_kind == "number" guarantees it
    return extracted, numeric_match(float(extracted), gold, item.tolerance)


def domain_for_item(item: BenchmarkItem) -> ImageDomain:
    if item.domain is not None:
        return item.domain
    return BENCHMARK_DOMAIN.get(_normalize_benchmark(item.benchmark), ImageDomain.NATURAL)


# --------------------------------------------------------------------------
# The bridge


def _read_file_bytes(ref: str) -> bytes:
    return Path(ref).read_bytes()


class ReasonBridge:
    def __init__(self, gateway: Gateway, image_loader: Callable[[str], bytes] = _read_file_bytes):
        self.gateway = gateway
        self.image_loader = image_loader

    def bridge_answer(
        self,
        item: BenchmarkItem,
        captioner: BackendBinding,
        reasoner: BackendBinding,
        style: CaptionStyle = _DETAILED_EN,
    ) -> BridgeResult:
        item.validate()
        domain = domain_for_item(item)
        template = get_system_prompt(domain, style, namespace="system")
        system = render(template, {slot: "" for slot in template.slots})
        image = self.image_loader(item.image_ref)
        cap = self.gateway.caption_image(
            captioner, system=system, user=CAPTION_REQUEST, image=image, temperature=0.0
        )
        # Decoupling: the reasoner gets the caption as text, never the image.
        prompt = compose_reasoner_prompt(cap.text, item)
        rsp = self.gateway.complete_text(reasoner, system=None, user=prompt)
        extracted, correct = grade(item, rsp.text)
        return BridgeResult(
            item_id=item.item_id,
            image_ref=item.image_ref,
            category=item.category,
            caption_text=cap.text,
            reasoner_text=rsp.text,
            extracted=extracted,
            correct=correct,
            captioner_ms=cap.backend_latency_ms,
            reasoner_ms=rsp.backend_latency_ms,
        )

    def run_items(
        self,
        items: Sequence[BenchmarkItem],
        captioner: BackendBinding,
        reasoner: BackendBinding,
        style: CaptionStyle = _DETAILED_EN,
        max_workers: int = 4,
        errors: Optional[list[ItemFailure]] = None,
    ) -> list[BridgeResult]:
        """Evaluate items concurrently; failures go to `errors` (or raise)."""
        lock = threading.Lock()

        def one(item: BenchmarkItem) -> Optional[BridgeResult]:
            try:
                return self.bridge_answer(item, captioner, reasoner, style=style)
            except Exception as exc:
                if errors is None:
                    raise
                with lock:
                    errors.append(ItemFailure(item.item_id, type(exc).__name__, str(exc)))
                return None

        if max_workers <= 1 or len(items) <= 1:
            maybe = [one(item) for item in items]
        else:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                maybe = list(pool.map(one, items))
        return [r for r in maybe if r is not None]


# --------------------------------------------------------------------------
# Scoring


@dataclass(frozen=True)
class ScoreReport:
    benchmark: str
    n_results: int
    n_correct: int
    accuracy: float
    abstain_rate: float
    per_category: dict[str, float]
    scaled_score: float
    mme_total: Optional[float] = None
    warnings: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "benchmark": self.benchmark,
            "n_results": self.n_results,
            "n_correct": self.n_correct,
            "accuracy": self.accuracy,
            "abstain_rate": self.abstain_rate,
            "per_category": dict(sorted(self.per_category.items())),
            "scaled_score": self.scaled_score,
            "mme_total": self.mme_total,
            "warnings": list(self.warnings),
        }

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2).encode("utf-8")


KNOWN_BENCHMARKS = frozenset(BENCHMARK_DOMAIN)


def score_benchmark(results: Sequence[BridgeResult], benchmark: str) -> ScoreReport:
    if not results:
        raise EmptyRun("no results to score")
    ids = [r.item_id for r in results]
    if len(set(ids)) != len(ids):
        raise BridgeError("results contain duplicate item_ids")

    n = len(results)
    n_correct = sum(1 for r in results if r.correct)
    accuracy = 100.0 * n_correct / n
    abstain_rate = sum(1 for r in results if r.extracted == ABSTAIN) / n
    warnings: list[str] = []

    by_category: dict[str, list[BridgeResult]] = {}
    for r in results:
        by_category.setdefault(r.category or "uncategorized", []).append(r)

    norm = _normalize_benchmark(benchmark)
    if norm == "mme":
        # Paired convention: per category, acc = question accuracy x100 and
        # acc_plus = fraction of images with every sub-question correct
        # x100; the category score is their sum (200 max) and the benchmark
        # total is the sum over categories, reported /100 for chart scale.
        per_category: dict[str, float] = {}
        for cat, group in by_category.items():
            acc = 100.0 * sum(1 for r in group if r.correct) / len(group)
            by_image: dict[str, list[bool]] = {}
            for r in group:
                by_image.setdefault(r.image_ref, []).append(r.correct)
            acc_plus = 100.0 * sum(1 for v in by_image.values() if all(v)) / len(by_image)
            per_category[cat] = acc + acc_plus
        mme_total = sum(per_category.values())
        return ScoreReport(
            benchmark=benchmark,
            n_results=n,
            n_correct=n_correct,
            accuracy=accuracy,
            abstain_rate=abstain_rate,
            per_category=per_category,
            scaled_score=mme_total / 100.0,
            mme_total=mme_total,
            warnings=tuple(warnings),
        )

    if norm not in KNOWN_BENCHMARKS:
        message = f"unknown benchmark {benchmark!r}; scoring as plain accuracy"
        log.warning(message)
        warnings.append(message)
    per_category = {
        cat: 100.0 * sum(1 for r in group if r.correct) / len(group)
        for cat, group in by_category.items()
    }
    return ScoreReport(
        benchmark=benchmark,
        n_results=n,
        n_correct=n_correct,
        accuracy=accuracy,
        abstain_rate=abstain_rate,
        per_category=per_category,
        scaled_score=accuracy,
        warnings=tuple(warnings),
    )
