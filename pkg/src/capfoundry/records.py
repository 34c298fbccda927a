"""Shared domain types: image domains, caption styles, records, seed artifacts, manifests.

Everything here is an immutable value object; instances are safe to share
between concurrent workers.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Callable, Iterable, Iterator, Optional, Sequence


class UnknownDomain(ValueError):
    pass


class UnknownStyle(ValueError):
    pass


class RecordParseError(ValueError):
    pass


class ImageDomain(str, Enum):
    NATURAL = "natural"
    TABLE = "table"
    CHART = "chart"
    EQUATION = "equation"
    GEOMETRY = "geometry"
    POSTER = "poster"
    UI = "ui"
    PDF = "pdf"
    VIDEO = "video"

    @classmethod
    def parse(cls, value: str) -> "ImageDomain":
        try:
            return cls(value)
        except ValueError:
            raise UnknownDomain(f"unknown image domain: {value!r}") from None


# Routing classes: who produces the seed caption for a domain.
BACKEND_VLM = frozenset(
    {ImageDomain.NATURAL, ImageDomain.POSTER, ImageDomain.UI, ImageDomain.PDF, ImageDomain.VIDEO}
)
CODE_RULE = frozenset(
    {ImageDomain.TABLE, ImageDomain.CHART, ImageDomain.EQUATION, ImageDomain.GEOMETRY}
)


def routing_class(domain: ImageDomain) -> str:
    """Return "backend_vlm" or "code_rule". Total over all domains."""
    if domain in BACKEND_VLM:
        return "backend_vlm"
    if domain in CODE_RULE:
        return "code_rule"
    raise UnknownDomain(f"unrouted domain: {domain!r}")


class StyleVariant(str, Enum):
    DETAILED = "detailed"
    MEDIUM = "medium"
    SHORT = "short"
    TAGS = "tags"
    COT_ANALYSIS = "cot_analysis"


class Language(str, Enum):
    EN = "en"
    ZH = "zh"


@dataclass(frozen=True)
class CaptionStyle:
    variant: StyleVariant
    language: Language = Language.EN

    def key(self) -> str:
        return f"{self.variant.value}/{self.language.value}"

    @classmethod
    def parse(cls, value: str) -> "CaptionStyle":
        """Parse "variant/lang" or bare "variant" (language defaults to en)."""
        parts = value.split("/")
        if len(parts) == 1:
            variant, lang = parts[0], "en"
        elif len(parts) == 2:
            variant, lang = parts
        else:
            raise UnknownStyle(f"malformed style: {value!r}")
        try:
            return cls(StyleVariant(variant), Language(lang))
        except ValueError:
            raise UnknownStyle(f"unknown style: {value!r}") from None


DETAILED_EN = CaptionStyle(StyleVariant.DETAILED, Language.EN)
DETAILED_ZH = CaptionStyle(StyleVariant.DETAILED, Language.ZH)


def content_digest(data: bytes) -> str:
    """SHA-256 of raw bytes, lowercase hex."""
    return hashlib.sha256(data).hexdigest()


def canonical_digest(parts: Sequence[Optional[str]]) -> str:
    """SHA-256 over a length-prefixed concatenation of string fields.

    Each field becomes b"<len>:<utf8>;"; a None field becomes b"-;" so absent
    and empty are distinct. Length prefixing keeps adjacent fields from
    bleeding into each other ("a"+"bc" vs "ab"+"c").
    """
    blob = bytearray()
    for part in parts:
        if part is None:
            blob += b"-;"
        else:
            raw = part.encode("utf-8")
            blob += str(len(raw)).encode("ascii") + b":" + raw + b";"
    return hashlib.sha256(bytes(blob)).hexdigest()


def compute_record_id(
    image_digest: str,
    domain: ImageDomain,
    style: CaptionStyle,
    prompt_id: str,
    producer: str,
) -> str:
    """Content-addressed record identity.

    Deliberately excludes text and created_at: a retry that produces the same
    logical work maps to the same id, so dedup and resume are structural.
    """
    return canonical_digest([image_digest, domain.value, style.key(), prompt_id, producer])


_RFC3339_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z$")


def now_rfc3339(clock: Optional[Callable[[], float]] = None) -> str:
    """UTC RFC 3339 with seconds precision, e.g. 2026-08-18T12:00:00Z."""
    ts = clock() if clock is not None else datetime.now(timezone.utc).timestamp()
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def is_rfc3339(value: str) -> bool:
    if not _RFC3339_RE.match(value):
        return False
    try:
        datetime.strptime(value, "%Y-%m-%dT%H:%M:%SZ")
        return True
    except ValueError:
        return False


# Token counting. The source histogramming tokenizer is unspecified upstream,
# so counts here are "token-approximate": UAX-29-style word segmentation with
# CJK falling back to one segment per character. Deterministic, dependency
# free, monotone in text length.

_CJK_RANGES = (
    (0x3400, 0x4DBF),    # CJK ext A
    (0x4E00, 0x9FFF),    # CJK unified
    (0xF900, 0xFAFF),    # CJK compat
    (0x20000, 0x2FA1F),  # CJK ext B+
    (0x3040, 0x309F),    # hiragana
    (0x30A0, 0x30FF),    # katakana
    (0xAC00, 0xD7AF),    # hangul syllables
)

# Medial characters per UAX-29 word-break classes (simplified): MidNumLet and
# the single quote join same-class neighbors, MidNum joins digits, MidLetter
# joins letters.
_MID_NUM_LET = {".", "'", "’"}
_MID_NUM = {","}
_MID_LETTER = {":"}


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def _is_wordchar(ch: str) -> bool:
    return (ch.isalnum() or ch == "_") and not _is_cjk(ch)


def _medial_joins(prev: str, mid: str, nxt: str) -> bool:
    if not (_is_wordchar(prev) and _is_wordchar(nxt)):
        return False
    if mid in _MID_NUM_LET:
        return (prev.isdigit() and nxt.isdigit()) or (not prev.isdigit() and not nxt.isdigit())
    if mid in _MID_NUM:
        return prev.isdigit() and nxt.isdigit()
    if mid in _MID_LETTER:
        return not prev.isdigit() and not nxt.isdigit()
    return False


def count_tokens(text: str) -> int:
    """Count word segments. Returns 0 iff the text has no word segment."""
    count = 0
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if _is_cjk(ch):
            count += 1
            i += 1
        elif _is_wordchar(ch):
            count += 1
            i += 1
            while i < n:
                if _is_wordchar(text[i]):
                    i += 1
                elif i + 1 < n and _medial_joins(text[i - 1], text[i], text[i + 1]):
                    i += 2
                else:
                    break
        else:
            i += 1
    return count


@dataclass(frozen=True)
class CaptionRecord:
    """One caption with full provenance.

    JSONL field order is part of the external contract: id, image_ref, domain,
    style, language, text, parent_id, producer, prompt_id, created_at,
    token_count.
    """

    id: str
    image_ref: str
    domain: ImageDomain
    style: CaptionStyle
    text: str
    parent_id: Optional[str]
    producer: str
    prompt_id: str
    created_at: str
    token_count: int

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "image_ref": self.image_ref,
            "domain": self.domain.value,
            "style": self.style.variant.value,
            "language": self.style.language.value,
            "text": self.text,
            "parent_id": self.parent_id,
            "producer": self.producer,
            "prompt_id": self.prompt_id,
            "created_at": self.created_at,
            "token_count": self.token_count,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_json_dict(), ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_json_dict(cls, obj: dict) -> "CaptionRecord":
        try:
            return cls(
                id=obj["id"],
                image_ref=obj["image_ref"],
                domain=ImageDomain.parse(obj["domain"]),
                style=CaptionStyle(StyleVariant(obj["style"]), Language(obj["language"])),
                text=obj["text"],
                parent_id=obj.get("parent_id"),
                producer=obj["producer"],
                prompt_id=obj["prompt_id"],
                created_at=obj["created_at"],
                token_count=int(obj["token_count"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise RecordParseError(f"malformed caption record: {exc}") from exc

    @classmethod
    def from_json_line(cls, line: str) -> "CaptionRecord":
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordParseError(f"invalid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise RecordParseError("record line is not a JSON object")
        return cls.from_json_dict(obj)


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, message: str) -> None:
        self.violations.append(Violation(code, message))

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


_HEX64_RE = re.compile(r"^[0-9a-f]{64}$")


def validate_record(record: CaptionRecord) -> ValidationReport:
    """Validation never throws; every violated invariant lands in the report.

    Lineage-level rules (acyclicity, tags/zh gating) need the surrounding
    corpus and live in validate_lineage.
    """
    report = ValidationReport()
    if not _HEX64_RE.match(record.id):
        report.add("id_format", "id is not 64 lowercase hex chars")
    if not record.image_ref:
        report.add("image_ref_empty", "image_ref is empty")
    is_seed_detailed = (
        record.style.variant is StyleVariant.DETAILED and record.style.language is Language.EN
    )
    if is_seed_detailed and record.parent_id is not None:
        report.add("parent_forbidden", "seed caption must not have a parent")
    derived = record.style.variant in (StyleVariant.MEDIUM, StyleVariant.SHORT, StyleVariant.TAGS) or (
        record.style.variant is StyleVariant.DETAILED and record.style.language is Language.ZH
    )
    if derived and record.parent_id is None:
        report.add("parent_required", "derived style requires parent")
    if record.style.variant is StyleVariant.COT_ANALYSIS and record.domain not in CODE_RULE:
        report.add("cot_domain", "cot_analysis is valid only for code-rule domains")
    if record.token_count != count_tokens(record.text):
        report.add("token_count_mismatch", "token_count mismatch")
    if not is_rfc3339(record.created_at):
        report.add("created_at_format", "created_at is not RFC 3339 UTC seconds")
    if not record.producer:
        report.add("producer_empty", "producer is empty")
    if not record.prompt_id:
        report.add("prompt_id_empty", "prompt_id is empty")
    return report


MAX_LINEAGE_HOPS = 4


def validate_lineage(records: Iterable[CaptionRecord]) -> ValidationReport:
    """Corpus-level checks: parents resolve, chains are short and acyclic,
    and (tags, zh) only appears where a zh detailed caption exists upstream."""
    by_id = {r.id: r for r in records}
    report = ValidationReport()
    for rec in by_id.values():
        seen = {rec.id}
        cur = rec
        hops = 0
        while cur.parent_id is not None:
            parent = by_id.get(cur.parent_id)
            if parent is None:
                report.add("parent_missing", f"{rec.id}: parent {cur.parent_id} not in corpus")
                break
            if parent.id in seen:
                report.add("lineage_cycle", f"{rec.id}: cycle via {parent.id}")
                break
            seen.add(parent.id)
            cur = parent
            hops += 1
            if hops > MAX_LINEAGE_HOPS:
                report.add("lineage_too_deep", f"{rec.id}: more than {MAX_LINEAGE_HOPS} hops to seed")
                break
        else:
            if cur.style.variant not in (StyleVariant.DETAILED, StyleVariant.COT_ANALYSIS):
                report.add("lineage_root", f"{rec.id}: chain ends at non-seed {cur.style.key()}")
            if (
                rec.style.variant is StyleVariant.TAGS
                and rec.style.language is Language.ZH
            ):
                chain_styles = set()
                walk: Optional[CaptionRecord] = by_id.get(rec.parent_id or "")
                while walk is not None:
                    chain_styles.add(walk.style.key())
                    walk = by_id.get(walk.parent_id) if walk.parent_id else None
                if "detailed/zh" not in chain_styles:
                    report.add("tags_zh_lineage", f"{rec.id}: zh tags without zh detailed in lineage")
    return report


@dataclass(frozen=True)
class SeedArtifact:
    """A synthesized structured image plus its exact source representation.

    Regenerating from (spec, rng_seed) must reproduce image, source_code and
    seed_description byte for byte; seed_description embeds source_code
    verbatim.
    """

    domain: ImageDomain
    spec_digest: str
    image: str  # SVG document
    source_code: str
    seed_description: str
    rng_seed: int
    markdown: Optional[str] = None  # secondary rendering (tables carry one)

    def __post_init__(self) -> None:
        if self.domain not in CODE_RULE:
            raise ValueError(f"seed artifacts are code-rule only, got {self.domain.value}")
        if self.source_code not in self.seed_description:
            raise ValueError("seed_description must embed source_code verbatim")

    def image_digest(self) -> str:
        return content_digest(self.image.encode("utf-8"))

    def to_json_dict(self) -> dict:
        return {
            "domain": self.domain.value,
            "spec_digest": self.spec_digest,
            "image": self.image,
            "source_code": self.source_code,
            "seed_description": self.seed_description,
            "rng_seed": self.rng_seed,
            "markdown": self.markdown,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SeedArtifact":
        return cls(
            domain=ImageDomain.parse(obj["domain"]),
            spec_digest=obj["spec_digest"],
            image=obj["image"],
            source_code=obj["source_code"],
            seed_description=obj["seed_description"],
            rng_seed=int(obj["rng_seed"]),
            markdown=obj.get("markdown"),
        )


@dataclass(frozen=True)
class ManifestInput:
    image_ref: str
    domain: ImageDomain


@dataclass(frozen=True)
class JobManifest:
    job_id: str
    inputs: tuple[ManifestInput, ...]
    styles: tuple[CaptionStyle, ...]
    bindings: dict  # stage name -> binding name; resolved against config
    shard_prefix: str
    resume: bool = True
    cot_without_seed: bool = False

    def __post_init__(self) -> None:
        if not self.shard_prefix:
            raise ValueError("shard prefix must be non-empty")
        seen = set()
        deduped = []
        for item in self.inputs:
            key = (item.image_ref, item.domain)
            if key in seen:
                continue
            seen.add(key)
            deduped.append(item)
        object.__setattr__(self, "inputs", tuple(deduped))

    @classmethod
    def from_json_dict(cls, obj: dict) -> "JobManifest":
        return cls(
            job_id=obj["job_id"],
            inputs=tuple(
                ManifestInput(i["image_ref"], ImageDomain.parse(i["domain"]))
                for i in obj["inputs"]
            ),
            styles=tuple(CaptionStyle.parse(s) for s in obj["styles"]),
            bindings=dict(obj.get("bindings", {})),
            shard_prefix=obj.get("shard_prefix", "shards"),
            resume=bool(obj.get("resume", True)),
            cot_without_seed=bool(obj.get("cot_without_seed", False)),
        )


def write_records_jsonl(path, records: Iterable[CaptionRecord]) -> int:
    n = 0
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json_line() + "\n")
            n += 1
    return n


def read_records_jsonl(path) -> Iterator[CaptionRecord]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield CaptionRecord.from_json_line(line)
