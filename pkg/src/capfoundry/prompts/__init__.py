"""Prompt registry: packaged prompt texts, slot templates, and routing tables.

Three namespaces ship with the package. annotate/* holds the generation
prompts sent to live annotator backends (stage 1 seed prompts keyed by domain
plus the stage 2 extension prompts keyed by kind). system/* holds the short
per-(domain, style) system prompts a trained captioner is queried with;
these are transcribed from a figure, so no byte-fidelity claim is made for
them. coderule/* holds the fixed preamble lines the synthesizer uses when
composing seed descriptions for structured images.

Each prompt is one UTF-8 file under data/, pinned by SHA-256 in
data/manifest.json. The registry verifies digests at load and refuses to
start on a mismatch; there is no dynamic registration at runtime.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Optional

from capfoundry.records import CODE_RULE, CaptionStyle, ImageDomain, Language, StyleVariant


class UnknownCombination(KeyError):
    """No prompt is registered for this (domain, style); callers must not
    fall back to a generic prompt silently."""


class UnknownPromptId(KeyError):
    pass


class MissingSlot(ValueError):
    pass


class ExtraSlot(ValueError):
    pass


class DuplicatePromptId(ValueError):
    pass


class PromptIntegrityError(RuntimeError):
    """Packaged prompt bytes do not match the manifest digest."""


# The only slot names templates may declare.
ALLOWED_SLOTS = frozenset({"caption", "Latex", "markdown", "camera_caption_only"})

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


def scan_placeholders(body: str) -> frozenset[str]:
    """Identifier-shaped single-brace placeholders, with doubled braces
    treated as escaped literals. Non-identifier brace runs are plain text."""
    masked = body.replace("{{", "\x00").replace("}}", "\x01")
    return frozenset(_PLACEHOLDER_RE.findall(masked))


@dataclass(frozen=True)
class PromptTemplate:
    prompt_id: str
    body: str
    slots: frozenset[str]
    provenance: str

    def __post_init__(self) -> None:
        found = scan_placeholders(self.body)
        if found != self.slots:
            raise ValueError(
                f"{self.prompt_id}: declared slots {sorted(self.slots)} != "
                f"scanned placeholders {sorted(found)}"
            )
        if not self.slots <= ALLOWED_SLOTS:
            raise ValueError(f"{self.prompt_id}: slots outside allowed set: {sorted(self.slots - ALLOWED_SLOTS)}")


def render(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Substitute every declared slot; abort on any binding mismatch.

    Only declared "{name}" spans and doubled-brace escapes are touched;
    every other byte passes through unchanged.
    """
    extra = set(bindings) - set(template.slots)
    if extra:
        raise ExtraSlot(f"{template.prompt_id}: bindings for undeclared slots {sorted(extra)}")
    missing = set(template.slots) - set(bindings)
    if missing:
        raise MissingSlot(f"{template.prompt_id}: unbound slots {sorted(missing)}")
    body = template.body
    out: list[str] = []
    i = 0
    n = len(body)
    while i < n:
        ch = body[i]
        if ch == "{" and i + 1 < n and body[i + 1] == "{":
            out.append("{")
            i += 2
        elif ch == "}" and i + 1 < n and body[i + 1] == "}":
            out.append("}")
            i += 2
        elif ch == "{":
            m = _PLACEHOLDER_RE.match(body, i)
            if m and m.group(1) in template.slots:
                out.append(bindings[m.group(1)])
                i = m.end()
            else:
                out.append(ch)
                i += 1
        else:
            out.append(ch)
            i += 1
    return "".join(out)


class Registry:
    """Immutable prompt store; all registration happens during load."""

    def __init__(self) -> None:
        self._templates: dict[str, PromptTemplate] = {}
        self._manifest_digest: Optional[str] = None

    def _register(self, template: PromptTemplate) -> None:
        if template.prompt_id in self._templates:
            raise DuplicatePromptId(template.prompt_id)
        self._templates[template.prompt_id] = template

    def get(self, prompt_id: str) -> PromptTemplate:
        try:
            return self._templates[prompt_id]
        except KeyError:
            raise UnknownPromptId(prompt_id) from None

    def prompt_ids(self) -> list[str]:
        return sorted(self._templates)

    @property
    def manifest_digest(self) -> str:
        assert self._manifest_digest is not None
        return self._manifest_digest


# Routing tables. Keys are (domain, style.key()); values are prompt ids.
# annotate/* covers exactly the five backend-VLM domains at stage 1; all
# stage 1 seed prompting happens in English at the detailed level.
ANNOTATE_ROUTING: dict[tuple[ImageDomain, str], str] = {
    (ImageDomain.NATURAL, "detailed/en"): "annotate/natural",
    (ImageDomain.POSTER, "detailed/en"): "annotate/poster",
    (ImageDomain.UI, "detailed/en"): "annotate/ui",
    (ImageDomain.PDF, "detailed/en"): "annotate/pdf",
    (ImageDomain.VIDEO, "detailed/en"): "annotate/video",
}

SYSTEM_ROUTING: dict[tuple[ImageDomain, str], str] = {}
for _variant in ("detailed", "medium", "short", "tags"):
    for _lang in ("en", "zh"):
        SYSTEM_ROUTING[(ImageDomain.NATURAL, f"{_variant}/{_lang}")] = f"system/natural_{_variant}_{_lang}"
for _domain in (ImageDomain.POSTER, ImageDomain.UI, ImageDomain.PDF):
    for _lang in ("en", "zh"):
        SYSTEM_ROUTING[(_domain, f"detailed/{_lang}")] = f"system/{_domain.value}_detailed_{_lang}"
SYSTEM_ROUTING[(ImageDomain.VIDEO, "detailed/en")] = "system/video_detailed_en"
for _domain in (ImageDomain.TABLE, ImageDomain.CHART, ImageDomain.EQUATION, ImageDomain.GEOMETRY):
    SYSTEM_ROUTING[(_domain, "detailed/en")] = f"system/{_domain.value}_detailed_en"
    SYSTEM_ROUTING[(_domain, "cot_analysis/en")] = f"system/{_domain.value}_cot_analysis_en"

EXTENSION_KINDS = ("medium", "short", "tags", "translate_zh", "cot_table", "cot_equation", "cot_chart")

# Slot sets the extension prompts are contractually bound to.
EXTENSION_SLOTS: dict[str, frozenset[str]] = {
    "medium": frozenset({"caption"}),
    "short": frozenset({"caption"}),
    "tags": frozenset({"caption"}),
    "translate_zh": frozenset({"caption"}),
    "cot_table": frozenset({"Latex"}),
    "cot_equation": frozenset({"Latex"}),
    "cot_chart": frozenset({"markdown"}),
}


def load_packaged_registry() -> Registry:
    """Read data/manifest.json, verify every file digest, build the registry."""
    registry = Registry()
    root = resources.files("capfoundry.prompts") / "data"
    manifest_bytes = (root / "manifest.json").read_bytes()
    registry._manifest_digest = hashlib.sha256(manifest_bytes).hexdigest()
    manifest = json.loads(manifest_bytes)
    for prompt_id, entry in manifest["prompts"].items():
        raw = (root / entry["file"]).read_bytes()
        digest = hashlib.sha256(raw).hexdigest()
        if digest != entry["sha256"]:
            raise PromptIntegrityError(
                f"{prompt_id}: file {entry['file']} digest {digest} != manifest {entry['sha256']}"
            )
        body = raw.decode("utf-8")
        registry._register(
            PromptTemplate(
                prompt_id=prompt_id,
                body=body,
                slots=scan_placeholders(body),
                provenance=entry["provenance"],
            )
        )
    return registry


_registry: Optional[Registry] = None


def get_registry() -> Registry:
    global _registry
    if _registry is None:
        _registry = load_packaged_registry()
    return _registry


def manifest_digest() -> str:
    return get_registry().manifest_digest


def get_system_prompt(
    domain: ImageDomain, style: CaptionStyle, namespace: str = "annotate"
) -> PromptTemplate:
    """Prompt for captioning an image of `domain` in `style`.

    namespace "annotate" routes to the live-annotator prompts (stage 1);
    "system" routes to the trained-captioner system prompts.
    """
    if namespace == "annotate":
        table = ANNOTATE_ROUTING
    elif namespace == "system":
        table = SYSTEM_ROUTING
    else:
        raise UnknownCombination(f"unknown namespace {namespace!r}")
    prompt_id = table.get((domain, style.key()))
    if prompt_id is None:
        raise UnknownCombination(f"no {namespace} prompt for ({domain.value}, {style.key()})")
    return get_registry().get(prompt_id)


def get_extension_prompt(kind: str) -> PromptTemplate:
    if kind not in EXTENSION_KINDS:
        raise UnknownCombination(f"unknown extension kind {kind!r}")
    return get_registry().get(f"annotate/{kind}")


def get_seed_template(domain: ImageDomain) -> PromptTemplate:
    """Fixed preamble the synthesizer puts in front of a seed's source code."""
    if domain not in CODE_RULE:
        raise UnknownCombination(f"no code-rule seed template for {domain.value}")
    return get_registry().get(f"coderule/{domain.value}")


def style_for_extension(kind: str) -> CaptionStyle:
    """The style a given extension kind produces."""
    mapping = {
        "medium": CaptionStyle(StyleVariant.MEDIUM, Language.EN),
        "short": CaptionStyle(StyleVariant.SHORT, Language.EN),
        "tags": CaptionStyle(StyleVariant.TAGS, Language.EN),
        "translate_zh": CaptionStyle(StyleVariant.DETAILED, Language.ZH),
        "cot_table": CaptionStyle(StyleVariant.COT_ANALYSIS, Language.EN),
        "cot_equation": CaptionStyle(StyleVariant.COT_ANALYSIS, Language.EN),
        "cot_chart": CaptionStyle(StyleVariant.COT_ANALYSIS, Language.EN),
    }
    if kind not in mapping:
        raise UnknownCombination(f"unknown extension kind {kind!r}")
    return mapping[kind]
