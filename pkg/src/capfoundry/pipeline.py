"""Two-stage caption pipeline over a JobManifest.

Stage 1 produces one detailed/en seed record per input: backend-VLM domains
go through the gateway with the domain's annotation prompt; code-rule
domains are described deterministically from their stored spec, no backend
involved. Stage 2 derives further styles from the seed along a fixed chain:
medium summarizes detailed, short summarizes medium, tags and the zh
translation come straight from detailed, and structured domains get a CoT
analysis that sees both the rendered image and the source code.

Output is sharded JSONL under <out_dir>/<job_id>/ with a SHA-256 sidecar
per shard, an errors sidecar, and a report.json. Records are content
addressed, so a rerun over the same manifest skips everything that already
exists in the shards: zero backend traffic, zero duplicate lines.

Per-item failures never abort a batch; they are written to the errors
sidecar and counted. The only batch-level abort is a shard whose bytes no
longer match its checksum sidecar.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from capfoundry.gateway import BackendBinding, Gateway
from capfoundry.prompts import (
    ANNOTATE_ROUTING,
    UnknownCombination,
    get_extension_prompt,
    get_system_prompt,
    render,
    style_for_extension,
)
from capfoundry.records import (
    BACKEND_VLM,
    CODE_RULE,
    CaptionRecord,
    CaptionStyle,
    ImageDomain,
    JobManifest,
    Language,
    ManifestInput,
    SeedArtifact,
    StyleVariant,
    compute_record_id,
    content_digest,
    count_tokens,
    now_rfc3339,
)

__all__ = [
    "SHARD_SIZE",
    "CODE_RULE_PRODUCER",
    "STAGE1_SYSTEM",
    "ChainBroken",
    "MissingImage",
    "PipelineError",
    "ShardCorrupt",
    "ItemError",
    "PlanStep",
    "RunReport",
    "Pipeline",
    "ShardWriter",
    "export_t2i",
    "load_artifact_file",
    "plan_extension",
    "read_shard_records",
]

log = logging.getLogger(__name__)

SHARD_SIZE = 10_000
CODE_RULE_PRODUCER = "code-rule"

# Fixed system line for gateway calls that carry an image. The task itself
# lives in the registry prompt placed in the user message; this line only
# sets the role and is deliberately domain-free.
STAGE1_SYSTEM = "You are a meticulous visual annotation assistant. Follow the instruction exactly."


class PipelineError(Exception):
    pass


class ShardCorrupt(PipelineError):
    """Shard bytes do not match the checksum sidecar."""


class ChainBroken(PipelineError):
    """An extension's parent record is unavailable."""


class MissingImage(PipelineError):
    pass


# --------------------------------------------------------------------------
# Extension planning

# kind -> style of the record the extension reads from.
_PARENT_STYLE = {
    "medium": CaptionStyle(StyleVariant.DETAILED, Language.EN),
    "short": CaptionStyle(StyleVariant.MEDIUM, Language.EN),
    "tags": CaptionStyle(StyleVariant.DETAILED, Language.EN),
    "translate_zh": CaptionStyle(StyleVariant.DETAILED, Language.EN),
    "cot_table": CaptionStyle(StyleVariant.DETAILED, Language.EN),
    "cot_equation": CaptionStyle(StyleVariant.DETAILED, Language.EN),
    "cot_chart": CaptionStyle(StyleVariant.DETAILED, Language.EN),
}

_COT_KIND_BY_DOMAIN = {
    ImageDomain.TABLE: "cot_table",
    ImageDomain.EQUATION: "cot_equation",
    ImageDomain.CHART: "cot_chart",
}

# Emission order: a parent always precedes its dependents.
_KIND_ORDER = ("medium", "short", "tags", "translate_zh", "cot_table", "cot_equation", "cot_chart")


@dataclass(frozen=True)
class PlanStep:
    kind: str
    parent_style: CaptionStyle
    implied: bool = False

    @property
    def style(self) -> CaptionStyle:
        return style_for_extension(self.kind)


def plan_extension(
    domain: ImageDomain, requested: Sequence[CaptionStyle], strict: bool = True
) -> list[PlanStep]:
    """Resolve requested styles into ordered extension steps for one seed.

    detailed/en is the seed itself and planning ignores it. short without
    medium auto-inserts a medium step flagged implied, since short is always
    a summary of the medium caption. zh is derived from the detailed English
    caption only, so any other zh style is rejected. cot_analysis maps to
    the domain's CoT kind; geometry has no CoT prompt and always rejects it.
    With strict=False (manifest runs, where one style list spans many
    domains) cot_analysis is silently dropped for backend-VLM domains, which
    were never CoT targets, instead of raising.
    """
    kinds: dict[str, bool] = {}  # kind -> implied
    for style in requested:
        key = (style.variant, style.language)
        if key == (StyleVariant.DETAILED, Language.EN):
            continue
        if key == (StyleVariant.DETAILED, Language.ZH):
            kind = "translate_zh"
        elif key == (StyleVariant.MEDIUM, Language.EN):
            kind = "medium"
        elif key == (StyleVariant.SHORT, Language.EN):
            kind = "short"
        elif key == (StyleVariant.TAGS, Language.EN):
            kind = "tags"
        elif key == (StyleVariant.COT_ANALYSIS, Language.EN):
            kind = _COT_KIND_BY_DOMAIN.get(domain)
            if kind is None:
                if not strict and domain in BACKEND_VLM:
                    continue
                raise UnknownCombination(f"no CoT extension for domain {domain.value}")
        else:
            raise UnknownCombination(f"no extension produces style {style.key()}")
        kinds[kind] = False
    if "short" in kinds and "medium" not in kinds:
        kinds["medium"] = True
    return [
        PlanStep(kind=k, parent_style=_PARENT_STYLE[k], implied=kinds[k])
        for k in _KIND_ORDER
        if k in kinds
    ]


# --------------------------------------------------------------------------
# Sharded output with checksum sidecars


def _sidecar_path(shard_path: Path) -> Path:
    return shard_path.with_name(shard_path.name + ".sha256")


def _verify_shard(shard_path: Path) -> None:
    sidecar = _sidecar_path(shard_path)
    if not sidecar.exists():
        raise ShardCorrupt(f"{shard_path.name}: checksum sidecar missing")
    want = sidecar.read_text(encoding="utf-8").strip()
    got = hashlib.sha256(shard_path.read_bytes()).hexdigest()
    if got != want:
        raise ShardCorrupt(f"{shard_path.name}: sha256 {got} != sidecar {want}")


def read_shard_records(run_dir: str | Path, prefix: str) -> list[CaptionRecord]:
    """Load and checksum-verify every existing shard for a prefix."""
    run_dir = Path(run_dir)
    records: list[CaptionRecord] = []
    for shard_path in sorted(run_dir.glob(f"{prefix}-[0-9][0-9][0-9][0-9][0-9].jsonl")):
        _verify_shard(shard_path)
        with open(shard_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(CaptionRecord.from_json_line(line))
    return records


class ShardWriter:
    """Append-only JSONL shards of at most shard_size lines each.

    Every append updates the shard's .sha256 sidecar, so readers can always
    verify the last fully written state; a torn write surfaces as a
    checksum mismatch on the next resume. Appends are serialized.
    """

    def __init__(self, run_dir: str | Path, prefix: str, shard_size: int = SHARD_SIZE):
        if shard_size < 1:
            raise ValueError("shard_size must be >= 1")
        self.run_dir = Path(run_dir)
        self.prefix = prefix
        self.shard_size = shard_size
        self._lock = threading.Lock()
        self.paths: list[Path] = sorted(
            self.run_dir.glob(f"{prefix}-[0-9][0-9][0-9][0-9][0-9].jsonl")
        )
        for path in self.paths:
            _verify_shard(path)
        if self.paths:
            last = self.paths[-1]
            self._index = int(re.search(r"-(\d{5})\.jsonl$", last.name).group(1))
            with open(last, "rb") as fh:
                data = fh.read()
            self._lines = data.count(b"\n")
            self._hasher = hashlib.sha256(data)
        else:
            self._index = 0
            self._lines = 0
            self._hasher = hashlib.sha256()

    def _shard_path(self) -> Path:
        return self.run_dir / f"{self.prefix}-{self._index:05d}.jsonl"

    def append_line(self, line: str) -> None:
        with self._lock:
            if self._lines >= self.shard_size:
                self._index += 1
                self._lines = 0
                self._hasher = hashlib.sha256()
            path = self._shard_path()
            data = (line + "\n").encode("utf-8")
            with open(path, "ab") as fh:
                fh.write(data)
            self._hasher.update(data)
            self._lines += 1
            _sidecar_path(path).write_text(self._hasher.copy().hexdigest() + "\n", encoding="utf-8")
            if path not in self.paths:
                self.paths.append(path)

    def append_record(self, record: CaptionRecord) -> None:
        self.append_line(record.to_json_line())


# --------------------------------------------------------------------------
# Run bookkeeping


@dataclass
class ItemError:
    image_ref: str
    domain: ImageDomain
    stage: str  # "load" | "seed" | extension kind
    error: str  # exception class name
    message: str
    created_at: str

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "image_ref": self.image_ref,
                "domain": self.domain.value,
                "stage": self.stage,
                "error": self.error,
                "message": self.message,
                "created_at": self.created_at,
            },
            ensure_ascii=False,
            separators=(",", ":"),
        )


@dataclass
class RunReport:
    job_id: str
    inputs: int = 0
    cached: int = 0
    generated: int = 0
    failed: int = 0
    implied_medium: int = 0
    cot_without_seed: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    # Counter updates arrive from worker threads; aggregation is commutative
    # so only atomicity matters, not order.
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, name: str, n: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + n)

    def merge_usage(self, usage) -> None:
        with self._lock:
            self.prompt_tokens += usage.prompt_tokens
            self.completion_tokens += usage.completion_tokens

    def to_json_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "inputs": self.inputs,
            "cached": self.cached,
            "generated": self.generated,
            "failed": self.failed,
            "implied_medium": self.implied_medium,
            "cot_without_seed": self.cot_without_seed,
            "usage": {
                "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens,
            },
        }


def load_artifact_file(path: str | Path) -> SeedArtifact:
    """Load a code-rule input: either a stored SeedArtifact JSON or a spec
    JSON (with a "kind" field) that regenerates one deterministically."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if "kind" in obj:
        from capfoundry.synth.corpus import artifact_from_spec_obj

        return artifact_from_spec_obj(obj)
    return SeedArtifact.from_json_dict(obj)


def _read_file_bytes(path: str | Path) -> bytes:
    return Path(path).read_bytes()


# --------------------------------------------------------------------------
# Pipeline


class Pipeline:
    """Binds a gateway and resolved backends to the two pipeline stages.

    manifest.bindings maps stage names to binding names: "stage1" for seed
    captioning, "stage2" for extensions (defaulting to stage1's backend
    when absent). Code-rule seeds never touch a backend.
    """

    def __init__(
        self,
        gateway: Gateway,
        bindings: dict[str, BackendBinding],
        image_loader: Callable[[str], bytes] = _read_file_bytes,
        artifact_loader: Callable[[str], SeedArtifact] = load_artifact_file,
        clock: Callable[[], str] = now_rfc3339,
    ):
        self.gateway = gateway
        self.bindings = bindings
        self.image_loader = image_loader
        self.artifact_loader = artifact_loader
        self.clock = clock

    # -- binding resolution --

    def _binding(self, manifest: JobManifest, stage: str) -> BackendBinding:
        name = manifest.bindings.get(stage)
        if name is None and stage == "stage2":
            name = manifest.bindings.get("stage1")
        if name is None:
            raise PipelineError(f"manifest binds no backend for {stage}")
        try:
            return self.bindings[name]
        except KeyError:
            raise PipelineError(f"unknown binding {name!r} for {stage}") from None

    # -- record constructors --

    def _record(
        self,
        *,
        image_ref: str,
        image_digest: str,
        domain: ImageDomain,
        style: CaptionStyle,
        text: str,
        parent_id: Optional[str],
        producer: str,
        prompt_id: str,
    ) -> CaptionRecord:
        return CaptionRecord(
            id=compute_record_id(image_digest, domain, style, prompt_id, producer),
            image_ref=image_ref,
            domain=domain,
            style=style,
            text=text,
            parent_id=parent_id,
            producer=producer,
            prompt_id=prompt_id,
            created_at=self.clock(),
            token_count=count_tokens(text),
        )

    # -- stage 1 --

    def seed_backend_vlm(
        self, item: ManifestInput, image: bytes, binding: BackendBinding, report: Optional[RunReport] = None
    ) -> CaptionRecord:
        style = CaptionStyle(StyleVariant.DETAILED, Language.EN)
        template = get_system_prompt(item.domain, style, namespace="annotate")
        # Some annotate prompts declare auxiliary slots (e.g. the video
        # prompt's camera caption) whose producers live outside this
        # pipeline; they are blanked rather than left unbound.
        bindings: dict[str, str] = {}
        for slot in template.slots:
            bindings[slot] = ""
            log.warning("%s: slot {%s} unsupplied, binding empty string", template.prompt_id, slot)
        response = self.gateway.caption_image(
            binding, system=STAGE1_SYSTEM, user=render(template, bindings), image=image
        )
        if report is not None:
            report.merge_usage(response.usage)
        return self._record(
            image_ref=item.image_ref,
            image_digest=content_digest(image),
            domain=item.domain,
            style=style,
            text=response.text,
            parent_id=None,
            producer=binding.model,
            prompt_id=template.prompt_id,
        )

    def seed_code_rule(self, item: ManifestInput, artifact: SeedArtifact) -> CaptionRecord:
        if artifact.domain != item.domain:
            raise PipelineError(
                f"artifact domain {artifact.domain.value} != input domain {item.domain.value}"
            )
        style = CaptionStyle(StyleVariant.DETAILED, Language.EN)
        return self._record(
            image_ref=item.image_ref,
            image_digest=artifact.image_digest(),
            domain=item.domain,
            style=style,
            text=artifact.seed_description,
            parent_id=None,
            producer=CODE_RULE_PRODUCER,
            prompt_id=f"coderule/{item.domain.value}",
        )

    def stage1_seed(self, manifest: JobManifest, errors: Optional[list] = None) -> list[CaptionRecord]:
        """Seed every input; per-item failures go to `errors` when given."""
        records = []
        for item in manifest.inputs:
            try:
                records.append(self._seed_item(manifest, item))
            except Exception as exc:
                if errors is None:
                    raise
                errors.append(self._item_error(item, "seed", exc))
        return records

    def _seed_item(self, manifest: JobManifest, item: ManifestInput) -> CaptionRecord:
        if item.domain in BACKEND_VLM:
            image = self.image_loader(item.image_ref)
            return self.seed_backend_vlm(item, image, self._binding(manifest, "stage1"))
        artifact = self.artifact_loader(item.image_ref)
        return self.seed_code_rule(item, artifact)

    # -- stage 2 --

    def _cot_bindings(self, kind: str, artifact: Optional[SeedArtifact]) -> dict:
        source = artifact.source_code if artifact is not None else ""
        slot = "markdown" if kind == "cot_chart" else "Latex"
        return {slot: source}

    def extend_one(
        self,
        seed: CaptionRecord,
        parent: CaptionRecord,
        step: PlanStep,
        binding: BackendBinding,
        artifact: Optional[SeedArtifact] = None,
        image: Optional[bytes] = None,
        report: Optional[RunReport] = None,
    ) -> CaptionRecord:
        """Run one extension step off an existing parent record.

        Text extensions bind the parent caption into the prompt's {caption}
        slot and run without an image. CoT extensions re-attach the rendered
        image and bind the seed's source code into the prompt's source slot.
        """
        template = get_extension_prompt(step.kind)
        if step.kind.startswith("cot_"):
            user = render(template, self._cot_bindings(step.kind, artifact))
            if image is None:
                image = (artifact.image if artifact is not None else "").encode("utf-8")
            response = self.gateway.caption_image(
                binding, system=STAGE1_SYSTEM, user=user, image=image
            )
        else:
            user = render(template, {"caption": parent.text})
            response = self.gateway.complete_text(binding, system=None, user=user)
        if report is not None:
            report.merge_usage(response.usage)
        # Extensions describe the same image as the seed, so they inherit its
        # digest component by construction: id differs only in style/prompt.
        return self._record(
            image_ref=seed.image_ref,
            image_digest=self._seed_digest(seed),
            domain=seed.domain,
            style=step.style,
            text=response.text,
            parent_id=parent.id,
            producer=binding.model,
            prompt_id=template.prompt_id,
        )

    def _seed_digest(self, seed: CaptionRecord) -> str:
        # The image digest is not a record field; recover it from the loader
        # so extension ids stay aligned with the seed's content address.
        if seed.domain in BACKEND_VLM:
            return content_digest(self.image_loader(seed.image_ref))
        return self.artifact_loader(seed.image_ref).image_digest()

    def stage2_extend(
        self,
        seed: CaptionRecord,
        requested: Sequence[CaptionStyle],
        binding: BackendBinding,
        artifact: Optional[SeedArtifact] = None,
        errors: Optional[list] = None,
    ) -> list[CaptionRecord]:
        """Extend one seed into the requested styles (chain-ordered).

        The returned list includes any auto-inserted implied medium record.
        A failed step marks its dependents ChainBroken instead of running
        them against a missing parent.
        """
        if seed.style != CaptionStyle(StyleVariant.DETAILED, Language.EN):
            raise ChainBroken(f"extensions start from detailed/en, got {seed.style.key()}")
        plan = plan_extension(seed.domain, requested)
        if any(s.kind.startswith("cot_") for s in plan) and artifact is None:
            if seed.domain in CODE_RULE:
                artifact = self.artifact_loader(seed.image_ref)
        by_style: dict[str, CaptionRecord] = {seed.style.key(): seed}
        out: list[CaptionRecord] = []
        for step in plan:
            parent = by_style.get(step.parent_style.key())
            try:
                if parent is None:
                    raise ChainBroken(
                        f"{step.kind}: parent {step.parent_style.key()} unavailable"
                    )
                record = self.extend_one(seed, parent, step, binding, artifact=artifact)
            except Exception as exc:
                if errors is None:
                    raise
                errors.append(self._error_for_seed(seed, step.kind, exc))
                continue
            by_style[record.style.key()] = record
            out.append(record)
        return out

    # -- full runs --

    def run_manifest(
        self,
        manifest: JobManifest,
        out_dir: str | Path,
        shard_size: int = SHARD_SIZE,
        max_workers: int = 4,
    ) -> RunReport:
        """Run both stages over a manifest with resumable sharded output.

        Existing shards are checksum-verified and loaded; any planned record
        whose content-addressed id is already present is counted as cached
        and skipped, including its backend call. Items run on a small thread
        pool; shard appends are serialized by the writer.
        """
        run_dir = Path(out_dir) / manifest.job_id
        os.makedirs(run_dir, exist_ok=True)
        report = RunReport(job_id=manifest.job_id, inputs=len(manifest.inputs))

        existing: dict[str, CaptionRecord] = {}
        if manifest.resume:
            for record in read_shard_records(run_dir, manifest.shard_prefix):
                existing[record.id] = record
        writer = ShardWriter(run_dir, manifest.shard_prefix, shard_size)
        error_writer = ShardWriter(run_dir, "errors", shard_size)
        lock = threading.Lock()

        def handle_item(item: ManifestInput) -> None:
            self._run_item(manifest, item, existing, writer, error_writer, report, lock)

        if max_workers <= 1 or len(manifest.inputs) <= 1:
            for item in manifest.inputs:
                handle_item(item)
        else:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                list(pool.map(handle_item, manifest.inputs))

        report_path = run_dir / "report.json"
        report_path.write_text(
            json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        return report

    def _run_item(
        self,
        manifest: JobManifest,
        item: ManifestInput,
        existing: dict,
        writer: ShardWriter,
        error_writer: ShardWriter,
        report: RunReport,
        lock: threading.Lock,
    ) -> None:
        def fail(stage: str, exc: Exception) -> None:
            entry = self._item_error(item, stage, exc)
            report.bump("failed")
            error_writer.append_line(entry.to_json_line())

        def emit(record: CaptionRecord) -> None:
            with lock:
                existing[record.id] = record
            report.bump("generated")
            writer.append_record(record)

        # Load the input once; everything downstream is derived from it.
        image: Optional[bytes] = None
        artifact: Optional[SeedArtifact] = None
        try:
            if item.domain in BACKEND_VLM:
                image = self.image_loader(item.image_ref)
                image_digest = content_digest(image)
            else:
                artifact = self.artifact_loader(item.image_ref)
                image_digest = artifact.image_digest()
        except Exception as exc:
            fail("load", exc)
            return

        # A plan failure (styles invalid for this domain) is recorded but
        # does not block the seed, which depends only on the input itself.
        plan: list[PlanStep] = []
        try:
            plan = plan_extension(item.domain, manifest.styles, strict=False)
        except Exception as exc:
            fail("plan", exc)

        if manifest.cot_without_seed and item.domain in CODE_RULE:
            # Directly-input structured image: no seed record; CoT runs with
            # an empty source slot, text extensions have nothing to read.
            if plan:
                self._run_cot_without_seed(
                    manifest, item, image_digest, artifact, plan, existing, emit, fail, report, lock
                )
            return

        detailed = CaptionStyle(StyleVariant.DETAILED, Language.EN)
        if item.domain in BACKEND_VLM:
            binding = self._binding(manifest, "stage1")
            seed_producer = binding.model
            seed_prompt = ANNOTATE_ROUTING[(item.domain, detailed.key())]
        else:
            seed_producer = CODE_RULE_PRODUCER
            seed_prompt = f"coderule/{item.domain.value}"
        seed_id = compute_record_id(image_digest, item.domain, detailed, seed_prompt, seed_producer)

        with lock:
            seed = existing.get(seed_id)
        if seed is not None:
            report.bump("cached")
        else:
            try:
                if item.domain in BACKEND_VLM:
                    seed = self.seed_backend_vlm(item, image, binding, report=report)
                else:
                    seed = self.seed_code_rule(item, artifact)
            except Exception as exc:
                fail("seed", exc)
                for step in plan:
                    fail(step.kind, ChainBroken(f"{step.kind}: seed failed"))
                return
            emit(seed)

        if not plan:
            return

        stage2 = self._binding(manifest, "stage2")
        by_style: dict[str, CaptionRecord] = {detailed.key(): seed}
        for step in plan:
            if step.implied:
                report.bump("implied_medium")
            style = step.style
            template = get_extension_prompt(step.kind)
            planned_id = compute_record_id(
                image_digest, item.domain, style, template.prompt_id, stage2.model
            )
            with lock:
                cached = existing.get(planned_id)
            if cached is not None:
                report.bump("cached")
                by_style[style.key()] = cached
                continue
            parent = by_style.get(step.parent_style.key())
            if parent is None:
                fail(step.kind, ChainBroken(f"{step.kind}: parent {step.parent_style.key()} unavailable"))
                continue
            try:
                record = self.extend_one(
                    seed if seed is not None else parent,
                    parent,
                    step,
                    stage2,
                    artifact=artifact,
                    report=report,
                )
            except Exception as exc:
                fail(step.kind, exc)
                continue
            by_style[style.key()] = record
            emit(record)

    def _run_cot_without_seed(
        self, manifest, item, image_digest, artifact, plan, existing, emit, fail, report, lock
    ) -> None:
        # Only the CoT steps apply; text extensions have no seed caption.
        stage2: Optional[BackendBinding] = None
        for step in plan:
            if not step.kind.startswith("cot_"):
                fail(step.kind, ChainBroken(f"{step.kind}: no seed caption (cot_without_seed)"))
                continue
            if stage2 is None:
                try:
                    stage2 = self._binding(manifest, "stage2")
                except Exception as exc:
                    fail(step.kind, exc)
                    continue
            template = get_extension_prompt(step.kind)
            planned_id = compute_record_id(
                image_digest, item.domain, step.style, template.prompt_id, stage2.model
            )
            with lock:
                cached = existing.get(planned_id)
            if cached is not None:
                report.bump("cached")
                continue
            try:
                user = render(template, self._cot_bindings(step.kind, None))
                response = self.gateway.caption_image(
                    stage2,
                    system=STAGE1_SYSTEM,
                    user=user,
                    image=artifact.image.encode("utf-8"),
                )
                record = self._record(
                    image_ref=item.image_ref,
                    image_digest=image_digest,
                    domain=item.domain,
                    style=step.style,
                    text=response.text,
                    parent_id=None,
                    producer=stage2.model,
                    prompt_id=template.prompt_id,
                )
                report.merge_usage(response.usage)
            except Exception as exc:
                fail(step.kind, exc)
                continue
            report.bump("cot_without_seed")
            emit(record)

    # -- error helpers --

    def _item_error(self, item: ManifestInput, stage: str, exc: Exception) -> ItemError:
        return ItemError(
            image_ref=item.image_ref,
            domain=item.domain,
            stage=stage,
            error=type(exc).__name__,
            message=str(exc),
            created_at=self.clock(),
        )

    def _error_for_seed(self, seed: CaptionRecord, stage: str, exc: Exception) -> ItemError:
        return ItemError(
            image_ref=seed.image_ref,
            domain=seed.domain,
            stage=stage,
            error=type(exc).__name__,
            message=str(exc),
            created_at=self.clock(),
        )


# --------------------------------------------------------------------------
# Text-to-image pair export


def export_t2i(
    records: Iterable[CaptionRecord],
    styles: Sequence[CaptionStyle],
    out_path: str | Path,
    check_images: bool = False,
    image_root: Optional[str | Path] = None,
) -> dict:
    """Write (image, caption) training pairs for the requested styles.

    One JSON object {"image", "caption"} per line. Returns a summary with
    per-style pair counts, per-item missing-image entries (when
    check_images is set), and a warning for every requested style that
    matched nothing.
    """
    wanted = {style.key() for style in styles}
    by_style: dict[str, int] = {key: 0 for key in sorted(wanted)}
    missing: list[dict] = []
    pairs = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for record in records:
            key = record.style.key()
            if key not in wanted:
                continue
            if check_images:
                path = Path(image_root) / record.image_ref if image_root else Path(record.image_ref)
                if not path.exists():
                    missing.append({"image_ref": record.image_ref, "error": "MissingImage"})
                    continue
            fh.write(
                json.dumps(
                    {"image": record.image_ref, "caption": record.text},
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
                + "\n"
            )
            by_style[key] += 1
            pairs += 1
    warnings = [f"no records matched style {key}" for key, n in by_style.items() if n == 0]
    return {"pairs": pairs, "by_style": by_style, "missing": missing, "warnings": warnings}
