"""Command-line driver: one entry point over synthesis, captioning, metrics,
caption-bridged reasoning evaluation, export, and the review service.

Exit codes are part of the contract: 0 on success, 1 when a run completed but
recorded per-item failures, 2 on fatal configuration errors (bad flags, bad
config file, unreadable inputs). argparse already exits 2 on unknown flags;
our own pre-run validation maps onto the same code.

Backend bindings come from a JSON config file; flags override config values;
API keys are read from the environment variables the bindings name, never
from flags or the config file itself.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from capfoundry import __version__
from capfoundry.bridge import (
    BridgeError,
    ItemFailure,
    ReasonBridge,
    load_benchmark_items,
    score_benchmark,
)
from capfoundry.gateway import BackendBinding, Gateway
from capfoundry.metrics import MetricError, bleu, capture_lite, corpus_bleu, token_length_stats
from capfoundry.mockserver import MockBackend
from capfoundry.pipeline import (
    Pipeline,
    PipelineError,
    export_t2i,
    plan_extension,
    read_shard_records,
)
from capfoundry.prompts import UnknownCombination, manifest_digest
from capfoundry.records import (
    CODE_RULE,
    CaptionStyle,
    ImageDomain,
    JobManifest,
    Language,
    StyleVariant,
    read_records_jsonl,
)
from capfoundry.synth.corpus import generate_corpus

EXIT_OK = 0
EXIT_ITEM_FAILURES = 1
EXIT_CONFIG = 2

_DETAILED_EN = CaptionStyle(StyleVariant.DETAILED, Language.EN)


class ConfigError(Exception):
    """Anything that prevents a run from starting; maps to exit code 2."""


# --------------------------------------------------------------------------
# Config file


@dataclass(frozen=True)
class RunConfig:
    """Resolved run configuration: named backend bindings plus driver knobs."""

    bindings: dict[str, BackendBinding] = field(default_factory=dict)
    cache_dir: str = "cache"
    max_workers: int = 4

    def binding(self, name: str) -> BackendBinding:
        try:
            return self.bindings[name]
        except KeyError:
            known = ", ".join(sorted(self.bindings)) or "none"
            raise ConfigError(f"unknown binding {name!r}; config defines: {known}") from None


def load_config(
    path: Optional[str],
    cache_dir: Optional[str] = None,
    max_workers: Optional[int] = None,
) -> RunConfig:
    """Read the JSON config file and apply flag overrides.

    Schema: {"bindings": {name: binding fields}, "cache_dir": str,
    "max_workers": int}. A binding entry may omit "name"; the mapping key
    fills it in. No config file at all is legal for offline commands.
    """
    obj: dict = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(obj, dict):
            raise ConfigError(f"config file {path}: top level must be an object")
    bindings: dict[str, BackendBinding] = {}
    for name, spec in obj.get("bindings", {}).items():
        if not isinstance(spec, dict):
            raise ConfigError(f"binding {name!r}: must be an object")
        spec = dict(spec)
        spec.setdefault("name", name)
        try:
            bindings[name] = BackendBinding.from_json_dict(spec)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"binding {name!r}: {exc}") from None
    return RunConfig(
        bindings=bindings,
        cache_dir=cache_dir if cache_dir is not None else obj.get("cache_dir", "cache"),
        max_workers=max_workers if max_workers is not None else int(obj.get("max_workers", 4)),
    )


def _gateway(config: RunConfig, seed: Optional[int], mock: bool = False) -> Gateway:
    # Seeding only pins retry jitter; response content is backend-determined.
    rng = random.Random(seed) if seed is not None else None
    transport = MockBackend().as_transport() if mock else None
    return Gateway(config.cache_dir, transport=transport, rng=rng)


def _with_mock_bindings(config: RunConfig, names) -> RunConfig:
    """Fill in any unresolved binding name with a deterministic mock binding.

    Real config entries win; only names the config does not define are
    synthesized, so --mock runs need no config file at all.
    """
    merged = dict(config.bindings)
    for name in names:
        merged.setdefault(
            name, BackendBinding(name=name, base_url="http://mock.invalid", model=f"mock-{name}")
        )
    return replace(config, bindings=merged)


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required for this command")
    return value


def _parse_styles(spec: str) -> list[CaptionStyle]:
    styles = [CaptionStyle.parse(part.strip()) for part in spec.split(",") if part.strip()]
    if not styles:
        raise ConfigError(f"no styles in {spec!r}")
    return styles


def _load_records(path_str: str, shard_prefix: str):
    """Caption records from either a run directory (sharded) or a JSONL file."""
    path = Path(path_str)
    if path.is_dir():
        return read_shard_records(path, shard_prefix)
    if path.is_file():
        return list(read_records_jsonl(path))
    raise ConfigError(f"records path not found: {path_str}")


# --------------------------------------------------------------------------
# synth


def cmd_synth(args: argparse.Namespace) -> int:
    out = _require(args.out, "--out")
    domain = ImageDomain.parse(args.kind)
    seed = args.seed if args.seed is not None else 0
    items = generate_corpus(out, {domain: args.count}, seed=seed)
    for item in items:
        print(f"{item.domain.value} {item.spec_digest[:12]} {item.svg_path}")
    print(f"wrote {len(items)} artifacts under {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# caption / extend


def _load_manifest(path: str) -> JobManifest:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path}: {exc}") from None
    try:
        return JobManifest.from_json_dict(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"manifest {path}: {exc}") from None


def _apply_stage(manifest: JobManifest, stage: str) -> JobManifest:
    if stage == "seed":
        return replace(manifest, styles=(_DETAILED_EN,))
    if stage == "extend":
        # Extensions assume seeds exist in the run's shards; resume makes the
        # cached seeds visible instead of re-captioning them.
        return replace(manifest, resume=True)
    return manifest


def _print_caption_plan(manifest: JobManifest) -> int:
    """One line per planned step, zero network and zero backend construction."""
    stage1 = manifest.bindings.get("stage1", "(unbound)")
    stage2 = manifest.bindings.get("stage2", stage1)
    calls = 0
    print(f"plan for job {manifest.job_id}: {len(manifest.inputs)} inputs")
    for item in manifest.inputs:
        tag = f"{item.image_ref} [{item.domain.value}]"
        # cot_without_seed only changes code-rule items: they get no seed
        # record, and their non-CoT extensions fail for lack of one.
        seedless = manifest.cot_without_seed and item.domain in CODE_RULE
        if item.domain in CODE_RULE:
            if not seedless:
                print(f"  {tag} seed coderule/{item.domain.value}: no backend call")
        else:
            calls += 1
            print(f"  {tag} seed via {stage1}: annotate/{item.domain.value}")
        try:
            steps = plan_extension(item.domain, manifest.styles, strict=False)
        except UnknownCombination as exc:
            print(f"  {tag} plan error: {exc}")
            continue
        for step in steps:
            if seedless and not step.kind.startswith("cot_"):
                print(f"  {tag} {step.kind}: will fail, no seed caption (cot_without_seed)")
                continue
            calls += 1
            flag = " (implied)" if step.implied else ""
            print(f"  {tag} {step.kind} via {stage2}: annotate/{step.kind}{flag}")
    print(f"planned backend calls: {calls}")
    return EXIT_OK


def cmd_caption(args: argparse.Namespace) -> int:
    manifest = _apply_stage(_load_manifest(args.manifest), args.stage)
    if args.dry_run:
        return _print_caption_plan(manifest)
    config = load_config(args.config, cache_dir=args.cache_dir, max_workers=args.max_workers)
    if args.mock:
        config = _with_mock_bindings(config, manifest.bindings.values())
    for name in manifest.bindings.values():
        config.binding(name)  # fail fast on names the config does not define
    out = args.out if args.out is not None else "runs"
    gateway = _gateway(config, args.seed, mock=args.mock)
    pipeline = Pipeline(gateway, config.bindings)
    report = pipeline.run_manifest(manifest, out, max_workers=config.max_workers)
    print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    return EXIT_ITEM_FAILURES if report.failed else EXIT_OK


# --------------------------------------------------------------------------
# eval-metrics


def _read_caption_pairs(path_str: str) -> list[tuple[str, str]]:
    """(image, caption) rows from a JSONL file.

    Accepts the export pair schema {"image", "caption"} and the full record
    schema {"image_ref", "text", ...} interchangeably.
    """
    path = Path(path_str)
    if not path.is_file():
        raise ConfigError(f"caption file not found: {path_str}")
    rows: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                image = obj["image"] if "image" in obj else obj["image_ref"]
                caption = obj["caption"] if "caption" in obj else obj["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path_str}:{lineno}: {exc}") from None
            rows.append((str(image), str(caption)))
    return rows


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def cmd_eval_metrics(args: argparse.Namespace) -> int:
    out = _require(args.out, "--out")
    preds = _read_caption_pairs(args.pred)
    refs_by_image: dict[str, list[str]] = defaultdict(list)
    for image, caption in _read_caption_pairs(args.ref):
        refs_by_image[image].append(caption)
    if not preds:
        raise ConfigError(f"no predictions in {args.pred}")

    pairs = []
    sentence_scores = []
    capture_sums = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    for image, caption in preds:
        references = refs_by_image.get(image)
        if not references:
            raise ConfigError(f"prediction {image!r} has no reference")
        candidate = _tokens(caption)
        ref_tokens = [_tokens(ref) for ref in references]
        pairs.append((candidate, ref_tokens))
        sentence_scores.append(bleu(candidate, ref_tokens))
        # Multi-reference reduction: keep the most favorable reference by F1.
        best = max((capture_lite(caption, ref) for ref in references), key=lambda s: s["f1"])
        for key in capture_sums:
            capture_sums[key] += best[key]

    corpus = corpus_bleu(pairs)
    mean_sentence = sum(sentence_scores) / len(sentence_scores)
    n = len(preds)
    scores = {
        "n_pairs": n,
        "bleu": {
            "corpus": corpus,
            "corpus_x100": corpus * 100.0,
            "mean_sentence": mean_sentence,
            "mean_sentence_x100": mean_sentence * 100.0,
        },
        "capture_lite": {key: capture_sums[key] / n for key in ("precision", "recall", "f1")},
    }
    Path(out).write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(scores, indent=2, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# eval-reason


def cmd_eval_reason(args: argparse.Namespace) -> int:
    items = load_benchmark_items(args.items)
    styles = _parse_styles(args.styles)
    if len(styles) != 1:
        raise ConfigError("--styles takes one style per run; use separate runs to compare")
    style = styles[0]
    if args.dry_run:
        print(f"plan for {len(items)} items, style {style.key()}")
        for item in items:
            print(f"  {item.item_id} caption {item.image_ref} then reason [{item.benchmark}]")
        print(f"planned backend calls: {2 * len(items)}")
        return EXIT_OK
    out = Path(_require(args.out, "--out"))
    config = load_config(args.config, cache_dir=args.cache_dir, max_workers=args.max_workers)
    captioner_name = _require(args.captioner, "--captioner")
    reasoner_name = _require(args.reasoner, "--reasoner")
    if args.mock:
        config = _with_mock_bindings(config, [captioner_name, reasoner_name])
    captioner = config.binding(captioner_name)
    reasoner = config.binding(reasoner_name)
    gateway = _gateway(config, args.seed, mock=args.mock)
    bridge = ReasonBridge(gateway)

    failures: list[ItemFailure] = []
    results = bridge.run_items(
        items, captioner, reasoner, style=style, max_workers=config.max_workers, errors=failures
    )

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.jsonl", "w", encoding="utf-8") as fh:
        for result in results:
            fh.write(json.dumps(result.to_json_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    with open(out / "failures.jsonl", "w", encoding="utf-8") as fh:
        for failure in failures:
            row = {"item_id": failure.item_id, "error": failure.error, "message": failure.message}
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")

    benchmark_of = {item.item_id: item.benchmark for item in items}
    by_benchmark: dict[str, list] = defaultdict(list)
    for result in results:
        by_benchmark[benchmark_of[result.item_id]].append(result)
    reports = {
        benchmark: score_benchmark(group, benchmark).to_json_dict()
        for benchmark, group in sorted(by_benchmark.items())
    }
    score = {"n_items": len(items), "n_failures": len(failures), "benchmarks": reports}
    (out / "score.json").write_text(
        json.dumps(score, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for benchmark, report in reports.items():
        print(
            f"{benchmark}: n={report['n_results']} accuracy={report['accuracy']:.2f} "
            f"scaled={report['scaled_score']:.4f} abstain={report['abstain_rate']:.3f}"
        )
    if failures:
        print(f"{len(failures)} item(s) failed; see {out / 'failures.jsonl'}", file=sys.stderr)
    return EXIT_ITEM_FAILURES if failures else EXIT_OK


# --------------------------------------------------------------------------
# export-t2i / stats


def cmd_export_t2i(args: argparse.Namespace) -> int:
    out = _require(args.out, "--out")
    records = _load_records(args.records, args.shard_prefix)
    styles = _parse_styles(args.styles)
    summary = export_t2i(
        records, styles, out, check_images=args.check_images, image_root=args.image_root
    )
    for warning in summary["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_ITEM_FAILURES if summary["missing"] else EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    records = _load_records(args.records, args.shard_prefix)
    stats = token_length_stats(records, by=args.by)
    payload = {key: value.to_json_dict() for key, value in sorted(stats.items())}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out is not None:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# review


def cmd_review_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from capfoundry.review import ReviewService, create_app

    service = ReviewService(args.data)
    app = create_app(service, ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def cmd_review_results(args: argparse.Namespace) -> int:
    from capfoundry.review import ReviewError, ReviewService

    service = ReviewService(args.data)
    try:
        results = service.results(args.study)
    except ReviewError as exc:
        raise ConfigError(f"{type(exc).__name__}: {exc}") from None
    text = json.dumps(results, indent=2, sort_keys=True)
    if args.out is not None:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file with backend bindings")
    parser.add_argument("--out", help="output path (directory or file, per command)")
    parser.add_argument("--seed", type=int, help="deterministic seed where applicable")


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--cache-dir", help="response cache directory (overrides config)")
    parser.add_argument("--max-workers", type=int, help="worker threads (overrides config)")
    parser.add_argument(
        "--mock",
        action="store_true",
        help="serve backend calls from the deterministic in-process mock",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="foundry",
        description="caption corpus tooling: synthesis, two-stage captioning, "
        "metrics, reasoning evaluation, export, review studies",
    )
    # Manual flag rather than action="version": argparse's version action
    # line-wraps long strings, which would split the manifest hash.
    parser.add_argument(
        "--version", action="store_true", help="print version and prompt-manifest hash"
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="sample and render structured-image artifacts")
    _add_common(p)
    p.add_argument("--kind", required=True, choices=[d.value for d in sorted(CODE_RULE)])
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("caption", help="run a caption manifest through both stages")
    _add_common(p)
    _add_backend_flags(p)
    p.add_argument("--manifest", required=True, help="job manifest JSON")
    p.add_argument("--stage", choices=["all", "seed", "extend"], default="all")
    p.add_argument("--dry-run", action="store_true", help="print planned backend calls only")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("extend", help="run only the extension stage over existing seeds")
    _add_common(p)
    _add_backend_flags(p)
    p.add_argument("--manifest", required=True, help="job manifest JSON")
    p.add_argument("--dry-run", action="store_true", help="print planned backend calls only")
    p.set_defaults(func=cmd_caption, stage="extend")

    p = sub.add_parser("eval-metrics", help="score predictions against references")
    _add_common(p)
    p.add_argument("--pred", required=True, help="predictions JSONL")
    p.add_argument("--ref", required=True, help="references JSONL (multiple rows per image allowed)")
    p.set_defaults(func=cmd_eval_metrics)

    p = sub.add_parser("eval-reason", help="caption-bridged benchmark evaluation")
    _add_common(p)
    _add_backend_flags(p)
    p.add_argument("--items", required=True, help="benchmark items JSONL")
    p.add_argument("--captioner", help="binding name for the captioning backend")
    p.add_argument("--reasoner", help="binding name for the reasoning backend")
    p.add_argument("--styles", default="detailed/en", help="caption style fed to the reasoner")
    p.add_argument("--dry-run", action="store_true", help="print planned backend calls only")
    p.set_defaults(func=cmd_eval_reason)

    p = sub.add_parser("export-t2i", help="emit (image, caption) training pairs")
    _add_common(p)
    p.add_argument("--records", required=True, help="run directory or records JSONL")
    p.add_argument("--styles", default="detailed/en", help="comma-separated style filters")
    p.add_argument("--shard-prefix", default="shards")
    p.add_argument("--check-images", action="store_true")
    p.add_argument("--image-root", help="base directory for image existence checks")
    p.set_defaults(func=cmd_export_t2i)

    p = sub.add_parser("stats", help="token-length histograms over caption records")
    _add_common(p)
    p.add_argument("--records", required=True, help="run directory or records JSONL")
    p.add_argument("--by", choices=["style", "domain"], default="style")
    p.add_argument("--shard-prefix", default="shards")
    p.set_defaults(func=cmd_stats)

    review = sub.add_parser("review", help="blind pairwise review studies")
    review_sub = review.add_subparsers(dest="review_command")

    p = review_sub.add_parser("serve", help="run the review HTTP service")
    _add_common(p)
    p.add_argument("--data", required=True, help="study persistence directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ui", help="static rating UI directory to mount at /ui")
    p.set_defaults(func=cmd_review_serve)

    p = review_sub.add_parser("results", help="print aggregated study results")
    _add_common(p)
    p.add_argument("--data", required=True, help="study persistence directory")
    p.add_argument("--study", required=True, help="study id")
    p.set_defaults(func=cmd_review_results)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "version", False):
        print(f"foundry {__version__} prompt-manifest {manifest_digest()}")
        return EXIT_OK
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BridgeError, MetricError, PipelineError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
