"""End-to-end offline walkthrough of the caption pipeline.

Synthesizes a small code-rule corpus, mixes in stub photographs, runs the
two-stage caption job against the in-process mock backend, reruns the same
manifest to show shard-level resume, then exports text-to-image pairs and
prints token-length statistics. No network access, no configuration.

    python3 scripts/demo_pipeline.py --out demo-run --seed 0
"""

import argparse
import json
from pathlib import Path

from capfoundry.gateway import BackendBinding, Gateway
from capfoundry.metrics import token_length_stats
from capfoundry.mockserver import MockBackend
from capfoundry.pipeline import Pipeline, export_t2i, read_shard_records
from capfoundry.records import CaptionStyle, ImageDomain, JobManifest, ManifestInput
from capfoundry.synth.corpus import generate_corpus

# Stub image payload: the pipeline only reads and encodes bytes, and the
# mock backend only hashes them, so a real decoder never runs here.
PNG_STUB = b"\x89PNG\r\n\x1a\n" + b"demo pixels "

STYLES = ("detailed/en", "medium/en", "short/en", "tags/en", "detailed/zh", "cot_analysis/en")


def build_manifest(out: Path, seed: int) -> JobManifest:
    corpus_dir = out / "corpus"
    items = generate_corpus(
        str(corpus_dir),
        {
            ImageDomain.TABLE: 3,
            ImageDomain.CHART: 2,
            ImageDomain.EQUATION: 2,
            ImageDomain.GEOMETRY: 2,
        },
        seed=seed,
    )
    inputs = [ManifestInput(str(corpus_dir / it.spec_path), it.domain) for it in items]

    photo_dir = out / "photos"
    photo_dir.mkdir(parents=True, exist_ok=True)
    for i in range(3):
        photo = photo_dir / f"photo-{i}.png"
        photo.write_bytes(PNG_STUB + str(i).encode())
        inputs.append(ManifestInput(str(photo), ImageDomain.NATURAL))

    return JobManifest(
        job_id="demo",
        inputs=tuple(inputs),
        styles=tuple(CaptionStyle.parse(s) for s in STYLES),
        bindings={"stage1": "vlm", "stage2": "vlm"},
        shard_prefix="captions",
    )


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="demo-run", help="working directory")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out)
    manifest = build_manifest(out, args.seed)
    print(f"manifest: {len(manifest.inputs)} inputs x {len(manifest.styles)} styles")

    binding = BackendBinding(name="vlm", base_url="http://mock.invalid", model="mock-vlm")

    mock = MockBackend()
    gateway = Gateway(out / "cache", transport=mock.as_transport())
    report = Pipeline(gateway, {"vlm": binding}).run_manifest(manifest, out / "runs")
    print("first run:", json.dumps(report.to_json_dict(), sort_keys=True))
    print(f"backend calls: {mock.calls}")

    # The geometry items fail the cot_analysis style on purpose: no CoT
    # prompt is routed for that domain, and the run isolates the failures
    # into an error shard instead of aborting.
    for shard in sorted((out / "runs" / manifest.job_id).glob("errors-*.jsonl")):
        for line in shard.read_text(encoding="utf-8").splitlines():
            row = json.loads(line)
            print(f"  failed: {row['domain']} {row['stage']}: {row['error']}")

    # Same manifest again, fresh gateway and fresh response cache: every
    # planned record id is already in the shards, so nothing runs.
    rerun_mock = MockBackend()
    rerun_gateway = Gateway(out / "cache-rerun", transport=rerun_mock.as_transport())
    rerun = Pipeline(rerun_gateway, {"vlm": binding}).run_manifest(manifest, out / "runs")
    print(f"rerun: cached={rerun.cached} generated={rerun.generated} calls={rerun_mock.calls}")

    records = read_shard_records(out / "runs" / manifest.job_id, manifest.shard_prefix)
    pair_styles = [CaptionStyle.parse("detailed/en"), CaptionStyle.parse("short/en")]
    summary = export_t2i(records, pair_styles, out / "pairs.jsonl")
    print("t2i export:", json.dumps(summary["by_style"], sort_keys=True))

    stats = token_length_stats(records, by="style")
    for key in sorted(stats):
        entry = stats[key]
        print(f"  {key:16s} count={entry.count:3d} mean_tokens={entry.mean:.1f}")


if __name__ == "__main__":
    main()
