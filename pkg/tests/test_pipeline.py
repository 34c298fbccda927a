"""Pipeline tests: extension planning, both stages against the mock backend,
sharded resumable runs, and the t2i export."""

import json
import random
from collections import Counter
from pathlib import Path

import pytest

from capfoundry.gateway import BackendBinding, Gateway
from capfoundry.mockserver import MockBackend
from capfoundry.pipeline import (
    CODE_RULE_PRODUCER,
    ChainBroken,
    Pipeline,
    PlanStep,
    ShardCorrupt,
    ShardWriter,
    export_t2i,
    load_artifact_file,
    plan_extension,
    read_shard_records,
)
from capfoundry.prompts import UnknownCombination, get_extension_prompt, render
from capfoundry.records import (
    CaptionStyle,
    ImageDomain,
    JobManifest,
    Language,
    ManifestInput,
    StyleVariant,
    validate_lineage,
    validate_record,
)
from capfoundry.synth.corpus import artifact_from_spec_obj, sample_spec, spec_to_json_dict

PNG = b"\x89PNG\r\n\x1a\n" + b"fakepixels"

DETAILED = CaptionStyle(StyleVariant.DETAILED, Language.EN)
MEDIUM = CaptionStyle(StyleVariant.MEDIUM, Language.EN)
SHORT = CaptionStyle(StyleVariant.SHORT, Language.EN)
TAGS = CaptionStyle(StyleVariant.TAGS, Language.EN)
ZH = CaptionStyle(StyleVariant.DETAILED, Language.ZH)
COT = CaptionStyle(StyleVariant.COT_ANALYSIS, Language.EN)


def styles(*keys):
    return tuple(CaptionStyle.parse(k) for k in keys)


# --------------------------------------------------------------------------
# plan_extension


def test_plan_empty_and_seed_only():
    assert plan_extension(ImageDomain.NATURAL, []) == []
    assert plan_extension(ImageDomain.NATURAL, [DETAILED]) == []


def test_plan_single_medium():
    assert plan_extension(ImageDomain.NATURAL, [MEDIUM]) == [
        PlanStep("medium", DETAILED, implied=False)
    ]


def test_plan_short_implies_medium():
    plan = plan_extension(ImageDomain.NATURAL, [SHORT])
    assert [(s.kind, s.implied) for s in plan] == [("medium", True), ("short", False)]


def test_plan_short_with_explicit_medium():
    plan = plan_extension(ImageDomain.NATURAL, [SHORT, MEDIUM])
    assert [(s.kind, s.implied) for s in plan] == [("medium", False), ("short", False)]


def test_plan_order_is_chain_safe():
    plan = plan_extension(ImageDomain.NATURAL, [ZH, TAGS, SHORT, MEDIUM])
    assert [s.kind for s in plan] == ["medium", "short", "tags", "translate_zh"]


def test_plan_parent_styles():
    plan = plan_extension(ImageDomain.NATURAL, [MEDIUM, SHORT, TAGS, ZH])
    parents = {s.kind: s.parent_style for s in plan}
    assert parents["medium"] == DETAILED
    assert parents["short"] == MEDIUM
    assert parents["tags"] == DETAILED
    assert parents["translate_zh"] == DETAILED


def test_plan_cot_kind_per_domain():
    assert plan_extension(ImageDomain.TABLE, [COT])[0].kind == "cot_table"
    assert plan_extension(ImageDomain.EQUATION, [COT])[0].kind == "cot_equation"
    assert plan_extension(ImageDomain.CHART, [COT])[0].kind == "cot_chart"


def test_plan_cot_rejections():
    with pytest.raises(UnknownCombination):
        plan_extension(ImageDomain.GEOMETRY, [COT])
    # geometry rejects CoT even in non-strict mode: it is a code-rule domain
    # where the capability is missing, not out of class.
    with pytest.raises(UnknownCombination):
        plan_extension(ImageDomain.GEOMETRY, [COT], strict=False)
    with pytest.raises(UnknownCombination):
        plan_extension(ImageDomain.NATURAL, [COT])
    assert plan_extension(ImageDomain.NATURAL, [COT, MEDIUM], strict=False) == [
        PlanStep("medium", DETAILED)
    ]


def test_plan_unknown_style_combinations():
    with pytest.raises(UnknownCombination):
        plan_extension(ImageDomain.NATURAL, [CaptionStyle(StyleVariant.MEDIUM, Language.ZH)])
    with pytest.raises(UnknownCombination):
        plan_extension(ImageDomain.NATURAL, [CaptionStyle(StyleVariant.SHORT, Language.ZH)])


# --------------------------------------------------------------------------
# Environment helpers


class Env:
    def __init__(self, tmp_path: Path):
        self.tmp = tmp_path
        self.mock = MockBackend()
        self.gateway = Gateway(tmp_path / "cache", transport=self.mock.as_transport())
        self.binding = BackendBinding(name="mock", base_url="http://mock", model="mock-model")
        self.pipeline = Pipeline(self.gateway, {"mock": self.binding})
        self.out = tmp_path / "out"

    def png_input(self, name="img.png", payload=b"fakepixels", domain=ImageDomain.NATURAL):
        path = self.tmp / name
        path.write_bytes(b"\x89PNG\r\n\x1a\n" + payload)
        return ManifestInput(str(path), domain)

    def spec_input(self, domain=ImageDomain.TABLE, seed="s", name=None):
        spec = sample_spec(domain, random.Random(seed))
        path = self.tmp / (name or f"{domain.value}-{seed}.json")
        path.write_text(json.dumps(spec_to_json_dict(spec)), encoding="utf-8")
        return ManifestInput(str(path), domain)

    def manifest(self, inputs, style_keys=("detailed",), **kwargs):
        return JobManifest(
            job_id=kwargs.pop("job_id", "job"),
            inputs=tuple(inputs),
            styles=styles(*style_keys),
            bindings={"stage1": "mock"},
            shard_prefix="shards",
            **kwargs,
        )

    def image_parts(self, request_body):
        parts = []
        for message in request_body["messages"]:
            content = message["content"]
            if isinstance(content, list):
                parts += [p for p in content if p.get("type") == "image_url"]
        return parts

    def user_text(self, request_body):
        for message in request_body["messages"]:
            if message["role"] == "user":
                content = message["content"]
                if isinstance(content, str):
                    return content
                return "".join(p["text"] for p in content if p.get("type") == "text")
        return ""


@pytest.fixture
def env(tmp_path):
    return Env(tmp_path)


# --------------------------------------------------------------------------
# Stage 1


def test_stage1_empty_manifest(env):
    manifest = env.manifest([])
    assert env.pipeline.stage1_seed(manifest) == []
    assert env.mock.calls == 0


def test_stage1_natural_mock_identity(env):
    env.mock.chat_fn = lambda model, system, user, image: "a cat"
    manifest = env.manifest([env.png_input()])
    records = env.pipeline.stage1_seed(manifest)
    assert len(records) == 1
    rec = records[0]
    assert rec.text == "a cat"
    assert rec.style == DETAILED
    assert rec.producer == "mock-model"
    assert rec.prompt_id == "annotate/natural"
    assert rec.parent_id is None
    assert validate_record(rec).ok


def test_stage1_routes_every_vlm_domain(env):
    inputs = [
        env.png_input(name=f"{d.value}.png", domain=d)
        for d in (ImageDomain.NATURAL, ImageDomain.POSTER, ImageDomain.UI, ImageDomain.PDF, ImageDomain.VIDEO)
    ]
    records = env.pipeline.stage1_seed(env.manifest(inputs))
    assert [r.prompt_id for r in records] == [
        "annotate/natural", "annotate/poster", "annotate/ui", "annotate/pdf", "annotate/video",
    ]
    for rec in records:
        assert rec.prompt_id == f"annotate/{rec.domain.value}"


def test_stage1_table_embeds_latex(env):
    item = env.spec_input(ImageDomain.TABLE)
    records = env.pipeline.stage1_seed(env.manifest([item]))
    assert len(records) == 1 and env.mock.calls == 0
    rec = records[0]
    # Independent regeneration from the stored spec is the oracle.
    artifact = artifact_from_spec_obj(json.loads(Path(item.image_ref).read_text()))
    assert rec.text == artifact.seed_description
    assert artifact.source_code in rec.text
    assert rec.producer == CODE_RULE_PRODUCER
    assert rec.prompt_id == "coderule/table"


def test_stage1_failure_isolation(env):
    bad = ManifestInput(str(env.tmp / "missing.png"), ImageDomain.NATURAL)
    good = env.png_input()
    errors = []
    records = env.pipeline.stage1_seed(env.manifest([bad, good]), errors=errors)
    assert len(records) == 1
    assert len(errors) == 1
    assert errors[0].stage == "seed"
    assert errors[0].image_ref.endswith("missing.png")
    with pytest.raises(FileNotFoundError):
        env.pipeline.stage1_seed(env.manifest([bad]))


# --------------------------------------------------------------------------
# Stage 2


def seed_of(env, item=None):
    item = item or env.png_input()
    return env.pipeline.stage1_seed(env.manifest([item]))[0], item


def test_stage2_medium_only(env):
    seed, _ = seed_of(env)
    records = env.pipeline.stage2_extend(seed, [MEDIUM], env.binding)
    assert len(records) == 1
    assert records[0].style == MEDIUM
    assert records[0].parent_id == seed.id
    assert records[0].prompt_id == "annotate/medium"


def test_stage2_short_inserts_medium(env):
    seed, _ = seed_of(env)
    records = env.pipeline.stage2_extend(seed, [SHORT], env.binding)
    assert [r.style.key() for r in records] == ["medium/en", "short/en"]
    medium, short = records
    assert medium.parent_id == seed.id
    assert short.parent_id == medium.id
    # The short prompt consumed the medium text, not the seed text.
    template = get_extension_prompt("short")
    assert env.user_text(env.mock.transcript[-1]["body"]) == render(
        template, {"caption": medium.text}
    )


def test_stage2_text_extensions_carry_no_image(env):
    seed, _ = seed_of(env)
    env.pipeline.stage2_extend(seed, [MEDIUM, TAGS, ZH], env.binding)
    for entry in env.mock.transcript[1:]:  # entry 0 is the stage-1 call
        assert env.image_parts(entry["body"]) == []


def test_stage2_cot_binds_source_and_image(env):
    item = env.spec_input(ImageDomain.TABLE)
    seed, _ = seed_of(env, item)
    before = env.mock.calls
    records = env.pipeline.stage2_extend(seed, [COT], env.binding)
    assert env.mock.calls == before + 1
    assert len(records) == 1
    assert records[0].style == COT
    assert records[0].prompt_id == "annotate/cot_table"
    artifact = load_artifact_file(item.image_ref)
    body = env.mock.transcript[-1]["body"]
    assert env.user_text(body) == render(
        get_extension_prompt("cot_table"), {"Latex": artifact.source_code}
    )
    assert len(env.image_parts(body)) == 1


def test_stage2_chart_cot_uses_markdown_slot(env):
    item = env.spec_input(ImageDomain.CHART)
    seed, _ = seed_of(env, item)
    env.pipeline.stage2_extend(seed, [COT], env.binding)
    artifact = load_artifact_file(item.image_ref)
    assert env.user_text(env.mock.transcript[-1]["body"]) == render(
        get_extension_prompt("cot_chart"), {"markdown": artifact.source_code}
    )


def test_stage2_rejects_non_detailed_seed(env):
    seed, _ = seed_of(env)
    medium = env.pipeline.stage2_extend(seed, [MEDIUM], env.binding)[0]
    with pytest.raises(ChainBroken):
        env.pipeline.stage2_extend(medium, [SHORT], env.binding)


# --------------------------------------------------------------------------
# run_manifest


def test_run_fresh_and_resume(env):
    inputs = [env.png_input(name=f"img{i}.png", payload=b"px%d" % i) for i in range(3)]
    manifest = env.manifest(inputs)
    report = env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    assert report.inputs == 3
    assert report.generated == 3 and report.cached == 0 and report.failed == 0
    calls = env.mock.calls
    assert calls == 3

    rerun = env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    assert rerun.generated == 0 and rerun.cached == 3 and rerun.failed == 0
    assert env.mock.calls == calls  # zero network on resume
    records = read_shard_records(env.out / "job", "shards")
    assert len(records) == len({r.id for r in records}) == 3


def test_run_resume_after_pruned_record(env):
    inputs = [env.png_input(name=f"img{i}.png", payload=b"px%d" % i) for i in range(3)]
    manifest = env.manifest(inputs)
    env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    run_dir = env.out / "job"
    records = read_shard_records(run_dir, "shards")

    # Drop one record: rewrite the shard and its sidecar consistently, and
    # clear the gateway cache so regeneration must hit the network again.
    import hashlib
    import shutil

    keep = records[1:]
    shard = run_dir / "shards-00000.jsonl"
    data = "".join(r.to_json_line() + "\n" for r in keep).encode("utf-8")
    shard.write_bytes(data)
    (run_dir / "shards-00000.jsonl.sha256").write_text(
        hashlib.sha256(data).hexdigest() + "\n", encoding="utf-8"
    )
    shutil.rmtree(env.gateway.cache_dir)

    calls = env.mock.calls
    report = env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    assert report.generated == 1 and report.cached == 2
    assert env.mock.calls == calls + 1
    final = read_shard_records(run_dir, "shards")
    assert {r.id for r in final} == {r.id for r in records}


def test_run_aborts_on_corrupt_shard(env):
    manifest = env.manifest([env.png_input()])
    env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    shard = env.out / "job" / "shards-00000.jsonl"
    with open(shard, "ab") as fh:
        fh.write(b"junk\n")
    with pytest.raises(ShardCorrupt):
        env.pipeline.run_manifest(manifest, env.out, max_workers=1)


def test_run_aborts_on_missing_sidecar(env):
    manifest = env.manifest([env.png_input()])
    env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    (env.out / "job" / "shards-00000.jsonl.sha256").unlink()
    with pytest.raises(ShardCorrupt):
        env.pipeline.run_manifest(manifest, env.out, max_workers=1)


def test_run_failure_isolation_and_sidecar(env):
    good = env.png_input()
    bad = ManifestInput(str(env.tmp / "nope.png"), ImageDomain.NATURAL)
    manifest = env.manifest([good, bad])
    report = env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    assert report.generated == 1
    assert report.failed == 1
    errors_file = env.out / "job" / "errors-00000.jsonl"
    assert errors_file.exists()
    entries = [json.loads(line) for line in errors_file.read_text().splitlines()]
    assert len(entries) == 1
    assert entries[0]["stage"] == "load"
    assert entries[0]["error"] == "FileNotFoundError"
    assert entries[0]["image_ref"].endswith("nope.png")


def test_run_style_coverage_law(env):
    inputs = [env.png_input(name=f"n{i}.png", payload=b"p%d" % i) for i in range(2)]
    manifest = env.manifest(inputs, style_keys=("detailed", "medium", "short", "tags", "detailed/zh"))
    report = env.pipeline.run_manifest(manifest, env.out, max_workers=2)
    assert report.generated == 10 and report.failed == 0
    records = read_shard_records(env.out / "job", "shards")
    by_ref = {}
    for rec in records:
        by_ref.setdefault(rec.image_ref, []).append(rec)
    assert set(by_ref) == {item.image_ref for item in inputs}
    for ref, group in by_ref.items():
        assert len(group) == 5
        by_style = {r.style.key(): r for r in group}
        assert set(by_style) == {"detailed/en", "medium/en", "short/en", "tags/en", "detailed/zh"}
        seed = by_style["detailed/en"]
        assert by_style["medium/en"].parent_id == seed.id
        assert by_style["short/en"].parent_id == by_style["medium/en"].id
        assert by_style["tags/en"].parent_id == seed.id
        assert by_style["detailed/zh"].parent_id == seed.id
        report_lineage = validate_lineage(group)
        assert report_lineage.ok, report_lineage.codes()


def test_run_no_cross_domain_prompt_leakage(env):
    inputs = [
        env.png_input(),
        env.spec_input(ImageDomain.TABLE),
        env.spec_input(ImageDomain.CHART),
        env.spec_input(ImageDomain.EQUATION),
    ]
    manifest = env.manifest(inputs, style_keys=("detailed", "medium", "cot_analysis"))
    report = env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    assert report.failed == 0
    domain_of_prompt = {f"annotate/{d.value}": d for d in
                        (ImageDomain.NATURAL, ImageDomain.POSTER, ImageDomain.UI, ImageDomain.PDF, ImageDomain.VIDEO)}
    for d in (ImageDomain.TABLE, ImageDomain.CHART, ImageDomain.EQUATION, ImageDomain.GEOMETRY):
        domain_of_prompt[f"coderule/{d.value}"] = d
    domain_of_prompt["annotate/cot_table"] = ImageDomain.TABLE
    domain_of_prompt["annotate/cot_equation"] = ImageDomain.EQUATION
    domain_of_prompt["annotate/cot_chart"] = ImageDomain.CHART
    for rec in read_shard_records(env.out / "job", "shards"):
        if rec.prompt_id in domain_of_prompt:
            assert domain_of_prompt[rec.prompt_id] == rec.domain


def test_run_geometry_cot_records_plan_error(env):
    manifest = env.manifest([env.spec_input(ImageDomain.GEOMETRY)], style_keys=("detailed", "cot_analysis"))
    report = env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    # The seed still lands; the unplannable CoT is a recorded failure.
    assert report.generated == 1
    assert report.failed == 1
    entries = [
        json.loads(line)
        for line in (env.out / "job" / "errors-00000.jsonl").read_text().splitlines()
    ]
    assert entries[0]["stage"] == "plan"
    assert entries[0]["error"] == "UnknownCombination"


def test_run_cot_without_seed(env):
    item = env.spec_input(ImageDomain.TABLE)
    manifest = env.manifest([item], style_keys=("cot_analysis",), cot_without_seed=True)
    report = env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    assert report.generated == 1
    assert report.cot_without_seed == 1
    records = read_shard_records(env.out / "job", "shards")
    assert len(records) == 1
    rec = records[0]
    assert rec.style == COT
    assert rec.parent_id is None
    # The CoT prompt ran with an empty source slot.
    assert env.user_text(env.mock.transcript[-1]["body"]) == render(
        get_extension_prompt("cot_table"), {"Latex": ""}
    )


def test_run_report_file_round_trips(env):
    manifest = env.manifest([env.png_input()])
    report = env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    on_disk = json.loads((env.out / "job" / "report.json").read_text())
    assert on_disk == report.to_json_dict()
    assert on_disk["usage"]["completion_tokens"] > 0


def test_run_without_resume_regenerates(env):
    manifest = env.manifest([env.png_input()], resume=False)
    env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    report = env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    # resume=False ignores the existing store: the work is redone (from the
    # gateway cache, so still no new network) and appended.
    assert report.generated == 1 and report.cached == 0


def test_run_parallel_matches_serial(env):
    inputs = [env.png_input(name=f"i{i}.png", payload=b"q%d" % i) for i in range(8)]
    manifest_a = env.manifest(inputs, style_keys=("detailed", "medium"), job_id="serial")
    manifest_b = env.manifest(inputs, style_keys=("detailed", "medium"), job_id="parallel")
    ra = env.pipeline.run_manifest(manifest_a, env.out, max_workers=1)
    rb = env.pipeline.run_manifest(manifest_b, env.out, max_workers=4)
    assert (ra.generated, ra.failed) == (rb.generated, rb.failed) == (16, 0)
    ids_a = {r.id for r in read_shard_records(env.out / "serial", "shards")}
    ids_b = {r.id for r in read_shard_records(env.out / "parallel", "shards")}
    assert ids_a == ids_b


# --------------------------------------------------------------------------
# ShardWriter


def test_shard_writer_rolls_and_resumes(tmp_path):
    writer = ShardWriter(tmp_path, "shards", shard_size=2)
    for i in range(5):
        writer.append_line(json.dumps({"i": i}))
    names = sorted(p.name for p in tmp_path.glob("shards-*.jsonl"))
    assert names == ["shards-00000.jsonl", "shards-00001.jsonl", "shards-00002.jsonl"]
    assert len((tmp_path / "shards-00002.jsonl").read_text().splitlines()) == 1

    # Resume appends to the partial last shard, then rolls.
    writer2 = ShardWriter(tmp_path, "shards", shard_size=2)
    writer2.append_line(json.dumps({"i": 5}))
    writer2.append_line(json.dumps({"i": 6}))
    assert len((tmp_path / "shards-00002.jsonl").read_text().splitlines()) == 2
    assert (tmp_path / "shards-00003.jsonl").exists()


def test_shard_writer_sidecar_tracks_every_append(tmp_path):
    import hashlib

    writer = ShardWriter(tmp_path, "shards", shard_size=10)
    for i in range(3):
        writer.append_line(f"line-{i}")
        shard = tmp_path / "shards-00000.jsonl"
        sidecar = tmp_path / "shards-00000.jsonl.sha256"
        assert sidecar.read_text().strip() == hashlib.sha256(shard.read_bytes()).hexdigest()


def test_shard_writer_rejects_tampered_history(tmp_path):
    writer = ShardWriter(tmp_path, "shards", shard_size=10)
    writer.append_line("x")
    (tmp_path / "shards-00000.jsonl").write_text("tampered\n", encoding="utf-8")
    with pytest.raises(ShardCorrupt):
        ShardWriter(tmp_path, "shards", shard_size=10)


# --------------------------------------------------------------------------
# export_t2i


def run_small_corpus(env):
    inputs = [env.png_input(name=f"e{i}.png", payload=b"e%d" % i) for i in range(2)]
    manifest = env.manifest(inputs, style_keys=("detailed", "medium"))
    env.pipeline.run_manifest(manifest, env.out, max_workers=1)
    return read_shard_records(env.out / "job", "shards")


def test_export_detailed_pairs(env, tmp_path):
    records = run_small_corpus(env)
    out = tmp_path / "pairs.jsonl"
    summary = export_t2i(records, [DETAILED], out)
    assert summary["pairs"] == 2
    assert summary["by_style"] == {"detailed/en": 2}
    assert summary["warnings"] == []
    lines = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(lines) == 2
    assert set(lines[0]) == {"image", "caption"}


def test_export_zh_over_en_corpus_warns(env, tmp_path):
    records = run_small_corpus(env)
    out = tmp_path / "pairs.jsonl"
    summary = export_t2i(records, [ZH], out)
    assert summary["pairs"] == 0
    assert summary["by_style"] == {"detailed/zh": 0}
    assert any("detailed/zh" in w for w in summary["warnings"])
    assert out.read_text() == ""


def test_export_counts_match_style_histogram(env, tmp_path):
    records = run_small_corpus(env)
    # Independent recount of the corpus by style.
    histogram = Counter(r.style.key() for r in records)
    out = tmp_path / "pairs.jsonl"
    summary = export_t2i(records, [DETAILED, MEDIUM], out)
    assert summary["by_style"]["detailed/en"] == histogram["detailed/en"]
    assert summary["by_style"]["medium/en"] == histogram["medium/en"]
    assert summary["pairs"] == histogram["detailed/en"] + histogram["medium/en"]


def test_export_missing_image_per_item(env, tmp_path):
    records = run_small_corpus(env)
    Path(records[0].image_ref).unlink()
    out = tmp_path / "pairs.jsonl"
    summary = export_t2i(records, [DETAILED], out, check_images=True)
    assert summary["pairs"] == 1
    assert len(summary["missing"]) == 1
    assert summary["missing"][0]["error"] == "MissingImage"
