"""Domain-model tests: identities, token counting, validation, round-trips."""

import hashlib
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capfoundry.records import (
    BACKEND_VLM,
    CODE_RULE,
    CaptionRecord,
    CaptionStyle,
    ImageDomain,
    JobManifest,
    Language,
    ManifestInput,
    RecordParseError,
    SeedArtifact,
    StyleVariant,
    UnknownDomain,
    UnknownStyle,
    canonical_digest,
    compute_record_id,
    content_digest,
    count_tokens,
    is_rfc3339,
    now_rfc3339,
    read_records_jsonl,
    routing_class,
    validate_lineage,
    validate_record,
    write_records_jsonl,
)


def make_record(**overrides):
    image_digest = overrides.pop("image_digest", "ab" * 32)
    rid = overrides.pop("id", None)
    token_count = overrides.pop("token_count_override", None)
    base = dict(
        image_ref="images/cat.png",
        domain=ImageDomain.NATURAL,
        style=CaptionStyle(StyleVariant.DETAILED, Language.EN),
        text="A tabby cat sits on a windowsill in the morning sun.",
        parent_id=None,
        producer="mock-vlm",
        prompt_id="annotate/natural",
        created_at="2026-08-18T12:00:00Z",
    )
    base.update(overrides)
    if rid is None:
        rid = compute_record_id(
            image_digest, base["domain"], base["style"], base["prompt_id"], base["producer"]
        )
    if token_count is None:
        token_count = count_tokens(base["text"])
    return CaptionRecord(id=rid, token_count=token_count, **base)


# --- enums and routing ---

def test_domain_closed_set():
    assert ImageDomain.parse("chart") is ImageDomain.CHART
    with pytest.raises(UnknownDomain):
        ImageDomain.parse("diagram")


def test_routing_total_and_disjoint():
    for domain in ImageDomain:
        assert routing_class(domain) in ("backend_vlm", "code_rule")
    assert BACKEND_VLM | CODE_RULE == frozenset(ImageDomain)
    assert not (BACKEND_VLM & CODE_RULE)


def test_style_parse():
    assert CaptionStyle.parse("medium") == CaptionStyle(StyleVariant.MEDIUM, Language.EN)
    assert CaptionStyle.parse("detailed/zh") == CaptionStyle(StyleVariant.DETAILED, Language.ZH)
    with pytest.raises(UnknownStyle):
        CaptionStyle.parse("verbose")
    with pytest.raises(UnknownStyle):
        CaptionStyle.parse("detailed/fr")


# --- digests and identity ---

def test_content_digest_empty():
    # published SHA-256 of the empty string
    assert content_digest(b"") == (
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    )


def test_content_digest_determinism_and_sensitivity():
    a = content_digest(b"seed caption")
    assert a == content_digest(b"seed caption")
    assert a != content_digest(b"seed captioN")
    assert len(a) == 64 and a == a.lower()


def test_canonical_digest_oracle():
    # Independent oracle: build the length-prefixed byte stream by hand.
    expected = hashlib.sha256(b"2:ab;7:natural;11:detailed/en;-;").hexdigest()
    assert canonical_digest(["ab", "natural", "detailed/en", None]) == expected


def test_canonical_digest_no_field_bleed():
    assert canonical_digest(["a", "bc"]) != canonical_digest(["ab", "c"])
    assert canonical_digest([None]) != canonical_digest([""])


def test_record_id_excludes_text_and_time():
    style = CaptionStyle(StyleVariant.DETAILED, Language.EN)
    rid = compute_record_id("cd" * 32, ImageDomain.NATURAL, style, "annotate/natural", "mock-vlm")
    a = make_record(image_digest="cd" * 32, id=rid, text="one caption")
    b = make_record(
        image_digest="cd" * 32, id=rid, text="another caption entirely",
        created_at="2026-08-18T13:30:00Z",
    )
    assert a.id == b.id


def test_record_id_sensitive_to_each_component():
    style = CaptionStyle(StyleVariant.DETAILED, Language.EN)
    base = compute_record_id("ab" * 32, ImageDomain.NATURAL, style, "p", "m")
    assert base != compute_record_id("cd" * 32, ImageDomain.NATURAL, style, "p", "m")
    assert base != compute_record_id("ab" * 32, ImageDomain.POSTER, style, "p", "m")
    assert base != compute_record_id("ab" * 32, ImageDomain.NATURAL, CaptionStyle(StyleVariant.DETAILED, Language.ZH), "p", "m")
    assert base != compute_record_id("ab" * 32, ImageDomain.NATURAL, style, "q", "m")
    assert base != compute_record_id("ab" * 32, ImageDomain.NATURAL, style, "p", "n")


# --- token counting ---
# Expected values are hand-applied UAX-29 word segmentation (CJK per character,
# medial dot/comma/apostrophe/colon joined between word characters).

TOKEN_FIXTURES = [
    ("", 0),
    ("the cat sat", 3),
    ("一只猫", 3),
    ("   ", 0),
    ("!!!", 0),
    ("hello, world", 2),
    ("12.5 percent", 2),
    ("don't stop", 2),
    ("state-of-the-art", 4),
    ("一只猫 sat on 两张桌子", 9),
    ("a1b2", 1),
    ("3:45pm", 2),
    ("U.S.A.", 1),
    ("ends.", 1),
]


@pytest.mark.parametrize("text,expected", TOKEN_FIXTURES)
def test_count_tokens_fixtures(text, expected):
    assert count_tokens(text) == expected


@given(st.text(max_size=200))
def test_count_tokens_nonnegative_and_deterministic(text):
    n = count_tokens(text)
    assert n >= 0
    assert n == count_tokens(text)


@given(st.text(max_size=120), st.text(max_size=120))
def test_count_tokens_monotone_under_spaced_concat(a, b):
    # Joining with a hard separator never loses segments.
    assert count_tokens(a + " " + b) >= max(count_tokens(a), count_tokens(b))


# --- validation ---

def test_validate_wellformed_detailed():
    assert validate_record(make_record()).ok


def test_validate_medium_without_parent():
    rec = make_record(style=CaptionStyle(StyleVariant.MEDIUM, Language.EN), parent_id=None)
    report = validate_record(rec)
    assert any(v.message == "derived style requires parent" for v in report.violations)


def test_validate_detailed_with_parent():
    rec = make_record(parent_id="ef" * 32)
    assert "parent_forbidden" in validate_record(rec).codes()


def test_validate_zh_detailed_requires_parent():
    rec = make_record(style=CaptionStyle(StyleVariant.DETAILED, Language.ZH), parent_id=None)
    assert "parent_required" in validate_record(rec).codes()


def test_validate_token_count_off_by_one():
    rec = make_record(token_count_override=count_tokens("A tabby cat sits on a windowsill in the morning sun.") + 1)
    report = validate_record(rec)
    assert any(v.message == "token_count mismatch" for v in report.violations)


def test_validate_cot_on_vlm_domain():
    rec = make_record(
        domain=ImageDomain.NATURAL,
        style=CaptionStyle(StyleVariant.COT_ANALYSIS, Language.EN),
        prompt_id="annotate/cot_table",
    )
    assert "cot_domain" in validate_record(rec).codes()


def test_validate_cot_on_code_rule_domain_ok():
    rec = make_record(
        domain=ImageDomain.TABLE,
        style=CaptionStyle(StyleVariant.COT_ANALYSIS, Language.EN),
        prompt_id="annotate/cot_table",
    )
    assert validate_record(rec).ok


def test_validate_bad_timestamp():
    rec = make_record(created_at="2026-08-18 12:00:00")
    assert "created_at_format" in validate_record(rec).codes()


def test_validation_reports_all_violations_never_throws():
    rec = make_record(
        id="not-hex",
        image_ref="",
        style=CaptionStyle(StyleVariant.SHORT, Language.EN),
        parent_id=None,
        created_at="bogus",
        producer="",
        prompt_id="",
        token_count_override=999,
    )
    report = validate_record(rec)
    assert set(report.codes()) >= {
        "id_format", "image_ref_empty", "parent_required",
        "token_count_mismatch", "created_at_format", "producer_empty", "prompt_id_empty",
    }


# --- lineage ---

def chain_records():
    seed = make_record(image_digest="11" * 32)
    zh = make_record(
        image_digest="11" * 32,
        style=CaptionStyle(StyleVariant.DETAILED, Language.ZH),
        parent_id=seed.id,
        prompt_id="extend/translate_zh",
    )
    medium = make_record(
        image_digest="11" * 32,
        style=CaptionStyle(StyleVariant.MEDIUM, Language.EN),
        parent_id=seed.id,
        prompt_id="extend/medium",
    )
    short = make_record(
        image_digest="11" * 32,
        style=CaptionStyle(StyleVariant.SHORT, Language.EN),
        parent_id=medium.id,
        prompt_id="extend/short",
    )
    return seed, zh, medium, short


def test_lineage_happy_path():
    assert validate_lineage(chain_records()).ok


def test_lineage_missing_parent():
    _, _, medium, short = chain_records()
    report = validate_lineage([medium, short])
    assert "parent_missing" in report.codes()


def test_lineage_cycle_detected():
    a = make_record(
        image_digest="22" * 32,
        style=CaptionStyle(StyleVariant.MEDIUM, Language.EN),
        prompt_id="extend/medium",
    )
    b = make_record(
        image_digest="33" * 32,
        style=CaptionStyle(StyleVariant.SHORT, Language.EN),
        prompt_id="extend/short",
    )
    a = CaptionRecord(**{**a.__dict__, "parent_id": b.id})
    b = CaptionRecord(**{**b.__dict__, "parent_id": a.id})
    report = validate_lineage([a, b])
    assert "lineage_cycle" in report.codes()


def test_zh_tags_requires_zh_detailed_upstream():
    seed, zh, _, _ = chain_records()
    tags_zh_bad = make_record(
        image_digest="11" * 32,
        style=CaptionStyle(StyleVariant.TAGS, Language.ZH),
        parent_id=seed.id,
        prompt_id="extend/tags",
    )
    report = validate_lineage([seed, zh, tags_zh_bad])
    assert "tags_zh_lineage" in report.codes()

    tags_zh_ok = make_record(
        image_digest="11" * 32,
        style=CaptionStyle(StyleVariant.TAGS, Language.ZH),
        parent_id=zh.id,
        prompt_id="extend/tags",
    )
    assert validate_lineage([seed, zh, tags_zh_ok]).ok


# --- serialization round-trip ---

PINNED_FIELD_ORDER = [
    "id", "image_ref", "domain", "style", "language", "text",
    "parent_id", "producer", "prompt_id", "created_at", "token_count",
]


def test_jsonl_field_order_pinned():
    line = make_record().to_json_line()
    assert list(json.loads(line).keys()) == PINNED_FIELD_ORDER


def test_jsonl_round_trip(tmp_path):
    records = list(chain_records())
    path = tmp_path / "captions.jsonl"
    assert write_records_jsonl(path, records) == 4
    back = list(read_records_jsonl(path))
    assert back == records


def test_jsonl_rejects_garbage():
    with pytest.raises(RecordParseError):
        CaptionRecord.from_json_line("{not json")
    with pytest.raises(RecordParseError):
        CaptionRecord.from_json_line('["a","list"]')
    with pytest.raises(RecordParseError):
        CaptionRecord.from_json_line('{"id": "x"}')


@settings(max_examples=60)
@given(
    text=st.text(max_size=300),
    domain=st.sampled_from(list(ImageDomain)),
    lang=st.sampled_from(list(Language)),
    image_ref=st.text(min_size=1, max_size=40),
)
def test_round_trip_stability_property(text, domain, lang, image_ref):
    # validate_record(r) empty => parse(serialize(r)) == r. Build records that
    # pass validation by construction, then check the round trip.
    style = CaptionStyle(StyleVariant.DETAILED, Language.EN)
    rec = CaptionRecord(
        id=compute_record_id("ab" * 32, domain, style, "annotate/x", "m"),
        image_ref=image_ref,
        domain=domain,
        style=style,
        text=text,
        parent_id=None,
        producer="m",
        prompt_id="annotate/x",
        created_at="2026-08-18T12:00:00Z",
        token_count=count_tokens(text),
    )
    assert validate_record(rec).ok
    assert CaptionRecord.from_json_line(rec.to_json_line()) == rec
    _ = lang  # language axis exercised via style parsing elsewhere


# --- seed artifacts and manifests ---

def test_seed_artifact_embeds_source():
    art = SeedArtifact(
        domain=ImageDomain.TABLE,
        spec_digest="ab" * 32,
        image="<svg></svg>",
        source_code="\\begin{tabular}",
        seed_description="This is a table. Source:\n\\begin{tabular}",
        rng_seed=7,
    )
    assert art.image_digest() == content_digest(b"<svg></svg>")
    with pytest.raises(ValueError):
        SeedArtifact(
            domain=ImageDomain.TABLE,
            spec_digest="ab" * 32,
            image="<svg></svg>",
            source_code="\\begin{tabular}",
            seed_description="does not embed the source",
            rng_seed=7,
        )
    with pytest.raises(ValueError):
        SeedArtifact(
            domain=ImageDomain.NATURAL,
            spec_digest="ab" * 32,
            image="<svg></svg>",
            source_code="x",
            seed_description="x",
            rng_seed=7,
        )


def test_manifest_dedups_inputs_and_requires_prefix():
    manifest = JobManifest(
        job_id="job-1",
        inputs=(
            ManifestInput("a.png", ImageDomain.NATURAL),
            ManifestInput("a.png", ImageDomain.NATURAL),
            ManifestInput("a.png", ImageDomain.POSTER),
        ),
        styles=(CaptionStyle.parse("detailed"),),
        bindings={},
        shard_prefix="shards",
    )
    assert len(manifest.inputs) == 2
    with pytest.raises(ValueError):
        JobManifest(
            job_id="job-1", inputs=(), styles=(), bindings={}, shard_prefix="",
        )


def test_now_rfc3339_shape():
    from datetime import datetime, timezone

    epoch = datetime(2026, 8, 18, 12, 0, 0, tzinfo=timezone.utc).timestamp()
    stamp = now_rfc3339(clock=lambda: epoch + 0.7)
    assert stamp == "2026-08-18T12:00:00Z"
    assert is_rfc3339(stamp)
    assert not is_rfc3339("2026-08-18T12:00:00+00:00")
