"""Caption quality metrics and corpus statistics.

Four families:

- BLEU over pre-tokenized text, sentence-level and corpus-level, with add-1
  smoothing applied only to zero n-gram match counts.
- clip_score, the rectified-cosine similarity between an image embedding and
  a text embedding, scaled by 2.5.
- capture_lite, a multiset F1 over extracted caption elements (content-word
  chunks after stop-word removal and plural folding). This is a documented
  simplification; it does not parse and does not soft-match.
- token_length_stats, bucketed token-count histograms per record group.

All functions are pure and operate on plain data, so callers can map them
over shards in parallel and merge results.
"""

from __future__ import annotations

import math
import re
import statistics
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from capfoundry.records import CaptionRecord

__all__ = [
    "BUCKET_WIDTH",
    "BUCKET_RANGE_MAX",
    "N_BUCKETS",
    "DegenerateVector",
    "DimensionMismatch",
    "EmptyInput",
    "LengthStats",
    "MetricError",
    "STOPWORDS",
    "bleu",
    "capture_lite",
    "clip_score",
    "corpus_bleu",
    "extract_elements",
    "token_length_stats",
]


class MetricError(ValueError):
    """Base class for metric input errors."""


class EmptyInput(MetricError):
    """Candidate empty, or no non-empty reference supplied."""


class DimensionMismatch(MetricError):
    """Embedding vectors have different dimensions."""


class DegenerateVector(MetricError):
    """Embedding vector is empty or has zero norm."""


# --------------------------------------------------------------------------
# BLEU


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _clipped_matches(
    candidate: Sequence[str], references: Sequence[Sequence[str]], n: int
) -> tuple[int, int]:
    """Modified-precision numerator and denominator at order n.

    Each candidate n-gram counts at most as often as it appears in the single
    reference where it is most frequent.
    """
    cand = _ngram_counts(candidate, n)
    if not cand:
        return 0, 0
    ref_max: Counter = Counter()
    for ref in references:
        for gram, count in _ngram_counts(ref, n).items():
            if count > ref_max[gram]:
                ref_max[gram] = count
    matches = sum(min(count, ref_max[gram]) for gram, count in cand.items())
    return matches, sum(cand.values())


def _closest_ref_length(candidate: Sequence[str], references: Sequence[Sequence[str]]) -> int:
    # Ties in distance go to the shorter reference.
    return min((abs(len(r) - len(candidate)), len(r)) for r in references)[1]


def _check_pair(
    candidate: Sequence[str], references: Sequence[Sequence[str]]
) -> list[Sequence[str]]:
    if not candidate:
        raise EmptyInput("candidate has no tokens")
    refs = [r for r in references if r]
    if not refs:
        raise EmptyInput("need at least one non-empty reference")
    return refs


def _finish(
    match_by_n: Mapping[int, int],
    total_by_n: Mapping[int, int],
    ref_len: int,
    cand_len: int,
    smooth: bool,
) -> float:
    orders = [n for n in sorted(total_by_n) if total_by_n[n] > 0]
    log_sum = 0.0
    for n in orders:
        matches = match_by_n[n]
        if matches == 0:
            if not smooth:
                return 0.0
            p = (matches + 1) / (total_by_n[n] + 1)
        else:
            p = matches / total_by_n[n]
        log_sum += math.log(p)
    geo = math.exp(log_sum / len(orders))
    bp = min(1.0, math.exp(1.0 - ref_len / cand_len))
    return geo * bp


def bleu(
    candidate: Sequence[str],
    references: Sequence[Sequence[str]],
    max_n: int = 4,
    smooth: bool = True,
) -> float:
    """Sentence-level BLEU in [0, 1].

    Geometric mean of modified n-gram precisions for n = 1..max_n times the
    brevity penalty min(1, e^(1-r/c)), where r is the reference length
    closest to the candidate length (ties to the shorter reference). Orders
    longer than the candidate contribute no n-grams and are dropped. With
    smooth=True a zero match count at order n is replaced by add-1 smoothing
    (matches+1)/(total+1); with smooth=False any zero count pins the score
    to 0. Empty references are ignored; at least one non-empty reference is
    required.
    """
    refs = _check_pair(candidate, references)
    match_by_n: dict[int, int] = {}
    total_by_n: dict[int, int] = {}
    for n in range(1, max_n + 1):
        match_by_n[n], total_by_n[n] = _clipped_matches(candidate, refs, n)
    return _finish(match_by_n, total_by_n, _closest_ref_length(candidate, refs), len(candidate), smooth)


def corpus_bleu(
    pairs: Iterable[tuple[Sequence[str], Sequence[Sequence[str]]]],
    max_n: int = 4,
    smooth: bool = True,
) -> float:
    """Corpus-level BLEU in [0, 1].

    Clipped match and total counts are summed over all (candidate,
    references) pairs before taking precisions, and the brevity penalty uses
    the summed closest-reference and candidate lengths. Equals sentence
    bleu() on a single pair.
    """
    match_by_n: dict[int, int] = {n: 0 for n in range(1, max_n + 1)}
    total_by_n: dict[int, int] = {n: 0 for n in range(1, max_n + 1)}
    ref_len = 0
    cand_len = 0
    seen = False
    for candidate, references in pairs:
        refs = _check_pair(candidate, references)
        seen = True
        for n in range(1, max_n + 1):
            matches, total = _clipped_matches(candidate, refs, n)
            match_by_n[n] += matches
            total_by_n[n] += total
        ref_len += _closest_ref_length(candidate, refs)
        cand_len += len(candidate)
    if not seen:
        raise EmptyInput("no pairs")
    return _finish(match_by_n, total_by_n, ref_len, cand_len, smooth)


# --------------------------------------------------------------------------
# clip_score


def clip_score(image_vec: Sequence[float], text_vec: Sequence[float]) -> float:
    """2.5 x max(0, cosine(image_vec, text_vec)); range [0, 2.5].

    Callers mirroring percentage-scale reporting multiply by 100 themselves.
    A vector whose squared norm underflows to zero counts as degenerate.
    """
    if len(image_vec) != len(text_vec):
        raise DimensionMismatch(f"image dim {len(image_vec)} != text dim {len(text_vec)}")
    if len(image_vec) == 0:
        raise DegenerateVector("zero-dimensional vectors")
    norm_a = math.sqrt(math.fsum(float(x) * float(x) for x in image_vec))
    norm_b = math.sqrt(math.fsum(float(x) * float(x) for x in text_vec))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateVector("zero-norm vector")
    dot = math.fsum(float(a) * float(b) for a, b in zip(image_vec, text_vec))
    cos = max(-1.0, min(1.0, dot / (norm_a * norm_b)))
    return 2.5 * max(0.0, cos)


# --------------------------------------------------------------------------
# capture_lite

# Pinned stop-word list, exactly 175 entries. Changing it changes every
# capture_lite score, so it is frozen here rather than imported from a
# third-party package that may revise its list.
STOPWORDS: frozenset = frozenset(
    """
    a about above after again against all am an and any are aren't as at be
    because been before being below between both but by can cannot can't
    could couldn't did didn't do does doesn't doing don't down during each
    few for from further had hadn't has hasn't have haven't having he he'd
    he'll her here here's hers herself he's him himself his how i i'd if
    i'll i'm in into is isn't it its it's itself i've just let's me mine
    more most much my myself no nor not of off on or other our
    ours ourselves out over own same shall she she'd she'll she's should
    shouldn't so some such than that that's the their theirs them themselves
    then there there's these they they'd they'll they're they've this those
    through to too under until up us very was wasn't we we'd we'll were
    we're weren't we've what what's when when's where where's which while
    who whom who's whose why will with won't would wouldn't you you'd
    you'll your you're yours yourself yourselves you've
    """.split()
)

# Clause boundaries stop content runs so "a fox, a bird" yields two elements.
_CLAUSE_SPLIT = re.compile(r"[.,;:!?()\[\]{}\"]")
_WORD = re.compile(r"[a-z0-9']+")
_CHUNK_WIDTH = 2


def _fold_plural(token: str) -> str:
    # Crude suffix fold: boxes -> box, foxes -> fox, jumps -> jump. Keeps
    # short tokens and -ss words ("glass") intact. No irregular forms.
    if token.endswith("es") and len(token) >= 4:
        return token[:-2]
    if token.endswith("s") and not token.endswith("ss") and len(token) >= 3:
        return token[:-1]
    return token


def extract_elements(text: str) -> Counter:
    """Element multiset for one caption.

    Lowercase, split into clauses at punctuation, drop stop-words, fold
    plurals, then cut each maximal content-word run into left-to-right
    chunks of at most two tokens. Elements are the space-joined chunks.
    """
    elements: Counter = Counter()

    def flush(run: list) -> None:
        for i in range(0, len(run), _CHUNK_WIDTH):
            elements[" ".join(run[i : i + _CHUNK_WIDTH])] += 1
        run.clear()

    for clause in _CLAUSE_SPLIT.split(text.lower()):
        run: list = []
        for token in _WORD.findall(clause):
            if token in STOPWORDS:
                flush(run)
            else:
                run.append(_fold_plural(token))
        flush(run)
    return elements


def capture_lite(candidate: str, reference: str) -> dict:
    """Multiset precision/recall/F1 over extracted caption elements.

    Total on all string inputs: two captions that both extract to the empty
    multiset (stop-words only) score 1.0, matching the identity case; if
    exactly one side is empty the score is 0.
    """
    cand = extract_elements(candidate)
    ref = extract_elements(reference)
    if not cand and not ref:
        return {"precision": 1.0, "recall": 1.0, "f1": 1.0}
    overlap = sum((cand & ref).values())
    precision = overlap / sum(cand.values()) if cand else 0.0
    recall = overlap / sum(ref.values()) if ref else 0.0
    f1 = 0.0 if precision + recall == 0.0 else 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1}


# --------------------------------------------------------------------------
# token_length_stats

BUCKET_WIDTH = 64
BUCKET_RANGE_MAX = 2048
# 32 in-range buckets [0,64) .. [1984,2048), plus one overflow bucket.
N_BUCKETS = BUCKET_RANGE_MAX // BUCKET_WIDTH + 1


@dataclass(frozen=True)
class LengthStats:
    """Histogram of token counts for one record group."""

    buckets: tuple
    count: int
    mean: float
    median: float

    def to_json_dict(self) -> dict:
        return {
            "buckets": list(self.buckets),
            "count": self.count,
            "mean": self.mean,
            "median": self.median,
        }


def token_length_stats(records: Iterable[CaptionRecord], by: str = "style") -> dict:
    """Token-count histograms keyed by group, plus an "all" aggregate.

    by="style" groups on style.key() ("variant/lang"); by="domain" groups on
    the domain value. Neither key space contains "all", so the aggregate key
    cannot collide. An empty corpus yields just the all-zero aggregate.
    """
    keyers = {
        "style": lambda rec: rec.style.key(),
        "domain": lambda rec: rec.domain.value,
    }
    if by not in keyers:
        raise ValueError(f"unknown grouping {by!r}; expected one of {sorted(keyers)}")
    keyer = keyers[by]

    lengths_by_key: dict = {"all": []}
    for rec in records:
        lengths_by_key["all"].append(rec.token_count)
        lengths_by_key.setdefault(keyer(rec), []).append(rec.token_count)

    out = {}
    for key, lengths in lengths_by_key.items():
        buckets = [0] * N_BUCKETS
        for n in lengths:
            buckets[min(n // BUCKET_WIDTH, N_BUCKETS - 1)] += 1
        out[key] = LengthStats(
            buckets=tuple(buckets),
            count=len(lengths),
            mean=float(statistics.fmean(lengths)) if lengths else 0.0,
            median=float(statistics.median(lengths)) if lengths else 0.0,
        )
    return out
