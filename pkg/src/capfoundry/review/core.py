"""Blind pairwise caption study: assembly, blinding, votes, aggregation.

A study fixes, per item, an image and two captions from competing sources.
Raters see left/right caption panes with no source labels; which source
lands on the left is a pure function of (study seed, rater, item), so the
layout is reproducible without storing per-assignment state. Votes append
to a per-study JSONL event log before they are acknowledged, and the whole
service state reloads from the logs, so a crash never loses an acked vote.

Aggregation reports preference percentages per domain group (natural vs
non_natural) and overall, one decimal, binary choice only.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from capfoundry.records import now_rfc3339

__all__ = [
    "DOMAIN_GROUPS",
    "ReviewError",
    "MissingCaption",
    "UnknownStudy",
    "UnknownRater",
    "UnknownItem",
    "DuplicateVote",
    "UnservedItem",
    "NoVotes",
    "InvalidStudy",
    "StudyItem",
    "Study",
    "Vote",
    "ReviewService",
    "aggregate_votes",
    "left_source_for",
    "rater_item_order",
]

DOMAIN_GROUPS = ("natural", "non_natural")
CHOICES = ("left", "right")


class ReviewError(Exception):
    pass


class InvalidStudy(ReviewError):
    pass


class MissingCaption(InvalidStudy):
    pass


class UnknownStudy(ReviewError):
    pass


class UnknownRater(ReviewError):
    pass


class UnknownItem(ReviewError):
    pass


class DuplicateVote(ReviewError):
    pass


class UnservedItem(ReviewError):
    pass


class NoVotes(ReviewError):
    pass


@dataclass(frozen=True)
class StudyItem:
    item_id: str
    image_ref: str
    domain_group: str
    source_a: str
    source_b: str
    caption_a: str
    caption_b: str

    def caption_of(self, source: str) -> str:
        return self.caption_a if source == self.source_a else self.caption_b

    def other_source(self, source: str) -> str:
        return self.source_b if source == self.source_a else self.source_a


@dataclass(frozen=True)
class Study:
    study_id: str
    seed: int
    items: tuple[StudyItem, ...]
    rater_tokens: tuple[str, ...]
    items_per_rater: Optional[int]  # None = every rater sees every item
    created_at: str

    def item(self, item_id: str) -> StudyItem:
        for it in self.items:
            if it.item_id == item_id:
                return it
        raise UnknownItem(f"no item {item_id!r}")

    def to_json_dict(self) -> dict:
        return {
            "study_id": self.study_id,
            "seed": self.seed,
            "items": [
                {
                    "item_id": it.item_id,
                    "image_ref": it.image_ref,
                    "domain_group": it.domain_group,
                    "source_a": it.source_a,
                    "source_b": it.source_b,
                    "caption_a": it.caption_a,
                    "caption_b": it.caption_b,
                }
                for it in self.items
            ],
            "rater_tokens": list(self.rater_tokens),
            "items_per_rater": self.items_per_rater,
            "created_at": self.created_at,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "Study":
        return cls(
            study_id=obj["study_id"],
            seed=obj["seed"],
            items=tuple(StudyItem(**it) for it in obj["items"]),
            rater_tokens=tuple(obj["rater_tokens"]),
            items_per_rater=obj["items_per_rater"],
            created_at=obj["created_at"],
        )


@dataclass(frozen=True)
class Vote:
    study_id: str
    rater_id: str
    item_id: str
    shown_left_source: str
    choice: str
    decided_source: str
    timestamp: str

    def to_json_dict(self) -> dict:
        return {
            "study_id": self.study_id,
            "rater_id": self.rater_id,
            "item_id": self.item_id,
            "shown_left_source": self.shown_left_source,
            "choice": self.choice,
            "decided_source": self.decided_source,
            "timestamp": self.timestamp,
        }


# --------------------------------------------------------------------------
# Deterministic blinding


def left_source_for(seed: int, rater: str, item: StudyItem) -> str:
    """Which source sits in the left pane for this (rater, item).

    A stable hash rather than RNG state: reproducible from the study seed
    alone, independent of call order and of process restarts.
    """
    digest = hashlib.sha256(f"{seed}|{rater}|{item.item_id}".encode("utf-8")).digest()
    return item.source_a if digest[0] % 2 == 0 else item.source_b


def rater_item_order(seed: int, rater: str, items: tuple[StudyItem, ...]) -> list[str]:
    """Per-rater presentation order: seeded shuffle, stable per study."""
    order = [it.item_id for it in items]
    salt = hashlib.sha256(f"{seed}|{rater}".encode("utf-8")).hexdigest()
    random.Random(salt).shuffle(order)
    return order


# --------------------------------------------------------------------------
# Study construction


def _build_study(config: dict, clock: Callable[[], str]) -> Study:
    if not isinstance(config.get("items"), list) or not config["items"]:
        raise InvalidStudy("config.items must be a non-empty list")
    raters = config.get("raters", 1)
    if not isinstance(raters, int) or raters < 1:
        raise InvalidStudy("config.raters must be a positive integer")
    seed = config.get("seed", 0)
    if not isinstance(seed, int):
        raise InvalidStudy("config.seed must be an integer")
    items_per_rater = config.get("items_per_rater")
    if items_per_rater is not None and not (
        isinstance(items_per_rater, int) and 1 <= items_per_rater <= len(config["items"])
    ):
        raise InvalidStudy("config.items_per_rater out of range")

    items = []
    for i, raw in enumerate(config["items"]):
        group = raw.get("domain_group")
        if group not in DOMAIN_GROUPS:
            raise InvalidStudy(f"items[{i}]: domain_group must be one of {DOMAIN_GROUPS}")
        pair = []
        for side in ("caption_a", "caption_b"):
            cap = raw.get(side)
            if not isinstance(cap, dict) or not cap.get("text") or not cap.get("source"):
                raise MissingCaption(f"items[{i}]: {side} needs non-empty source and text")
            pair.append(cap)
        if pair[0]["source"] == pair[1]["source"]:
            raise InvalidStudy(f"items[{i}]: the two captions must come from distinct sources")
        items.append(
            StudyItem(
                item_id=f"item-{i:04d}",
                image_ref=raw.get("image_ref", ""),
                domain_group=group,
                source_a=pair[0]["source"],
                source_b=pair[1]["source"],
                caption_a=pair[0]["text"],
                caption_b=pair[1]["text"],
            )
        )

    rng = random.Random(seed)
    study_id = config.get("study_id") or f"study-{rng.getrandbits(32):08x}"
    tokens = tuple(f"rater-{rng.getrandbits(64):016x}" for _ in range(raters))
    return Study(
        study_id=study_id,
        seed=seed,
        items=tuple(items),
        rater_tokens=tokens,
        items_per_rater=items_per_rater,
        created_at=clock(),
    )


# --------------------------------------------------------------------------
# Aggregation


def _percentages(counts: dict[str, int], sources: set) -> dict[str, float]:
    total = sum(counts.values())
    return {src: round(100.0 * counts.get(src, 0) / total, 1) for src in sorted(sources)}


def aggregate_votes(study: Study, votes: list[Vote]) -> dict:
    """Preference percentages per domain group and overall, one decimal.

    Every source competing in a reported group appears, 0.0 included;
    groups with no votes yet are omitted (their denominator is zero).
    """
    if not votes:
        raise NoVotes(f"study {study.study_id} has no votes")
    overall: dict[str, int] = {}
    groups: dict[str, dict[str, int]] = {}
    for vote in votes:
        group = study.item(vote.item_id).domain_group
        overall[vote.decided_source] = overall.get(vote.decided_source, 0) + 1
        bucket = groups.setdefault(group, {})
        bucket[vote.decided_source] = bucket.get(vote.decided_source, 0) + 1
    sources_by_group: dict[str, set] = {}
    all_sources: set = set()
    for item in study.items:
        sources_by_group.setdefault(item.domain_group, set()).update(
            (item.source_a, item.source_b)
        )
        all_sources.update((item.source_a, item.source_b))
    return {
        "study_id": study.study_id,
        "n_votes": len(votes),
        "groups": {
            group: {
                "n_votes": sum(counts.values()),
                "preference": _percentages(counts, sources_by_group[group]),
            }
            for group, counts in sorted(groups.items())
        },
        "overall": _percentages(overall, all_sources),
    }


# --------------------------------------------------------------------------
# The service


@dataclass
class _StudyState:
    study: Study
    served: dict[str, set]  # rater -> item_ids served
    votes: dict[tuple, Vote]  # (rater, item_id) -> vote


class ReviewService:
    """In-memory state over append-only per-study logs under data_dir.

    Layout: <data_dir>/<study_id>/study.json (immutable definition
    snapshot) and events.jsonl (served + vote events, append-only).
    Construction replays every study found on disk.
    """

    def __init__(self, data_dir: str | Path, clock: Callable[[], str] = now_rfc3339):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self._lock = threading.Lock()
        self._studies: dict[str, _StudyState] = {}
        self._replay_all()

    # -- persistence --

    def _study_dir(self, study_id: str) -> Path:
        return self.data_dir / study_id

    def _events_path(self, study_id: str) -> Path:
        return self._study_dir(study_id) / "events.jsonl"

    def _append_event(self, study_id: str, event: dict) -> None:
        # The write lands on disk before the caller acks anything.
        with open(self._events_path(study_id), "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()

    def _replay_all(self) -> None:
        for snapshot in sorted(self.data_dir.glob("*/study.json")):
            study = Study.from_json_dict(json.loads(snapshot.read_text(encoding="utf-8")))
            state = _StudyState(study=study, served={}, votes={})
            events = snapshot.parent / "events.jsonl"
            if events.exists():
                raw = events.read_bytes()
                lines = raw.split(b"\n")
                for n, line in enumerate(lines):
                    if not line.strip():
                        continue
                    try:
                        event = json.loads(line)
                    except json.JSONDecodeError:
                        # A torn final line is a crash mid-append: the event
                        # was never acked, so it is dropped. Anything else
                        # is corruption.
                        if n == len(lines) - 1 and not raw.endswith(b"\n"):
                            break
                        raise
                    self._apply_event(state, event)
            self._studies[study.study_id] = state

    @staticmethod
    def _apply_event(state: _StudyState, event: dict) -> None:
        if event["type"] == "served":
            state.served.setdefault(event["rater"], set()).add(event["item_id"])
        elif event["type"] == "vote":
            vote = Vote(
                study_id=state.study.study_id,
                rater_id=event["rater"],
                item_id=event["item_id"],
                shown_left_source=event["shown_left_source"],
                choice=event["choice"],
                decided_source=event["decided_source"],
                timestamp=event["timestamp"],
            )
            state.votes[(vote.rater_id, vote.item_id)] = vote

    # -- lookups --

    def _state(self, study_id: str) -> _StudyState:
        state = self._studies.get(study_id)
        if state is None:
            raise UnknownStudy(f"no study {study_id!r}")
        return state

    def _check_rater(self, state: _StudyState, rater: str) -> None:
        if rater not in state.study.rater_tokens:
            raise UnknownRater("unknown rater token")

    def _assignment(self, state: _StudyState, rater: str) -> list[str]:
        order = rater_item_order(state.study.seed, rater, state.study.items)
        if state.study.items_per_rater is not None:
            order = order[: state.study.items_per_rater]
        return order

    # -- operations --

    def create_study(self, config: dict) -> dict:
        with self._lock:
            study = _build_study(config, self.clock)
            if study.study_id in self._studies:
                raise InvalidStudy(f"study {study.study_id!r} already exists")
            directory = self._study_dir(study.study_id)
            directory.mkdir(parents=True, exist_ok=False)
            (directory / "study.json").write_text(
                json.dumps(study.to_json_dict(), indent=2, sort_keys=True) + "\n",
                encoding="utf-8",
            )
            self._studies[study.study_id] = _StudyState(study=study, served={}, votes={})
            per_rater = study.items_per_rater or len(study.items)
            return {
                "study_id": study.study_id,
                "rater_tokens": list(study.rater_tokens),
                "n_items": len(study.items),
                "n_raters": len(study.rater_tokens),
                "n_assignments": per_rater * len(study.rater_tokens),
                "created_at": study.created_at,
            }

    def next_pair(self, study_id: str, rater: str) -> dict:
        with self._lock:
            state = self._state(study_id)
            self._check_rater(state, rater)
            order = self._assignment(state, rater)
            done = sum(1 for item_id in order if (rater, item_id) in state.votes)
            progress = {"done": done, "total": len(order)}
            for item_id in order:
                if (rater, item_id) in state.votes:
                    continue
                item = state.study.item(item_id)
                left = left_source_for(state.study.seed, rater, item)
                if item_id not in state.served.get(rater, set()):
                    self._append_event(
                        study_id,
                        {"type": "served", "rater": rater, "item_id": item_id,
                         "timestamp": self.clock()},
                    )
                    state.served.setdefault(rater, set()).add(item_id)
                return {
                    "item_id": item_id,
                    "image": item.image_ref,
                    "caption_left": item.caption_of(left),
                    "caption_right": item.caption_of(item.other_source(left)),
                    "progress": progress,
                }
            return {"done": True, "progress": progress}

    def submit_vote(self, study_id: str, rater: str, item_id: str, choice: str) -> dict:
        with self._lock:
            state = self._state(study_id)
            self._check_rater(state, rater)
            if choice not in CHOICES:
                raise ReviewError(f"choice must be one of {CHOICES}")
            item = state.study.item(item_id)
            if (rater, item_id) in state.votes:
                raise DuplicateVote(f"rater already voted on {item_id}")
            if item_id not in state.served.get(rater, set()):
                raise UnservedItem(f"{item_id} was never served to this rater")
            left = left_source_for(state.study.seed, rater, item)
            decided = left if choice == "left" else item.other_source(left)
            vote = Vote(
                study_id=study_id,
                rater_id=rater,
                item_id=item_id,
                shown_left_source=left,
                choice=choice,
                decided_source=decided,
                timestamp=self.clock(),
            )
            # Log first, ack after: a crash between the two leaves a vote
            # that replay restores, never an acked vote that vanished.
            self._append_event(
                study_id,
                {"type": "vote", "rater": rater, "item_id": item_id,
                 "shown_left_source": left, "choice": choice,
                 "decided_source": decided, "timestamp": vote.timestamp},
            )
            state.votes[(rater, item_id)] = vote
            order = self._assignment(state, rater)
            done = sum(1 for iid in order if (rater, iid) in state.votes)
            return {"ok": True, "progress": {"done": done, "total": len(order)}}

    def results(self, study_id: str) -> dict:
        with self._lock:
            state = self._state(study_id)
            return aggregate_votes(state.study, list(state.votes.values()))

    def votes_of(self, study_id: str) -> list[Vote]:
        with self._lock:
            return list(self._state(study_id).votes.values())
