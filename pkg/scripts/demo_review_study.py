"""Simulated pairwise caption-preference study, start to finish.

Creates a blinded two-source study, walks three scripted raters through
the serve/vote loop the HTTP endpoints expose, and prints the aggregate
preference percentages next to an independent hand tally. Raters prefer
the longer caption 80% of the time, so source "detailed" should win.

    python3 scripts/demo_review_study.py --out demo-review --seed 7
"""

import argparse
import random
from pathlib import Path

from capfoundry.review import ReviewService

N_ITEMS = 10
N_RATERS = 3


def study_config(seed: int) -> dict:
    rng = random.Random(f"review-demo:{seed}")
    items = []
    for i in range(N_ITEMS):
        subject = rng.choice(["harbor", "market", "orchard", "workshop", "bridge"])
        group = "natural" if i % 2 == 0 else "non_natural"
        items.append(
            {
                "image_ref": f"images/{subject}-{i}.png",
                "domain_group": group,
                "caption_a": {
                    "source": "detailed",
                    "text": f"A wide view of the {subject} with several people working near the entrance.",
                },
                "caption_b": {"source": "short", "text": f"A {subject}."},
            }
        )
    return {"study_id": f"demo-{seed}", "seed": seed, "raters": N_RATERS, "items": items}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="demo-review", help="study data directory")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    service = ReviewService(Path(args.out))
    created = service.create_study(study_config(args.seed))
    study_id = created["study_id"]
    print(f"study {study_id}: {created['n_items']} items, {created['n_raters']} raters")

    # Scripted raters: vote for the longer caption with p=0.8, else the
    # shorter one. Votes go through the same serve-then-vote protocol the
    # HTTP API enforces, so blinding and idempotency are exercised.
    tally: dict[str, int] = {"detailed": 0, "short": 0}
    for rater in created["rater_tokens"]:
        rng = random.Random(f"{args.seed}:{rater}")
        while True:
            pair = service.next_pair(study_id, rater)
            if pair.get("done"):
                break
            longer = "left" if len(pair["caption_left"]) >= len(pair["caption_right"]) else "right"
            choice = longer if rng.random() < 0.8 else ("right" if longer == "left" else "left")
            ack = service.submit_vote(study_id, rater, pair["item_id"], choice)
            assert ack["ok"]

    # Independent tally straight from the vote log, bypassing aggregation.
    for vote in service.votes_of(study_id):
        tally[vote.decided_source] += 1
    total = sum(tally.values())
    print(f"hand tally over {total} votes:", {k: round(100 * v / total, 1) for k, v in sorted(tally.items())})

    results = service.results(study_id)
    print(f"service aggregate over {results['n_votes']} votes:")
    print(f"  overall      {results['overall']}")
    for group, entry in sorted(results["groups"].items()):
        print(f"  {group:12s} {entry['preference']} (n={entry['n_votes']})")


if __name__ == "__main__":
    main()
