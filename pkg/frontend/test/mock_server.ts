/** In-memory stand-in for the review service, speaking the pinned HTTP
 * contract over an injected fetch. It mirrors the server-side rules the
 * client depends on: serve-before-vote, one vote per (rater, item),
 * deterministic left/right blinding, event-sourced state suitable for
 * crash-replay. Every response body is recorded for blinding fuzz.
 */

import type { FetchInit, FetchLike, FetchResponse } from "../src/core.js";

export interface MockItem {
  itemId: string;
  image: string;
  group: "natural" | "non_natural";
  sourceA: string;
  captionA: string;
  sourceB: string;
  captionB: string;
}

export interface ServedEvent {
  type: "served";
  rater: string;
  itemId: string;
}

export interface VoteEvent {
  type: "vote";
  rater: string;
  itemId: string;
  choice: "left" | "right";
  decidedSource: string;
}

export type MockEvent = ServedEvent | VoteEvent;

export type VoteFailureMode = "none" | "drop-before-commit" | "drop-after-commit";

export class MockReviewServer {
  readonly events: MockEvent[] = [];
  /** Every body handed to the client, requests and responses alike. */
  readonly clientPayloads: string[] = [];
  voteFailureMode: VoteFailureMode = "none";
  voteCalls = 0;

  constructor(
    readonly studyId: string,
    readonly items: MockItem[],
    readonly raters: string[],
    readonly seed: number,
  ) {}

  /** Crash simulation: a fresh process rebuilt from the event log alone. */
  static replay(
    studyId: string,
    items: MockItem[],
    raters: string[],
    seed: number,
    events: readonly MockEvent[],
  ): MockReviewServer {
    const server = new MockReviewServer(studyId, items, raters, seed);
    for (const event of events) {
      server.events.push({ ...event });
    }
    return server;
  }

  /** Deterministic per (seed, rater, item), like the real service. */
  leftSourceFor(rater: string, itemId: string): "a" | "b" {
    const key = `${this.seed}|${rater}|${itemId}`;
    let h = 0;
    for (let i = 0; i < key.length; i++) {
      h = (h * 31 + key.charCodeAt(i)) >>> 0;
    }
    return h % 2 === 0 ? "a" : "b";
  }

  recordedVotes(): VoteEvent[] {
    return this.events.filter((event): event is VoteEvent => event.type === "vote");
  }

  private votedItems(rater: string): Set<string> {
    return new Set(
      this.recordedVotes()
        .filter((vote) => vote.rater === rater)
        .map((vote) => vote.itemId),
    );
  }

  private servedItems(rater: string): Set<string> {
    return new Set(
      this.events
        .filter((event) => event.type === "served" && event.rater === rater)
        .map((event) => event.itemId),
    );
  }

  /** Same shape and rounding as the real results endpoint. */
  aggregate(): {
    n_votes: number;
    groups: Record<string, { n_votes: number; preference: Record<string, number> }>;
    overall: Record<string, number>;
  } {
    const votes = this.recordedVotes();
    const itemsById = new Map(this.items.map((item) => [item.itemId, item]));
    const groupCounts: Record<string, Record<string, number>> = {};
    const overallCounts: Record<string, number> = {};
    for (const vote of votes) {
      const item = itemsById.get(vote.itemId);
      if (item === undefined) {
        throw new Error(`vote for unknown item ${vote.itemId}`);
      }
      const bucket = (groupCounts[item.group] ??= {});
      bucket[vote.decidedSource] = (bucket[vote.decidedSource] ?? 0) + 1;
      overallCounts[vote.decidedSource] = (overallCounts[vote.decidedSource] ?? 0) + 1;
    }
    const sourcesByGroup: Record<string, Set<string>> = {};
    const allSources = new Set<string>();
    for (const item of this.items) {
      (sourcesByGroup[item.group] ??= new Set()).add(item.sourceA);
      sourcesByGroup[item.group]?.add(item.sourceB);
      allSources.add(item.sourceA);
      allSources.add(item.sourceB);
    }
    const percentages = (
      counts: Record<string, number>,
      sources: Set<string>,
    ): Record<string, number> => {
      const total = Object.values(counts).reduce((a, b) => a + b, 0);
      const out: Record<string, number> = {};
      for (const source of [...sources].sort()) {
        out[source] = Math.round((1000 * (counts[source] ?? 0)) / total) / 10;
      }
      return out;
    };
    const groups: Record<string, { n_votes: number; preference: Record<string, number> }> = {};
    for (const group of Object.keys(groupCounts).sort()) {
      const counts = groupCounts[group] ?? {};
      groups[group] = {
        n_votes: Object.values(counts).reduce((a, b) => a + b, 0),
        preference: percentages(counts, sourcesByGroup[group] ?? new Set()),
      };
    }
    return { n_votes: votes.length, groups, overall: percentages(overallCounts, allSources) };
  }

  readonly fetch: FetchLike = async (url, init) => this.route(url, init);

  private respond(status: number, body: unknown): FetchResponse {
    const text = JSON.stringify(body);
    this.clientPayloads.push(text);
    return {
      ok: status >= 200 && status < 300,
      status,
      json: async () => JSON.parse(text) as unknown,
    };
  }

  private error(status: number, error: string, message: string): FetchResponse {
    return this.respond(status, { error, message });
  }

  private route(url: string, init?: FetchInit): FetchResponse {
    const parsed = new URL(url, "http://mock.invalid");
    const next = parsed.pathname.match(/^\/studies\/([^/]+)\/next$/);
    if (next !== null && (init?.method ?? "GET") === "GET") {
      return this.handleNext(next[1] ?? "", parsed.searchParams.get("rater") ?? "");
    }
    const votes = parsed.pathname.match(/^\/studies\/([^/]+)\/votes$/);
    if (votes !== null && init?.method === "POST") {
      if (typeof init.body === "string") {
        this.clientPayloads.push(init.body);
      }
      return this.handleVote(votes[1] ?? "", init.body ?? "");
    }
    return this.error(404, "NotFound", `no route for ${parsed.pathname}`);
  }

  private handleNext(studyId: string, rater: string): FetchResponse {
    if (studyId !== this.studyId) {
      return this.error(404, "UnknownStudy", `no study ${studyId}`);
    }
    if (!this.raters.includes(rater)) {
      return this.error(403, "UnknownRater", "unknown rater token");
    }
    const voted = this.votedItems(rater);
    const progress = { done: voted.size, total: this.items.length };
    for (const item of this.items) {
      if (voted.has(item.itemId)) {
        continue;
      }
      if (!this.servedItems(rater).has(item.itemId)) {
        this.events.push({ type: "served", rater, itemId: item.itemId });
      }
      const left = this.leftSourceFor(rater, item.itemId);
      return this.respond(200, {
        item_id: item.itemId,
        image: item.image,
        caption_left: left === "a" ? item.captionA : item.captionB,
        caption_right: left === "a" ? item.captionB : item.captionA,
        progress,
      });
    }
    return this.respond(200, { done: true, progress });
  }

  private handleVote(studyId: string, rawBody: string): FetchResponse {
    this.voteCalls += 1;
    if (studyId !== this.studyId) {
      return this.error(404, "UnknownStudy", `no study ${studyId}`);
    }
    let body: { rater?: unknown; item_id?: unknown; choice?: unknown };
    try {
      body = JSON.parse(rawBody) as typeof body;
    } catch {
      return this.error(400, "ReviewError", "vote body must be JSON");
    }
    const { rater, item_id: itemId, choice } = body;
    if (typeof rater !== "string" || typeof itemId !== "string" || typeof choice !== "string") {
      return this.error(400, "ReviewError", "vote fields must be strings");
    }
    if (!this.raters.includes(rater)) {
      return this.error(403, "UnknownRater", "unknown rater token");
    }
    const item = this.items.find((candidate) => candidate.itemId === itemId);
    if (item === undefined) {
      return this.error(404, "UnknownItem", `no item ${itemId}`);
    }
    if (choice !== "left" && choice !== "right") {
      return this.error(400, "ReviewError", "choice must be left or right");
    }
    if (this.voteFailureMode === "drop-before-commit") {
      // Request lost on the wire: the server never saw it.
      this.voteFailureMode = "none";
      throw new TypeError("connection reset before request arrived");
    }
    if (this.votedItems(rater).has(itemId)) {
      return this.error(409, "DuplicateVote", `rater already voted on ${itemId}`);
    }
    if (!this.servedItems(rater).has(itemId)) {
      return this.error(409, "UnservedItem", `${itemId} was never served to this rater`);
    }
    const left = this.leftSourceFor(rater, itemId);
    const decidedSide = choice === "left" ? left : left === "a" ? "b" : "a";
    this.events.push({
      type: "vote",
      rater,
      itemId,
      choice,
      decidedSource: decidedSide === "a" ? item.sourceA : item.sourceB,
    });
    if (this.voteFailureMode === "drop-after-commit") {
      // Ack lost on the wire: the vote is in, the client never hears it.
      this.voteFailureMode = "none";
      throw new TypeError("connection reset before response arrived");
    }
    return this.respond(200, {
      ok: true,
      progress: { done: this.votedItems(rater).size, total: this.items.length },
    });
  }
}

export function makeItems(count: number): MockItem[] {
  const subjects = ["harbor", "market", "orchard", "workshop", "bridge"];
  const items: MockItem[] = [];
  for (let i = 0; i < count; i++) {
    const subject = subjects[i % subjects.length] ?? "scene";
    items.push({
      itemId: `item-${String(i).padStart(4, "0")}`,
      image: `/images/${subject}-${i}.png`,
      group: i % 2 === 0 ? "natural" : "non_natural",
      sourceA: "src-alpha",
      captionA: `A wide view of the ${subject} with people working near the entrance (${i}).`,
      sourceB: "src-beta",
      captionB: `A ${subject} (${i}).`,
    });
  }
  return items;
}
