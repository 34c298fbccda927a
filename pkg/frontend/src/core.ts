/** Client logic for blind pairwise caption review, free of DOM concerns.
 *
 * The server is authoritative for everything: which pair comes next, whether
 * a vote counts, how far along the rater is. This module holds the pinned
 * payload schemas, the API client, and the screen state machine. It ships to
 * the browser as a bare ES module, so it must stay dependency-free.
 *
 * Blinding discipline: caption source identities never appear in rater-facing
 * payloads. Any field outside the pinned schemas is dropped before it can
 * reach view state, with a warning, so even a misbehaving server cannot leak
 * a source label into the DOM.
 */

export type Side = "left" | "right";

export interface Progress {
  done: number;
  total: number;
}

export interface PairView {
  kind: "pair";
  itemId: string;
  image: string;
  captionLeft: string;
  captionRight: string;
  progress: Progress;
}

export interface DoneView {
  kind: "done";
  progress: Progress;
}

export type NextView = PairView | DoneView;

export class SchemaError extends Error {}

/** The request never reached a conclusion; the server may or may not have
 * acted on it. Retrying is safe because votes dedup on (rater, item). */
export class NetworkError extends Error {}

export class ServerError extends Error {
  constructor(
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

// Pinned payload schemas. Field sets are exact: the server promises no
// "source" key ever appears, and the client enforces it by dropping
// anything unexpected.
const PAIR_FIELDS = new Set(["item_id", "image", "caption_left", "caption_right", "progress"]);
const DONE_FIELDS = new Set(["done", "progress"]);
const ACK_FIELDS = new Set(["ok", "progress"]);

function parseProgress(raw: unknown): Progress {
  if (typeof raw !== "object" || raw === null) {
    throw new SchemaError("progress must be an object");
  }
  const { done, total } = raw as { done?: unknown; total?: unknown };
  if (typeof done !== "number" || typeof total !== "number") {
    throw new SchemaError("progress.done and progress.total must be numbers");
  }
  return { done, total };
}

function unexpectedFields(obj: Record<string, unknown>, expected: Set<string>): string[] {
  return Object.keys(obj)
    .filter((key) => !expected.has(key))
    .map((key) => `ignored unexpected field ${JSON.stringify(key)} in server payload`);
}

export function parseNextPayload(raw: unknown): { view: NextView; warnings: string[] } {
  if (typeof raw !== "object" || raw === null) {
    throw new SchemaError("payload must be a JSON object");
  }
  const obj = raw as Record<string, unknown>;
  if (obj.done === true) {
    return {
      view: { kind: "done", progress: parseProgress(obj.progress) },
      warnings: unexpectedFields(obj, DONE_FIELDS),
    };
  }
  for (const key of ["item_id", "image", "caption_left", "caption_right"]) {
    if (typeof obj[key] !== "string") {
      throw new SchemaError(`${key} must be a string`);
    }
  }
  return {
    view: {
      kind: "pair",
      itemId: obj.item_id as string,
      image: obj.image as string,
      captionLeft: obj.caption_left as string,
      captionRight: obj.caption_right as string,
      progress: parseProgress(obj.progress),
    },
    warnings: unexpectedFields(obj, PAIR_FIELDS),
  };
}

export interface VoteAck {
  ok: true;
  progress: Progress;
}

export function parseVoteAck(raw: unknown): { ack: VoteAck; warnings: string[] } {
  if (typeof raw !== "object" || raw === null) {
    throw new SchemaError("vote ack must be a JSON object");
  }
  const obj = raw as Record<string, unknown>;
  if (obj.ok !== true) {
    throw new SchemaError("vote ack must carry ok=true");
  }
  return {
    ack: { ok: true, progress: parseProgress(obj.progress) },
    warnings: unexpectedFields(obj, ACK_FIELDS),
  };
}

// Structural fetch so tests can serve responses without constructing real
// Response objects; window.fetch satisfies it as-is.
export interface FetchResponse {
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}

export interface FetchInit {
  method?: string;
  headers?: Record<string, string>;
  body?: string;
}

export type FetchLike = (url: string, init?: FetchInit) => Promise<FetchResponse>;

export class ReviewApi {
  constructor(
    private readonly baseUrl: string,
    readonly studyId: string,
    readonly rater: string,
    private readonly fetchImpl: FetchLike,
  ) {}

  private async request(url: string, init?: FetchInit): Promise<FetchResponse> {
    try {
      return await this.fetchImpl(url, init);
    } catch (exc) {
      throw new NetworkError(exc instanceof Error ? exc.message : String(exc));
    }
  }

  private static async errorOf(response: FetchResponse): Promise<ServerError> {
    let code = `HTTP ${response.status}`;
    let message = code;
    try {
      const body = (await response.json()) as { error?: unknown; message?: unknown };
      if (typeof body.error === "string") {
        code = body.error;
        message = typeof body.message === "string" ? body.message : code;
      }
    } catch {
      // non-JSON error body; the status line is all we have
    }
    return new ServerError(code, message);
  }

  async next(): Promise<{ view: NextView; warnings: string[] }> {
    const url =
      `${this.baseUrl}/studies/${encodeURIComponent(this.studyId)}/next` +
      `?rater=${encodeURIComponent(this.rater)}`;
    const response = await this.request(url);
    if (!response.ok) {
      throw await ReviewApi.errorOf(response);
    }
    return parseNextPayload(await response.json());
  }

  /** Returns {duplicate: true} when the server already holds a vote for
   * this (rater, item): a lost ack on a previous attempt, not a failure. */
  async vote(
    itemId: string,
    choice: Side,
  ): Promise<{ ack: VoteAck; warnings: string[] } | { duplicate: true }> {
    const url = `${this.baseUrl}/studies/${encodeURIComponent(this.studyId)}/votes`;
    const response = await this.request(url, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ rater: this.rater, item_id: itemId, choice }),
    });
    if (!response.ok) {
      const error = await ReviewApi.errorOf(response);
      if (error.code === "DuplicateVote") {
        return { duplicate: true };
      }
      throw error;
    }
    return parseVoteAck(await response.json());
  }
}

export type FlowState =
  | { status: "loading" }
  | {
      status: "pair";
      pair: PairView;
      selected: Side | null;
      submitting: boolean;
      retryMessage: string | null;
    }
  | { status: "done"; progress: Progress }
  | { status: "fatal"; message: string };

export function messageOf(exc: unknown): string {
  if (exc instanceof ServerError) {
    return `${exc.code}: ${exc.message}`;
  }
  return exc instanceof Error ? exc.message : String(exc);
}

/** Screen state machine: loading -> pair (select, submit) -> ... -> done.
 *
 * Submit is latched: once a vote is in flight no second one can start, so a
 * rapid double-click posts exactly once. A network failure keeps the same
 * pair and selection on screen behind a retry message; resubmitting is safe
 * because the server dedups and a DuplicateVote outcome is treated as the
 * earlier attempt having landed.
 */
export class ReviewFlow {
  state: FlowState = { status: "loading" };

  constructor(
    private readonly api: ReviewApi,
    private readonly onState: (state: FlowState) => void,
    private readonly onWarning: (message: string) => void = () => undefined,
  ) {}

  private setState(state: FlowState): void {
    this.state = state;
    this.onState(state);
  }

  async start(): Promise<void> {
    this.setState({ status: "loading" });
    await this.advance();
  }

  private async advance(): Promise<void> {
    try {
      const { view, warnings } = await this.api.next();
      for (const warning of warnings) {
        this.onWarning(warning);
      }
      if (view.kind === "done") {
        this.setState({ status: "done", progress: view.progress });
      } else {
        this.setState({
          status: "pair",
          pair: view,
          selected: null,
          submitting: false,
          retryMessage: null,
        });
      }
    } catch (exc) {
      this.setState({ status: "fatal", message: messageOf(exc) });
    }
  }

  select(side: Side): void {
    if (this.state.status !== "pair" || this.state.submitting) {
      return;
    }
    this.setState({ ...this.state, selected: side });
  }

  async submit(): Promise<void> {
    const state = this.state;
    if (state.status !== "pair" || state.selected === null || state.submitting) {
      return;
    }
    this.setState({ ...state, submitting: true, retryMessage: null });
    let outcome: Awaited<ReturnType<ReviewApi["vote"]>>;
    try {
      outcome = await this.api.vote(state.pair.itemId, state.selected);
    } catch (exc) {
      if (exc instanceof NetworkError) {
        this.setState({
          ...state,
          submitting: false,
          retryMessage: "connection failed; your choice was kept, submit again",
        });
        return;
      }
      this.setState({ status: "fatal", message: messageOf(exc) });
      return;
    }
    if ("warnings" in outcome) {
      for (const warning of outcome.warnings) {
        this.onWarning(warning);
      }
    }
    await this.advance();
  }
}
