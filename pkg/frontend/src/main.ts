/** Entry point: wire query parameters, fetch, flow and DOM together.
 *
 * The bundle is served by the review service at /ui, so API paths are
 * same-origin absolute (/studies/...). The rater arrives as an opaque token
 * in the query string and is never stored anywhere else.
 */

import { ReviewApi, ReviewFlow } from "./core.js";
import type { FlowState } from "./core.js";
import { handleKey, render } from "./ui.js";

function boot(): void {
  const root = document.getElementById("app");
  if (root === null) {
    return;
  }
  const params = new URLSearchParams(window.location.search);
  const study = params.get("study");
  const rater = params.get("rater");
  const fatal = (message: string): void =>
    render(root, { status: "fatal", message }, { select: () => undefined, submit: () => undefined });
  if (study === null || rater === null) {
    fatal("open this page with ?study=<id>&rater=<token> from your invitation");
    return;
  }

  const api = new ReviewApi("", study, rater, (url, init) => window.fetch(url, init));
  const actions = {
    select: (side: "left" | "right") => flow.select(side),
    submit: () => void flow.submit(),
  };
  const flow: ReviewFlow = new ReviewFlow(
    api,
    (state: FlowState) => render(root, state, actions),
    (warning: string) => console.warn(warning),
  );

  document.addEventListener("keydown", (event) => {
    if (event.target instanceof HTMLInputElement || event.target instanceof HTMLTextAreaElement) {
      return;
    }
    if (handleKey(event.key, actions)) {
      event.preventDefault();
    }
  });

  void flow.start();
}

boot();
