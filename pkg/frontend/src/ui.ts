/** DOM layer: render a FlowState into a root element, nothing else.
 *
 * Rendering is a full rebuild per state change; at one pair on screen the
 * cost is irrelevant and it keeps the DOM a pure function of state. Caption
 * text goes in through textContent only, so markup inside a caption renders
 * inert instead of executing.
 */

import type { FlowState, Side } from "./core.js";

export interface FlowActions {
  select(side: Side): void;
  submit(): void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  node.className = className;
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

function progressBar(done: number, total: number): HTMLElement {
  const bar = el("header", "bar");
  bar.appendChild(el("span", "progress", `${done} / ${total}`));
  return bar;
}

function captionButton(
  side: Side,
  shortcut: string,
  text: string,
  state: { selected: Side | null; submitting: boolean },
  actions: FlowActions,
): HTMLButtonElement {
  const selected = state.selected === side;
  const button = el("button", `caption ${side}${selected ? " selected" : ""}`);
  button.type = "button";
  button.setAttribute("aria-pressed", String(selected));
  button.appendChild(el("span", "shortcut", shortcut));
  button.appendChild(el("p", "text", text));
  button.disabled = state.submitting;
  button.addEventListener("click", () => actions.select(side));
  return button;
}

export function render(root: HTMLElement, state: FlowState, actions: FlowActions): void {
  root.textContent = "";
  switch (state.status) {
    case "loading": {
      root.appendChild(el("main", "loading", "Loading…"));
      return;
    }
    case "pair": {
      const { pair } = state;
      root.appendChild(progressBar(pair.progress.done, pair.progress.total));
      const main = el("main", "pair");
      const image = el("img", "subject");
      image.src = pair.image;
      image.alt = "image under review";
      main.appendChild(image);
      main.appendChild(
        el("p", "hint", "Pick the caption that fits the image better (1 = left, 2 = right)."),
      );
      const captions = el("div", "captions");
      captions.appendChild(captionButton("left", "1", pair.captionLeft, state, actions));
      captions.appendChild(captionButton("right", "2", pair.captionRight, state, actions));
      main.appendChild(captions);
      if (state.retryMessage !== null) {
        main.appendChild(el("p", "retry-banner", state.retryMessage));
      }
      const submit = el(
        "button",
        "submit",
        state.submitting ? "Submitting…" : "Submit choice",
      );
      submit.type = "button";
      submit.disabled = state.selected === null || state.submitting;
      submit.addEventListener("click", () => actions.submit());
      main.appendChild(submit);
      root.appendChild(main);
      return;
    }
    case "done": {
      const main = el("main", "complete");
      main.appendChild(el("h1", "title", "All done"));
      main.appendChild(el("p", "votes", `${state.progress.done} votes recorded. Thank you.`));
      root.appendChild(main);
      return;
    }
    case "fatal": {
      // No buttons on purpose: after a schema or server error the pair on
      // screen cannot be trusted, so no vote is possible.
      const main = el("main", "fatal");
      main.appendChild(el("h1", "title", "Something went wrong"));
      main.appendChild(el("p", "message", state.message));
      main.appendChild(el("p", "hint", "Reload the page to pick up where you left off."));
      root.appendChild(main);
      return;
    }
  }
}

/** Keyboard shortcuts: 1/2 select a side, Enter submits. Returns whether
 * the key was consumed so the caller can preventDefault. */
export function handleKey(key: string, actions: FlowActions): boolean {
  if (key === "1") {
    actions.select("left");
    return true;
  }
  if (key === "2") {
    actions.select("right");
    return true;
  }
  if (key === "Enter") {
    actions.submit();
    return true;
  }
  return false;
}
