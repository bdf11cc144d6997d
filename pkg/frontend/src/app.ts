/** DOM glue: wires the pure state machine and renderers to the page. */

import { captionRequest, imageUrl, resolveBaseUrl, searchRequest } from "./api.js";
import {
  applyCaptionFailure,
  applyCaptionSuccess,
  applySearchFailure,
  applySearchSuccess,
  beginCaption,
  beginSearch,
  canSubmit,
  initialState,
  replayRequest,
  setK,
  setQuery,
  MAX_K,
  MIN_K,
} from "./state.js";
import { renderBanner, renderCards, renderHistory } from "./render.js";
import type { AppState } from "./types.js";

const baseUrl = resolveBaseUrl(window.location.search);
let state: AppState = initialState();

const queryInput = document.getElementById("query") as HTMLInputElement;
const kInput = document.getElementById("k") as HTMLInputElement;
const submitButton = document.getElementById("submit") as HTMLButtonElement;
const bannerHost = document.getElementById("banner") as HTMLDivElement;
const gridHost = document.getElementById("grid") as HTMLDivElement;
const historyHost = document.getElementById("history") as HTMLUListElement;

kInput.min = String(MIN_K);
kInput.max = String(MAX_K);
kInput.value = String(state.k);

function update(next: AppState): void {
  state = next;
  submitButton.disabled = !canSubmit(state) || state.searching;
  bannerHost.innerHTML = renderBanner(state.banner);
  gridHost.innerHTML = renderCards(state.cards, (id) => imageUrl(baseUrl, id));
  historyHost.innerHTML = renderHistory(state.history);
}

async function runSearch(query: string, k: number): Promise<void> {
  const begun = beginSearch(setK(setQuery(state, query), k));
  update(begun.state);
  try {
    const results = await searchRequest(baseUrl, query, state.k, fetch.bind(window));
    update(applySearchSuccess(state, begun.token, query, state.k, results, Date.now()));
  } catch (err) {
    update(applySearchFailure(state, begun.token, err instanceof Error ? err.message : String(err)));
  }
}

async function runCaption(id: string): Promise<void> {
  const begun = beginCaption(state, id);
  if (!begun.started) return; // already in flight for this card
  update(begun.state);
  try {
    const caption = await captionRequest(baseUrl, id, fetch.bind(window));
    update(applyCaptionSuccess(state, id, caption));
  } catch {
    update(applyCaptionFailure(state, id));
  }
}

queryInput.addEventListener("input", () => update(setQuery(state, queryInput.value)));
kInput.addEventListener("change", () => {
  update(setK(state, Number(kInput.value)));
  kInput.value = String(state.k);
});

document.getElementById("search-form")!.addEventListener("submit", (event) => {
  event.preventDefault();
  if (canSubmit(state)) void runSearch(state.query, state.k);
});

gridHost.addEventListener("click", (event) => {
  const target = (event.target as HTMLElement).closest<HTMLButtonElement>("button.caption-btn");
  if (target?.dataset.id) void runCaption(target.dataset.id);
});

historyHost.addEventListener("click", (event) => {
  const target = (event.target as HTMLElement).closest<HTMLButtonElement>("button.history-btn");
  if (!target?.dataset.index) return;
  const entry = state.history[Number(target.dataset.index)];
  if (!entry) return;
  const request = replayRequest(entry);
  queryInput.value = request.query;
  kInput.value = String(request.k);
  void runSearch(request.query, request.k);
});

update(state);
