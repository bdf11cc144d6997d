/** Pure session-state transitions.
 *
 * Every function returns a fresh state object; history is append-only and
 * result order is taken verbatim from the server response.  The DOM layer
 * only ever renders what comes out of here.
 */

import type { AppState, HistoryEntry, ResultCard, SearchResult } from "./types.js";

export const MIN_K = 1;
export const MAX_K = 50;
export const DEFAULT_K = 9;

export function initialState(): AppState {
  return {
    query: "",
    k: DEFAULT_K,
    cards: [],
    history: [],
    banner: null,
    searchToken: 0,
    searching: false,
  };
}

export function setQuery(state: AppState, query: string): AppState {
  return { ...state, query };
}

/** k is kept inside [MIN_K, MAX_K]; non-numbers fall back to the current value. */
export function setK(state: AppState, k: number): AppState {
  if (!Number.isFinite(k)) return state;
  const clamped = Math.min(MAX_K, Math.max(MIN_K, Math.trunc(k)));
  return { ...state, k: clamped };
}

export function canSubmit(state: AppState): boolean {
  return state.query.trim().length > 0;
}

/** Marks a new in-flight search; the returned token must accompany the
 * response so that only the latest request can land. */
export function beginSearch(state: AppState): { state: AppState; token: number } {
  const token = state.searchToken + 1;
  return { state: { ...state, searchToken: token, searching: true, banner: null }, token };
}

function isStale(state: AppState, token: number): boolean {
  return token !== state.searchToken;
}

export function applySearchSuccess(
  state: AppState,
  token: number,
  query: string,
  k: number,
  results: SearchResult[],
  timestamp: number,
): AppState {
  if (isStale(state, token)) return state;
  const cards: ResultCard[] = results.map((r) => ({
    id: r.id,
    uri: r.uri,
    score: r.score,
    caption: null,
    captionState: "none",
  }));
  const entry: HistoryEntry = { query, k, timestamp, topIds: results.map((r) => r.id) };
  return {
    ...state,
    cards,
    history: [...state.history, entry],
    banner: null,
    searching: false,
  };
}

/** A failed search shows a banner and leaves the session history untouched. */
export function applySearchFailure(state: AppState, token: number, message: string): AppState {
  if (isStale(state, token)) return state;
  return { ...state, banner: message, searching: false };
}

/** Returns started=false when a caption request for this card is already in
 * flight, so a second click never issues a second request. */
export function beginCaption(state: AppState, id: string): { state: AppState; started: boolean } {
  const card = state.cards.find((c) => c.id === id);
  if (!card || card.captionState === "loading") {
    return { state, started: false };
  }
  return { state: withCard(state, id, { captionState: "loading", caption: null }), started: true };
}

export function applyCaptionSuccess(state: AppState, id: string, caption: string): AppState {
  if (!state.cards.some((c) => c.id === id && c.captionState === "loading")) return state;
  return withCard(state, id, { caption, captionState: "done" });
}

export function applyCaptionFailure(state: AppState, id: string): AppState {
  if (!state.cards.some((c) => c.id === id && c.captionState === "loading")) return state;
  return withCard(state, id, { caption: null, captionState: "error" });
}

function withCard(state: AppState, id: string, patch: Partial<ResultCard>): AppState {
  return {
    ...state,
    cards: state.cards.map((c) => (c.id === id ? { ...c, ...patch } : c)),
  };
}

/** Replaying a history entry reproduces the original request exactly. */
export function replayRequest(entry: HistoryEntry): { query: string; k: number } {
  return { query: entry.query, k: entry.k };
}

export function formatScore(score: number): string {
  return score.toFixed(6);
}
