/** Pure HTML renderers; the DOM layer assigns their output to innerHTML.
 *
 * Cards are emitted in array order — which is the server's response order —
 * and are never re-sorted here.
 */

import { formatScore } from "./state.js";
import type { HistoryEntry, ResultCard } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

function captionBlock(card: ResultCard): string {
  switch (card.captionState) {
    case "none":
      return `<button class="caption-btn" data-id="${escapeHtml(card.id)}">caption</button>`;
    case "loading":
      return `<span class="caption-loading">captioning…</span>`;
    case "done":
      return `<p class="caption">${escapeHtml(card.caption ?? "")}</p>`;
    case "error":
      return (
        `<span class="caption-error">caption failed</span> ` +
        `<button class="caption-btn retry" data-id="${escapeHtml(card.id)}">retry</button>`
      );
  }
}

export function renderCards(cards: ResultCard[], imageUrlFor: (id: string) => string): string {
  return cards
    .map(
      (card, rank) => `<figure class="card" data-id="${escapeHtml(card.id)}">
  <img src="${escapeHtml(imageUrlFor(card.id))}" alt="${escapeHtml(card.id)}" loading="lazy">
  <figcaption>
    <span class="rank">#${rank + 1}</span>
    <span class="score">${formatScore(card.score)}</span>
    <span class="id">${escapeHtml(card.id)}</span>
    ${captionBlock(card)}
  </figcaption>
</figure>`,
    )
    .join("\n");
}

export function renderHistory(entries: HistoryEntry[]): string {
  return entries
    .map(
      (entry, i) =>
        `<li><button class="history-btn" data-index="${i}">` +
        `${escapeHtml(entry.query)} <small>(k=${entry.k})</small></button></li>`,
    )
    .join("\n");
}

export function renderBanner(message: string | null): string {
  return message === null ? "" : `<div class="banner" role="alert">${escapeHtml(message)}</div>`;
}
