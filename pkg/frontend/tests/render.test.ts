import { describe, expect, it } from "vitest";

import { escapeHtml, renderBanner, renderCards, renderHistory } from "../src/render.js";
import type { HistoryEntry, ResultCard } from "../src/types.js";

const imageUrlFor = (id: string) => `http://api/image/${id}`;

function card(partial: Partial<ResultCard> & { id: string }): ResultCard {
  return {
    uri: `/data/${partial.id}.png`,
    score: 0.5,
    caption: null,
    captionState: "none",
    ...partial,
  };
}

describe("escapeHtml", () => {
  it("escapes markup-significant characters", () => {
    expect(escapeHtml(`<img src="x" onerror='y'> & more`)).toBe(
      "&lt;img src=&quot;x&quot; onerror=&#39;y&#39;&gt; &amp; more",
    );
  });
});

describe("renderCards", () => {
  it("preserves the given order even when scores ascend", () => {
    const html = renderCards(
      [card({ id: "low", score: 0.1 }), card({ id: "high", score: 0.9 })],
      imageUrlFor,
    );
    expect(html.indexOf("low")).toBeGreaterThan(-1);
    expect(html.indexOf("low")).toBeLessThan(html.indexOf("high"));
    expect(html).toContain("#1");
    expect(html).toContain("#2");
  });

  it("shows scores with six decimals", () => {
    const html = renderCards([card({ id: "a", score: 0.875 })], imageUrlFor);
    expect(html).toContain("0.875000");
  });

  it("renders a caption button before a caption exists", () => {
    const html = renderCards([card({ id: "a" })], imageUrlFor);
    expect(html).toContain('data-id="a"');
    expect(html).toContain("caption-btn");
  });

  it("shows the caption text verbatim once loaded", () => {
    const html = renderCards(
      [card({ id: "a", caption: "a beach", captionState: "done" })],
      imageUrlFor,
    );
    expect(html).toContain("a beach");
    expect(html).not.toContain("caption-btn");
  });

  it("shows progress while a caption is loading", () => {
    const html = renderCards([card({ id: "a", captionState: "loading" })], imageUrlFor);
    expect(html).toContain("captioning");
    expect(html).not.toContain("caption-btn");
  });

  it("offers a retry control after a caption failure", () => {
    const html = renderCards([card({ id: "a", captionState: "error" })], imageUrlFor);
    expect(html).toContain("caption failed");
    expect(html).toContain("caption-btn");
    expect(html).toContain('data-id="a"');
  });

  it("escapes ids and captions", () => {
    const html = renderCards(
      [card({ id: "<evil>", caption: "<b>bold</b>", captionState: "done" })],
      imageUrlFor,
    );
    expect(html).not.toContain("<evil>");
    expect(html).not.toContain("<b>bold</b>");
    expect(html).toContain("&lt;evil&gt;");
  });

  it("renders nothing for an empty result set", () => {
    expect(renderCards([], imageUrlFor)).toBe("");
  });
});

describe("renderHistory", () => {
  const entries: HistoryEntry[] = [
    { query: "harbor", k: 3, timestamp: 1, topIds: ["a"] },
    { query: "two ships", k: 5, timestamp: 2, topIds: ["b", "c"] },
  ];

  it("lists entries in the order they were made", () => {
    const html = renderHistory(entries);
    expect(html.indexOf("harbor")).toBeLessThan(html.indexOf("two ships"));
    expect(html).toContain('data-index="0"');
    expect(html).toContain('data-index="1"');
    expect(html).toContain("(k=5)");
  });

  it("is empty when there is no history", () => {
    expect(renderHistory([])).toBe("");
  });

  it("escapes the stored query text", () => {
    const html = renderHistory([{ query: "<script>", k: 1, timestamp: 0, topIds: [] }]);
    expect(html).not.toContain("<script>");
  });
});

describe("renderBanner", () => {
  it("announces errors with an alert role", () => {
    const html = renderBanner("server unreachable");
    expect(html).toContain('role="alert"');
    expect(html).toContain("server unreachable");
  });

  it("renders nothing when there is no error", () => {
    expect(renderBanner(null)).toBe("");
  });

  it("escapes the message", () => {
    expect(renderBanner("<oops>")).toContain("&lt;oops&gt;");
  });
});
