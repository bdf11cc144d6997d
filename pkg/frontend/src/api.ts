/** Thin client over the documented HTTP/JSON interface.
 *
 * The fetch implementation is injectable so the suite can run against a
 * stub; the real app passes the browser's fetch and a configurable base URL.
 */

import type { SearchResult } from "./types.js";

export type Fetcher = (input: string, init?: RequestInit) => Promise<Response>;

export const DEFAULT_BASE_URL = "http://127.0.0.1:8000";

/** Base URL is configurable via an `api` query parameter on the page URL. */
export function resolveBaseUrl(locationSearch: string, fallback: string = DEFAULT_BASE_URL): string {
  const fromPage = new URLSearchParams(locationSearch).get("api");
  const base = fromPage && fromPage.trim() ? fromPage.trim() : fallback;
  return base.replace(/\/+$/, "");
}

export function searchUrl(baseUrl: string, query: string, k: number): string {
  return `${baseUrl}/search?q=${encodeURIComponent(query)}&k=${k}`;
}

export function imageUrl(baseUrl: string, id: string): string {
  return `${baseUrl}/image/${encodeURIComponent(id).replace(/%2F/g, "/")}`;
}

async function errorMessage(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { error?: string };
    if (body && typeof body.error === "string") return body.error;
  } catch {
    // fall through to the status line
  }
  return `request failed with status ${response.status}`;
}

export async function searchRequest(
  baseUrl: string,
  query: string,
  k: number,
  fetcher: Fetcher,
): Promise<SearchResult[]> {
  const response = await fetcher(searchUrl(baseUrl, query, k));
  if (!response.ok) throw new Error(await errorMessage(response));
  const body = (await response.json()) as { results: SearchResult[] };
  return body.results;
}

/** Fetches the indexed image and posts it back as a multipart upload under
 * the field name "image", exactly as the captioning endpoint expects. */
export async function captionRequest(
  baseUrl: string,
  id: string,
  fetcher: Fetcher,
): Promise<string> {
  const imageResponse = await fetcher(imageUrl(baseUrl, id));
  if (!imageResponse.ok) throw new Error(await errorMessage(imageResponse));
  const blob = await imageResponse.blob();
  const form = new FormData();
  form.append("image", blob, id.split("/").pop() ?? "image.png");
  const response = await fetcher(`${baseUrl}/caption`, { method: "POST", body: form });
  if (!response.ok) throw new Error(await errorMessage(response));
  const body = (await response.json()) as { caption: string };
  return body.caption;
}
