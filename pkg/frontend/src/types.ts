/** One ranked hit exactly as the search endpoint returns it. */
export interface SearchResult {
  id: string;
  uri: string;
  score: number;
}

export type CaptionState = "none" | "loading" | "done" | "error";

/** A rendered grid card; order within the grid is the server's order. */
export interface ResultCard {
  id: string;
  uri: string;
  score: number;
  caption: string | null;
  captionState: CaptionState;
}

export interface HistoryEntry {
  query: string;
  k: number;
  timestamp: number;
  topIds: string[];
}

export interface AppState {
  query: string;
  k: number;
  cards: ResultCard[];
  history: HistoryEntry[];
  banner: string | null;
  /** Monotonic token of the newest search; stale responses are dropped. */
  searchToken: number;
  searching: boolean;
}
