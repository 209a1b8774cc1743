/**
 * Typed client for the survey service HTTP API.
 *
 * The service hands out anonymised pairs: the client only ever sees opaque
 * image tokens and a left/right layout, never which system produced which
 * image. Keep it that way — nothing in this module may add identifying
 * metadata to requests or interpret it out of responses.
 */

export type Side = "left" | "right";

export interface PairView {
  pair_id: string;
  dataset: string;
  left_url: string;
  right_url: string;
}

/** Error carrying the HTTP status, so callers can tell 409 from 500. */
export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

/** What the app needs from the backend; tests substitute a fake. */
export interface SurveyService {
  datasets(): Promise<string[]>;
  nextPair(dataset: string): Promise<PairView | null>;
  vote(pairId: string, side: Side): Promise<void>;
}

async function fail(response: Response): Promise<never> {
  let detail = response.statusText || `HTTP ${response.status}`;
  try {
    const body = await response.json();
    if (typeof body?.detail === "string") {
      detail = body.detail;
    }
  } catch {
    // non-JSON error body; fall back to the status text
  }
  throw new ApiError(response.status, detail);
}

export class SurveyApi implements SurveyService {
  constructor(private readonly base: string = "") {}

  async datasets(): Promise<string[]> {
    const response = await fetch(`${this.base}/api/datasets`);
    if (!response.ok) {
      await fail(response);
    }
    const body = await response.json();
    return body.datasets as string[];
  }

  /** Next unseen pair for this session, or null once the pool is exhausted. */
  async nextPair(dataset: string): Promise<PairView | null> {
    const query = encodeURIComponent(dataset);
    const response = await fetch(`${this.base}/api/pair?dataset=${query}`);
    if (response.status === 204) {
      return null;
    }
    if (!response.ok) {
      await fail(response);
    }
    return (await response.json()) as PairView;
  }

  async vote(pairId: string, side: Side): Promise<void> {
    const response = await fetch(`${this.base}/api/vote`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ pair_id: pairId, chosen_side: side }),
    });
    if (!response.ok) {
      await fail(response);
    }
  }
}
