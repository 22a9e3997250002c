// Thin HTTP client for the session service. The fetch implementation is
// injectable so tests can run against a fake or a spawned server.

import type {
  AdjustmentResult,
  SceneDocument,
  SessionInfo,
  StepResult,
  TranscriptEntry,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    detail: string,
  ) {
    super(`${code}: ${detail}`);
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let code = `HTTP${response.status}`;
  let detail = response.statusText;
  try {
    const body = (await response.json()) as { error?: string; detail?: unknown };
    if (body.error) code = body.error;
    if (body.detail) detail = JSON.stringify(body.detail);
  } catch {
    // non-JSON error body: keep the status text
  }
  return new ApiError(response.status, code, detail);
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(this.baseUrl + path, init);
    if (!response.ok) {
      throw await parseError(response);
    }
    return (await response.json()) as T;
  }

  private post<T>(path: string, body?: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
  }

  createSession(
    scene: SceneDocument,
    instruction: string,
    seed?: number,
  ): Promise<{ id: string; status: string }> {
    return this.post("/sessions", { scene, instruction, seed });
  }

  sessionInfo(id: string): Promise<SessionInfo> {
    return this.request(`/sessions/${id}`);
  }

  getScene(id: string): Promise<SceneDocument> {
    return this.request(`/sessions/${id}/scene`);
  }

  postPreference(id: string, text: string): Promise<{ record_id: string }> {
    return this.post(`/sessions/${id}/preference`, { text });
  }

  postAdjustment(id: string, scene: SceneDocument): Promise<AdjustmentResult> {
    return this.post(`/sessions/${id}/adjustment`, { scene });
  }

  step(id: string): Promise<StepResult> {
    return this.post(`/sessions/${id}/step`);
  }

  transcript(id: string): Promise<{ entries: TranscriptEntry[] }> {
    return this.request(`/sessions/${id}/transcript`);
  }
}
