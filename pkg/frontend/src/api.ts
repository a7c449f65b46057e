/** Typed client for the intervention service's JSON API.
 *
 * The three endpoints are the UI's only source of numbers: every probability
 * shown anywhere is a verbatim value from a response body.
 */

export type StateWord = "unknown" | "negative" | "positive";

export interface LabelResult {
  name: string;
  probability: number;
  state: StateWord;
}

export interface PredictResponse {
  labels: LabelResult[];
  baseline: number[];
}

export interface PredictRequest {
  sample_id: string;
  states: { label: string; state: StateWord }[];
}

export interface ModelInfo {
  labels: string[];
  groups: Record<string, number[]> | null;
  target_count: number | null;
  config: Record<string, unknown>;
}

export interface SampleEntry {
  id: string;
  targets: number[];
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(message: string, readonly status: number | null = null) {
    super(message);
  }
}

async function asJson(response: Response): Promise<unknown> {
  let body: unknown;
  try {
    body = await response.json();
  } catch {
    throw new ApiError(`bad response (${response.status})`, response.status);
  }
  if (!response.ok) {
    const detail = (body as { error?: string }).error ?? `HTTP ${response.status}`;
    throw new ApiError(detail, response.status);
  }
  return body;
}

export class ApiClient {
  constructor(
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
    private readonly base: string = "",
  ) {}

  private async get(path: string): Promise<unknown> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.base + path);
    } catch (err) {
      throw new ApiError(`endpoint unreachable: ${String(err)}`);
    }
    return asJson(response);
  }

  async modelInfo(): Promise<ModelInfo> {
    return (await this.get("/model/info")) as ModelInfo;
  }

  async samples(): Promise<SampleEntry[]> {
    const body = (await this.get("/samples")) as { samples: SampleEntry[] };
    return body.samples;
  }

  async predict(request: PredictRequest): Promise<PredictResponse> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.base + "/predict", {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(request),
      });
    } catch (err) {
      throw new ApiError(`endpoint unreachable: ${String(err)}`);
    }
    return (await asJson(response)) as PredictResponse;
  }
}
