/** Session state: one selected sample, a full tri-state assignment, and the
 * latest prediction. No inference happens here; the store forwards the full
 * assignment to POST /predict on every change and keeps whatever the
 * endpoint answers, verbatim.
 *
 * Concurrency: at most one prediction request is in flight. A state change
 * while one is pending records the newest assignment; when the active
 * request settles its response is discarded as stale and the newest
 * assignment is sent instead.
 */

import { ApiClient, ApiError, ModelInfo, PredictResponse, SampleEntry, StateWord } from "./api.js";

export interface LabelRow {
  name: string;
  state: StateWord;
  current: number;
  baseline: number;
  /** Always current - baseline. */
  delta: number;
}

export interface Catalog {
  info: ModelInfo;
  samples: SampleEntry[];
}

const CYCLE: Record<StateWord, StateWord> = {
  unknown: "positive",
  positive: "negative",
  negative: "unknown",
};

/** Unknown -> Positive -> Negative -> Unknown. */
export function nextState(state: StateWord): StateWord {
  return CYCLE[state];
}

export class SessionStore {
  labels: string[] = [];
  samples: SampleEntry[] = [];
  sampleId: string | null = null;
  lastResponse: PredictResponse | null = null;
  lastError: string | null = null;

  private assignment = new Map<string, StateWord>();
  private queued: { label: string; state: StateWord }[] | null = null;
  private busy = false;
  private listeners: (() => void)[] = [];

  constructor(private readonly client: ApiClient) {}

  get requestInFlight(): boolean {
    return this.busy;
  }

  subscribe(listener: () => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  async loadCatalog(): Promise<Catalog> {
    const info = await this.client.modelInfo();
    const samples = await this.client.samples();
    this.labels = info.labels;
    this.samples = samples;
    this.assignment = new Map(this.labels.map((name) => [name, "unknown"]));
    this.emit();
    return { info, samples };
  }

  stateOf(name: string): StateWord {
    return this.assignment.get(name) ?? "unknown";
  }

  /** The full assignment, one entry per label in canonical order. */
  fullAssignment(): { label: string; state: StateWord }[] {
    return this.labels.map((label) => ({ label, state: this.stateOf(label) }));
  }

  async selectSample(id: string): Promise<void> {
    this.sampleId = id;
    this.assignment = new Map(this.labels.map((name) => [name, "unknown"]));
    await this.requestPrediction();
  }

  /** Cycle one label's tri-state and immediately re-predict. */
  async cycleState(name: string): Promise<StateWord> {
    const next = nextState(this.stateOf(name));
    await this.setState(name, next);
    return next;
  }

  async setState(name: string, state: StateWord): Promise<void> {
    if (!this.labels.includes(name)) {
      throw new ApiError(`unknown label ${name}`);
    }
    this.assignment.set(name, state);
    await this.requestPrediction();
  }

  async resetAll(): Promise<void> {
    this.assignment = new Map(this.labels.map((name) => [name, "unknown"]));
    await this.requestPrediction();
  }

  /** Queue-latest supersession: only the newest assignment's response is kept. */
  private async requestPrediction(): Promise<void> {
    if (this.sampleId === null) return;
    this.queued = this.fullAssignment();
    if (this.busy) return;
    this.busy = true;
    this.emit();
    while (this.queued !== null) {
      const states = this.queued;
      this.queued = null;
      const sampleId: string | null = this.sampleId;
      if (sampleId === null) continue;
      try {
        const response = await this.client.predict({ sample_id: sampleId, states });
        if (this.queued !== null || sampleId !== this.sampleId) {
          continue; // superseded while awaiting: stale response, discard
        }
        this.lastResponse = response;
        this.lastError = null;
      } catch (err) {
        if (this.queued === null) {
          // keep previous values; surface the failure
          this.lastError = err instanceof Error ? err.message : String(err);
        }
      }
    }
    this.busy = false;
    this.emit();
  }

  /** Rows built verbatim from the last response; empty before the first one. */
  rows(): LabelRow[] {
    if (this.lastResponse === null) return [];
    return this.lastResponse.labels.map((entry, i) => ({
      name: entry.name,
      state: entry.state,
      current: entry.probability,
      baseline: this.lastResponse!.baseline[i],
      delta: entry.probability - this.lastResponse!.baseline[i],
    }));
  }
}
