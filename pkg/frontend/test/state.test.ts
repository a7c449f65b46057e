import { describe, expect, it, vi } from "vitest";

import { ApiClient, FetchLike, PredictResponse, StateWord } from "../src/api.js";
import { SessionStore, nextState } from "../src/state.js";

const LABELS = ["label_a", "label_b", "label_c"];
const BASELINE = [0.25, 0.5, 0.75];

function json(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

interface Call {
  url: string;
  body?: { sample_id: string; states: { label: string; state: StateWord }[] };
}

/** A deterministic stand-in for the real service: probabilities are a pure
 * function of the posted assignment, and all-unknown echoes the baseline. */
function makeService(options: { failOnCall?: number } = {}) {
  const calls: Call[] = [];
  let predictCalls = 0;
  const fetchImpl: FetchLike = async (url, init) => {
    const call: Call = { url };
    if (init?.body) call.body = JSON.parse(init.body as string);
    calls.push(call);
    if (url.endsWith("/model/info")) {
      return json({ labels: LABELS, groups: null, target_count: null, config: {} });
    }
    if (url.endsWith("/samples")) {
      return json({ samples: [{ id: "s0", targets: [1, 0, 1] }] });
    }
    predictCalls += 1;
    if (options.failOnCall === predictCalls) {
      return json({ error: "boom" }, 500);
    }
    const states = call.body!.states;
    const shift = states.reduce((acc, s) =>
      acc + (s.state === "positive" ? 0.1 : s.state === "negative" ? -0.04 : 0), 0);
    const response: PredictResponse = {
      labels: LABELS.map((name, i) => ({
        name,
        probability: BASELINE[i] + shift,
        state: states.find((s) => s.label === name)!.state,
      })),
      baseline: BASELINE,
    };
    return json(response);
  };
  return { fetchImpl, calls };
}

async function readyStore(options: { failOnCall?: number } = {}) {
  const service = makeService(options);
  const store = new SessionStore(new ApiClient(service.fetchImpl));
  await store.loadCatalog();
  await store.selectSample("s0");
  return { store, calls: service.calls };
}

describe("tri-state cycle", () => {
  it("is deterministic: unknown -> positive -> negative -> unknown", () => {
    expect(nextState("unknown")).toBe("positive");
    expect(nextState("positive")).toBe("negative");
    expect(nextState("negative")).toBe("unknown");
  });

  it("cycleState walks the same order and posts each step", async () => {
    const { store, calls } = await readyStore();
    expect(await store.cycleState("label_b")).toBe("positive");
    expect(await store.cycleState("label_b")).toBe("negative");
    expect(await store.cycleState("label_b")).toBe("unknown");
    const posted = calls
      .filter((c) => c.url.endsWith("/predict"))
      .map((c) => c.body!.states.find((s) => s.label === "label_b")!.state);
    expect(posted).toEqual(["unknown", "positive", "negative", "unknown"]);
  });
});

describe("catalog", () => {
  it("renders one row per label from /model/info", async () => {
    const { store } = await readyStore();
    expect(store.labels).toEqual(LABELS);
    expect(store.rows()).toHaveLength(LABELS.length);
  });

  it("posts the full assignment with every label listed", async () => {
    const { store, calls } = await readyStore();
    await store.setState("label_c", "negative");
    const last = calls[calls.length - 1].body!;
    expect(last.sample_id).toBe("s0");
    expect(last.states.map((s) => s.label)).toEqual(LABELS);
    expect(last.states[2].state).toBe("negative");
  });
});

describe("verbatim endpoint values", () => {
  it("stores response probabilities bit-for-bit, no local math", async () => {
    const exact = [0.123456789012345, 0.9999999999, 1e-9];
    const fetchImpl: FetchLike = async (url) => {
      if (url.endsWith("/model/info")) {
        return json({ labels: LABELS, groups: null, target_count: null, config: {} });
      }
      if (url.endsWith("/samples")) {
        return json({ samples: [{ id: "s0", targets: [0, 0, 0] }] });
      }
      return json({
        labels: LABELS.map((name, i) => ({
          name, probability: exact[i], state: "unknown",
        })),
        baseline: BASELINE,
      });
    };
    const store = new SessionStore(new ApiClient(fetchImpl));
    await store.loadCatalog();
    await store.selectSample("s0");
    const rows = store.rows();
    exact.forEach((value, i) => {
      expect(rows[i].current).toBe(value);
      expect(rows[i].delta).toBe(value - BASELINE[i]);
    });
  });
});

describe("reset and round trips", () => {
  it("reset-all makes every delta exactly 0", async () => {
    const { store } = await readyStore();
    await store.setState("label_a", "positive");
    await store.setState("label_b", "negative");
    expect(store.rows().some((r) => r.delta !== 0)).toBe(true);
    await store.resetAll();
    for (const row of store.rows()) {
      expect(row.delta).toBe(0);
      expect(row.state).toBe("unknown");
    }
  });

  it("toggling a label back to unknown restores the baseline response", async () => {
    const { store } = await readyStore();
    const before = store.rows();
    await store.cycleState("label_a");
    await store.cycleState("label_a");
    await store.cycleState("label_a");
    expect(store.rows()).toEqual(before);
  });
});

describe("concurrency", () => {
  it("keeps one request in flight and discards superseded responses", async () => {
    const pending: { body: Call["body"]; resolve: (r: Response) => void }[] = [];
    const fetchImpl: FetchLike = (url, init) => {
      if (url.endsWith("/model/info")) {
        return Promise.resolve(json({
          labels: LABELS, groups: null, target_count: null, config: {},
        }));
      }
      if (url.endsWith("/samples")) {
        return Promise.resolve(json({ samples: [{ id: "s0", targets: [0, 0, 0] }] }));
      }
      return new Promise((resolve) => {
        pending.push({ body: JSON.parse(init!.body as string), resolve });
      });
    };
    const store = new SessionStore(new ApiClient(fetchImpl));
    await store.loadCatalog();

    const first = store.selectSample("s0");
    expect(pending).toHaveLength(1);
    expect(store.requestInFlight).toBe(true);

    // two quick changes while the first request is still on the wire
    const second = store.setState("label_a", "positive");
    const third = store.setState("label_b", "positive");
    expect(pending).toHaveLength(1);

    const stale: PredictResponse = {
      labels: LABELS.map((name) => ({ name, probability: 0.111, state: "unknown" })),
      baseline: BASELINE,
    };
    pending[0].resolve(json(stale));
    await vi.waitFor(() => expect(pending).toHaveLength(2));
    // superseded response discarded; newest assignment went out instead
    expect(store.lastResponse).toBeNull();
    expect(pending[1].body!.states.find((s) => s.label === "label_a")!.state)
      .toBe("positive");
    expect(pending[1].body!.states.find((s) => s.label === "label_b")!.state)
      .toBe("positive");

    const fresh: PredictResponse = {
      labels: LABELS.map((name) => ({ name, probability: 0.9, state: "unknown" })),
      baseline: BASELINE,
    };
    pending[1].resolve(json(fresh));
    await Promise.all([first, second, third]);
    expect(store.requestInFlight).toBe(false);
    expect(store.rows()[0].current).toBe(0.9);
  });
});

describe("failure handling", () => {
  it("keeps previous values and surfaces the error message", async () => {
    const { store } = await readyStore({ failOnCall: 2 });
    const before = store.rows();
    await store.setState("label_a", "positive");
    expect(store.lastError).toBe("boom");
    expect(store.rows()).toEqual(before);
  });
});
