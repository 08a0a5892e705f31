import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { encodeFrame, QueryFrame } from "../src/frame.js";
import { ExplorerModel, QueryRequest, Transport } from "../src/viewmodel.js";

const DEBOUNCE = 150;
const D = 8;

function makeFrame(overrides: Partial<QueryFrame> = {}): ArrayBuffer {
  const values = new Float64Array(D * D);
  for (let k = 0; k < values.length; k += 1) values[k] = Math.sin(k / 7);
  return encodeFrame({
    discretization: D,
    snapshotsUsed: 5,
    strategy: "basic",
    qualityOk: true,
    servedRemotely: false,
    residual: 7.815970093361102e-5,
    bound: 1e-3,
    bytesRead: 0,
    basisVersion: 1,
    values,
    ...overrides,
  });
}

/** Transport stub that records requests and fails on any overlap. */
class StubTransport implements Transport {
  requests: QueryRequest[] = [];
  active = 0;
  maxActive = 0;
  respond: (request: QueryRequest) => Promise<ArrayBuffer> = async () => makeFrame();

  async query(request: QueryRequest): Promise<ArrayBuffer> {
    this.requests.push(request);
    this.active += 1;
    this.maxActive = Math.max(this.maxActive, this.active);
    try {
      return await this.respond(request);
    } finally {
      this.active -= 1;
    }
  }
}

async function settle(): Promise<void> {
  await vi.advanceTimersByTimeAsync(DEBOUNCE + 1);
}

beforeEach(() => {
  vi.useFakeTimers();
});

afterEach(() => {
  vi.useRealTimers();
});

describe("slider gestures", () => {
  it("displays exactly the answer's residual after a settled change", async () => {
    const transport = new StubTransport();
    const model = new ExplorerModel(transport, { debounceMs: DEBOUNCE });
    model.setSlider("diff", 14.5);
    await settle();

    expect(transport.requests).toHaveLength(1);
    expect(transport.requests[0]?.parameter).toEqual([14.5, 0, 0]);
    // the gauge value is the frame's certificate, bit for bit
    expect(model.residual).toBe(7.815970093361102e-5);
    expect(model.frame?.residual).toBe(7.815970093361102e-5);
    expect(model.degraded).toBe(false);
    expect(model.pixels).toHaveLength(4 * D * D);
  });

  it("collapses a wiggle within the settle time into one query", async () => {
    const transport = new StubTransport();
    const model = new ExplorerModel(transport, { debounceMs: DEBOUNCE });
    for (const value of [11, 12, 13, 14, 15, 16]) {
      model.setSlider("diff", value);
      await vi.advanceTimersByTimeAsync(DEBOUNCE / 3);
    }
    await settle();
    expect(transport.requests).toHaveLength(1);
    expect(transport.requests[0]?.parameter).toEqual([16, 0, 0]);
  });

  it("never overlaps queries: a gesture during flight waits its turn", async () => {
    const transport = new StubTransport();
    let release: (buffer: ArrayBuffer) => void = () => {};
    transport.respond = () =>
      new Promise<ArrayBuffer>((resolve) => {
        release = resolve;
      });
    const model = new ExplorerModel(transport, { debounceMs: DEBOUNCE });

    model.setSlider("advx", 2);
    await settle(); // first query now in flight
    model.setSlider("advx", 4);
    await settle(); // would fire, but must queue instead
    expect(transport.requests).toHaveLength(1);

    release(makeFrame());
    await vi.advanceTimersByTimeAsync(1);
    expect(transport.requests).toHaveLength(2);
    expect(transport.requests[1]?.parameter).toEqual([15, 4, 0]);
    release(makeFrame());
    await vi.advanceTimersByTimeAsync(1);
    expect(transport.maxActive).toBe(1);
  });

  it("issues one query per settled gesture across a sweep of ten", async () => {
    const transport = new StubTransport();
    const model = new ExplorerModel(transport, { debounceMs: DEBOUNCE });
    for (let step = 1; step <= 10; step += 1) {
      model.setSlider("diff", 10 + step);
      await settle();
    }
    expect(transport.requests).toHaveLength(10);
    expect(model.queriesIssued).toBe(10);
    expect(transport.maxActive).toBe(1);
  });

  it("sends the what-if override and bound only when set", async () => {
    const transport = new StubTransport();
    const model = new ExplorerModel(transport, { debounceMs: DEBOUNCE });
    model.setSlider("diff", 12);
    await settle();
    expect(transport.requests[0]?.strategy).toBeUndefined();
    expect(transport.requests[0]?.max_res).toBeUndefined();

    model.setOverride("subspace");
    model.setMaxRes(1e-3);
    await settle();
    expect(transport.requests[1]?.strategy).toBe("subspace");
    expect(transport.requests[1]?.max_res).toBe(1e-3);

    model.setOverride(null);
    model.setMaxRes(undefined);
    await settle();
    expect(transport.requests[2]?.strategy).toBeUndefined();
    expect(transport.requests[2]?.max_res).toBeUndefined();
  });
});

describe("adaptive updates", () => {
  it("an out-of-range query yields update events then a near-zero frame", async () => {
    const transport = new StubTransport();
    const model = new ExplorerModel(transport, { debounceMs: DEBOUNCE });

    model.setSlider("diff", 14);
    await settle();
    const firstResidual = model.frame?.residual ?? Number.NaN;
    expect(firstResidual).toBeGreaterThan(1e-9);
    expect(model.degraded).toBe(false);

    // middleware behavior out of range: update events stream in while the
    // query is held, then the answer lands on the extended basis
    transport.respond = async () => {
      model.handleEvent("update-started", { parameter: [55, 0, 0] });
      model.handleEvent("update-applied", { basis_version: 2 });
      return makeFrame({ strategy: "adaptive", residual: 3.2e-13, basisVersion: 2 });
    };
    model.setSlider("diff", 55);
    await settle();

    const names = model.events.map((entry) => entry.name);
    const started = names.indexOf("update-started");
    const applied = names.indexOf("update-applied");
    expect(started).toBeGreaterThanOrEqual(0);
    expect(applied).toBeGreaterThan(started);
    expect(model.frame?.residual).toBeLessThan(1e-9);
    expect(model.frame?.basisVersion).toBe(2);
    expect(model.degraded).toBe(false);
  });
});

describe("stream and failures", () => {
  it("hello marks the stream live and events accumulate in order", () => {
    const model = new ExplorerModel(new StubTransport(), { debounceMs: DEBOUNCE });
    expect(model.connection).toBe("connecting");
    model.handleEvent("hello", { identifier: "abc" });
    model.handleEvent("query-answered", { seq: 0 });
    expect(model.connection).toBe("live");
    expect(model.events.map((entry) => entry.seq)).toEqual([0, 1]);
  });

  it("keeps the last frame and stays usable when the transport fails", async () => {
    const transport = new StubTransport();
    const model = new ExplorerModel(transport, { debounceMs: DEBOUNCE });
    model.setSlider("diff", 14);
    await settle();
    const kept = model.frame;
    expect(kept).not.toBeNull();

    transport.respond = async () => {
      throw new Error("middleware unreachable");
    };
    model.setSlider("diff", 20);
    await settle();
    expect(model.connection).toBe("lost");
    expect(model.lastError).toMatch(/unreachable/);
    expect(model.frame).toBe(kept); // last frame retained

    transport.respond = async () => makeFrame({ basisVersion: 7 });
    model.setSlider("diff", 21); // sliders still drive queries
    await settle();
    expect(model.connection).toBe("live");
    expect(model.lastError).toBeNull();
    expect(model.frame?.basisVersion).toBe(7);
  });

  it("a lost event stream flips the connection banner", () => {
    const model = new ExplorerModel(new StubTransport(), { debounceMs: DEBOUNCE });
    model.handleEvent("hello", {});
    model.streamLost();
    expect(model.connection).toBe("lost");
  });
});
