/**
 * UI state machine, kept free of DOM so the contracts are testable:
 * slider gestures debounce into queries, at most one query is in flight,
 * and the displayed residual is always the frame's own number.
 */

import { decodeFrame, QueryFrame, Strategy } from "./frame.js";
import { renderField } from "./colormap.js";

export interface QueryRequest {
  parameter: [number, number, number];
  max_res?: number;
  strategy?: Exclude<Strategy, "adaptive">;
}

export interface Transport {
  query(request: QueryRequest): Promise<ArrayBuffer>;
}

export type Connection = "connecting" | "live" | "lost";

export interface EventEntry {
  seq: number;
  name: string;
  detail: unknown;
}

export interface SliderValues {
  diff: number;
  advx: number;
  advy: number;
}

type TimerHandle = unknown;

export interface ExplorerOptions {
  /** Settle time of a slider gesture before a query is issued. */
  debounceMs?: number;
  /** Per-query bound; omitted means "the basis's own". */
  maxRes?: number;
  onChange?: () => void;
  /** Timer hooks, injectable for tests. */
  setTimer?: (fn: () => void, ms: number) => TimerHandle;
  clearTimer?: (handle: TimerHandle) => void;
}

export class ExplorerModel {
  sliders: SliderValues = { diff: 15, advx: 0, advy: 0 };
  /** What-if strategy override; null asks the middleware for its own. */
  override: Exclude<Strategy, "adaptive"> | null = null;
  maxRes: number | undefined;

  frame: QueryFrame | null = null;
  pixels: Uint8ClampedArray | null = null;
  events: EventEntry[] = [];
  connection: Connection = "connecting";
  lastError: string | null = null;
  queriesIssued = 0;

  private readonly transport: Transport;
  private readonly debounceMs: number;
  private readonly onChange: () => void;
  private readonly setTimer: (fn: () => void, ms: number) => TimerHandle;
  private readonly clearTimer: (handle: TimerHandle) => void;
  private timer: TimerHandle | null = null;
  private inFlight = false;
  private queued = false;
  private eventSeq = 0;

  constructor(transport: Transport, options: ExplorerOptions = {}) {
    this.transport = transport;
    this.debounceMs = options.debounceMs ?? 150;
    this.maxRes = options.maxRes;
    this.onChange = options.onChange ?? (() => {});
    this.setTimer = options.setTimer ?? ((fn, ms) => setTimeout(fn, ms));
    this.clearTimer = options.clearTimer ?? ((handle) => clearTimeout(handle as number));
  }

  /** Residual shown in the gauge: the answer's certificate, verbatim. */
  get residual(): number | null {
    return this.frame ? this.frame.residual : null;
  }

  get degraded(): boolean {
    if (!this.frame) return false;
    return !this.frame.qualityOk || this.frame.residual > this.frame.bound;
  }

  setSlider(name: keyof SliderValues, value: number): void {
    this.sliders[name] = value;
    this.touch();
  }

  setOverride(strategy: Exclude<Strategy, "adaptive"> | null): void {
    this.override = strategy;
    this.touch();
  }

  setMaxRes(bound: number | undefined): void {
    this.maxRes = bound;
    this.touch();
  }

  /** Stream callbacks: named middleware events and loss of the stream. */
  handleEvent(name: string, detail: unknown): void {
    if (name === "hello") this.connection = "live";
    this.events.push({ seq: this.eventSeq++, name, detail });
    this.onChange();
  }

  streamLost(): void {
    this.connection = "lost";
    this.onChange();
  }

  private touch(): void {
    if (this.timer !== null) this.clearTimer(this.timer);
    this.timer = this.setTimer(() => {
      this.timer = null;
      this.fire();
    }, this.debounceMs);
    this.onChange();
  }

  private fire(): void {
    if (this.inFlight) {
      // one query per gesture: remember that the state moved on, re-issue
      // with the latest sliders once the current answer lands
      this.queued = true;
      return;
    }
    void this.issue();
  }

  private async issue(): Promise<void> {
    this.inFlight = true;
    this.queriesIssued += 1;
    const request: QueryRequest = {
      parameter: [this.sliders.diff, this.sliders.advx, this.sliders.advy],
    };
    if (this.maxRes !== undefined) request.max_res = this.maxRes;
    if (this.override !== null) request.strategy = this.override;
    try {
      const buffer = await this.transport.query(request);
      const frame = decodeFrame(buffer);
      this.frame = frame;
      this.pixels = renderField(frame.values, frame.discretization, frame.discretization);
      this.connection = "live";
      this.lastError = null;
    } catch (error) {
      // keep the last frame on screen; sliders stay usable
      this.connection = "lost";
      this.lastError = error instanceof Error ? error.message : String(error);
    } finally {
      this.inFlight = false;
      if (this.queued) {
        this.queued = false;
        this.fire();
      }
      this.onChange();
    }
  }
}
