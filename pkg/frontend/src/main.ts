/** DOM wiring: sliders, canvas, gauge, event log, middleware transport. */

import { ExplorerModel, QueryRequest, Transport } from "./viewmodel.js";
import { Strategy } from "./frame.js";

const httpTransport: Transport = {
  async query(request: QueryRequest): Promise<ArrayBuffer> {
    const response = await fetch("query", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(request),
    });
    if (!response.ok) {
      throw new Error(`query failed: ${response.status} ${await response.text()}`);
    }
    return response.arrayBuffer();
  },
};

function byId<T extends HTMLElement>(id: string): T {
  const element = document.getElementById(id);
  if (!element) throw new Error(`missing element #${id}`);
  return element as T;
}

const canvas = byId<HTMLCanvasElement>("field");
const gaugeMarker = byId<HTMLElement>("gauge-marker");
const gaugeLabel = byId<HTMLElement>("gauge-label");
const badge = byId<HTMLElement>("m-badge");
const banner = byId<HTMLElement>("connection");
const eventLog = byId<HTMLUListElement>("events");
const strategyLabel = byId<HTMLElement>("client-strategy");

function drawField(model: ExplorerModel): void {
  if (!model.frame || !model.pixels) return;
  const d = model.frame.discretization;
  if (canvas.width !== d) {
    canvas.width = d;
    canvas.height = d;
  }
  const context = canvas.getContext("2d");
  if (!context) return;
  // grid rows run bottom-up, canvas rows top-down
  const flipped = new Uint8ClampedArray(model.pixels.length);
  const rowBytes = 4 * d;
  for (let iy = 0; iy < d; iy += 1) {
    flipped.set(model.pixels.subarray(iy * rowBytes, (iy + 1) * rowBytes), (d - 1 - iy) * rowBytes);
  }
  context.putImageData(new ImageData(flipped, d, d), 0, 0);
}

function drawGauge(model: ExplorerModel): void {
  if (!model.frame) return;
  const { residual, bound } = model.frame;
  // marker runs log-scaled from 1e-8*bound (left) to bound (right edge)
  const ratio = residual / bound;
  const position = Math.min(1, Math.max(0, (Math.log10(Math.max(ratio, 1e-8)) + 8) / 8));
  gaugeMarker.style.left = `${(position * 100).toFixed(1)}%`;
  gaugeLabel.textContent = `residual ${residual.toExponential(3)} / bound ${bound.toExponential(1)}`;
  gaugeLabel.classList.toggle("degraded", model.degraded);
  badge.textContent = `${model.frame.snapshotsUsed} snapshots (${model.frame.strategy})`;
}

function drawEvents(model: ExplorerModel): void {
  const recent = model.events.slice(-30).reverse();
  eventLog.replaceChildren(
    ...recent.map((entry) => {
      const item = document.createElement("li");
      item.textContent = `#${entry.seq} ${entry.name} ${JSON.stringify(entry.detail)}`;
      return item;
    }),
  );
}

function drawConnection(model: ExplorerModel): void {
  banner.textContent = model.lastError
    ? `${model.connection}: ${model.lastError}`
    : model.connection;
  banner.className = `connection ${model.connection}`;
}

const model = new ExplorerModel(httpTransport, {
  onChange: () => {
    drawField(model);
    drawGauge(model);
    drawEvents(model);
    drawConnection(model);
  },
});

for (const name of ["diff", "advx", "advy"] as const) {
  const slider = byId<HTMLInputElement>(`slider-${name}`);
  const label = byId<HTMLElement>(`value-${name}`);
  label.textContent = slider.value;
  model.sliders[name] = Number(slider.value);
  slider.addEventListener("input", () => {
    label.textContent = slider.value;
    model.setSlider(name, Number(slider.value));
  });
}

byId<HTMLSelectElement>("strategy").addEventListener("change", (event) => {
  const value = (event.target as HTMLSelectElement).value;
  model.setOverride(value === "default" ? null : (value as Exclude<Strategy, "adaptive">));
});

const boundInput = byId<HTMLInputElement>("max-res");
boundInput.addEventListener("change", () => {
  const value = Number(boundInput.value);
  model.setMaxRes(Number.isFinite(value) && value > 0 ? value : undefined);
});

const stream = new EventSource("events");
for (const name of ["hello", "query-answered", "update-started", "update-applied"]) {
  stream.addEventListener(name, (event) => {
    let detail: unknown = null;
    try {
      detail = JSON.parse((event as MessageEvent).data);
    } catch {
      detail = (event as MessageEvent).data;
    }
    model.handleEvent(name, detail);
  });
}
stream.onerror = () => model.streamLost();

// show the middleware's own configuration, then the first frame
void fetch("status")
  .then((response) => (response.ok ? response.json() : null))
  .then((status: { strategy?: string; max_res?: number } | null) => {
    if (status?.strategy) strategyLabel.textContent = status.strategy;
  })
  .finally(() => model.setSlider("diff", model.sliders.diff));
