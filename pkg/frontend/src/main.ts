// DOM wiring for the scene console: session setup, canvas interactions,
// preference entry, loop stepping, and transcript display.

import { ApiClient, ApiError } from "./api.js";
import { drawScene } from "./render.js";
import { SceneViewModel, type ViewConfig } from "./viewmodel.js";
import type { SceneDocument } from "./types.js";

const DEMO_SCENE: SceneDocument = {
  nodes: [
    {
      id: "table", label: "table", category: "", half_extents: [0.7, 0.4, 0.36],
      mass: 30, pose: { position: [0, 0, 0], yaw: 0 }, states: {},
      is_container: false, is_base: true,
    },
    ...[0, 1, 2].map((i) => ({
      id: `book${i}`, label: "book", category: "", half_extents: [0.08, 0.06, 0.015] as [number, number, number],
      mass: 0.4, pose: { position: [0.1 * i - 0.3, 0.15, 0.72] as [number, number, number], yaw: 0.3 * i },
      states: {}, is_container: false, is_base: false,
    })),
    ...[0, 1].map((i) => ({
      id: `mug${i}`, label: "mug", category: "", half_extents: [0.04, 0.04, 0.05] as [number, number, number],
      mass: 0.25, pose: { position: [0.2 + 0.12 * i, -0.2, 0.72] as [number, number, number], yaw: 0 },
      states: {}, is_container: false, is_base: false,
    })),
  ],
  edges: [
    ...["book0", "book1", "book2", "mug0", "mug1"].map((child) => ({
      kind: "on", parent: "table", child, source: "initial_observation",
    })),
  ],
};

function element<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) throw new Error(`missing element #${id}`);
  return found as T;
}

const canvas = element<HTMLCanvasElement>("scene-canvas");
const ctx = canvas.getContext("2d")!;
const cfg: ViewConfig = { pixelsPerMeter: 340, width: canvas.width, height: canvas.height };

const api = new ApiClient("");
const vm = new SceneViewModel();
let sessionId: string | null = null;

const banner = element<HTMLDivElement>("banner");
const eventLog = element<HTMLUListElement>("event-log");
const unplacedPanel = element<HTMLUListElement>("unplaced");
const statusLabel = element<HTMLSpanElement>("status");
const submitAdjustment = element<HTMLButtonElement>("submit-adjustment");
const prefInput = element<HTMLInputElement>("pref-text");
const prefSubmit = element<HTMLButtonElement>("submit-pref");
const stepButton = element<HTMLButtonElement>("step");
const transcriptPane = element<HTMLPreElement>("transcript");

function showBanner(text: string, kind: "info" | "error" | "terminal"): void {
  banner.textContent = text;
  banner.className = `banner ${kind}`;
  banner.hidden = false;
}

function logEvent(text: string): void {
  const item = document.createElement("li");
  item.textContent = text;
  eventLog.prepend(item);
}

function redraw(): void {
  drawScene(ctx, cfg, vm.computeDrawList(cfg));
  unplacedPanel.replaceChildren(
    ...vm.unplacedIds().map((id) => {
      const item = document.createElement("li");
      item.textContent = id;
      return item;
    }),
  );
  submitAdjustment.disabled = !vm.dirty || sessionId === null;
  prefSubmit.disabled = prefInput.value.trim() === "" || sessionId === null;
}

async function refreshScene(): Promise<void> {
  if (!sessionId) return;
  try {
    vm.load(await api.getScene(sessionId));
    banner.hidden = true;
  } catch (error) {
    showBanner(`scene fetch failed: ${error}`, "error");
  }
  redraw();
}

async function refreshStatus(): Promise<void> {
  if (!sessionId) return;
  const info = await api.sessionInfo(sessionId);
  statusLabel.textContent = `${info.status} (iteration ${info.loop_iteration})`;
}

element<HTMLButtonElement>("new-session").addEventListener("click", async () => {
  const sceneText = element<HTMLTextAreaElement>("scene-input").value.trim();
  const instruction = element<HTMLInputElement>("instruction").value.trim() || "tidy up the table";
  try {
    const scene = sceneText ? (JSON.parse(sceneText) as SceneDocument) : DEMO_SCENE;
    const created = await api.createSession(scene, instruction);
    sessionId = created.id;
    element<HTMLSpanElement>("session-id").textContent = created.id;
    eventLog.replaceChildren();
    transcriptPane.textContent = "";
    await refreshScene();
    await refreshStatus();
    showBanner("session created", "info");
  } catch (error) {
    showBanner(`session creation failed: ${error}`, "error");
  }
});

// -- canvas interactions ------------------------------------------------------

let dragging: string | null = null;
let lastX = 0;
let lastY = 0;

canvas.addEventListener("mousedown", (event) => {
  const bounds = canvas.getBoundingClientRect();
  const px = event.clientX - bounds.left;
  const py = event.clientY - bounds.top;
  const hit = vm.objectAt(cfg, px, py);
  vm.selection = hit && !vm.node(hit)?.is_base ? hit : null;
  dragging = vm.selection;
  lastX = px;
  lastY = py;
  redraw();
});

canvas.addEventListener("mousemove", (event) => {
  if (!dragging) return;
  const bounds = canvas.getBoundingClientRect();
  const px = event.clientX - bounds.left;
  const py = event.clientY - bounds.top;
  vm.dragBy(cfg, dragging, px - lastX, py - lastY);
  lastX = px;
  lastY = py;
  redraw();
});

canvas.addEventListener("mouseup", () => {
  if (dragging) {
    vm.finishDrag(dragging);
    dragging = null;
    redraw();
  }
});

canvas.addEventListener("wheel", (event) => {
  if (!vm.selection) return;
  event.preventDefault();
  vm.rotate(vm.selection, event.deltaY > 0 ? -Math.PI / 24 : Math.PI / 24);
  redraw();
});

// -- feedback controls -----------------------------------------------------------

submitAdjustment.addEventListener("click", async () => {
  if (!sessionId || !vm.dirty) return;
  try {
    const result = await api.postAdjustment(sessionId, vm.adjustedScene());
    vm.clearEdits();
    logEvent(
      result.record_id
        ? `adjustment accepted, learned ${result.record_id}`
        : `adjustment accepted (${result.pose_deltas.length} object(s) moved)`,
    );
    banner.hidden = true;
  } catch (error) {
    if (error instanceof ApiError) {
      showBanner(`${error.code}: adjustment rejected`, "error");
    } else {
      showBanner(String(error), "error");
    }
  }
  redraw();
});

prefInput.addEventListener("input", redraw);

prefSubmit.addEventListener("click", async () => {
  if (!sessionId) return;
  const text = prefInput.value.trim();
  if (!text) return;
  try {
    await api.postPreference(sessionId, text);
    logEvent(`preference recorded: ${text}`);
    prefInput.value = "";
  } catch (error) {
    showBanner(String(error), "error");
  }
  redraw();
});

stepButton.addEventListener("click", async () => {
  if (!sessionId) return;
  try {
    const result = await api.step(sessionId);
    statusLabel.textContent = `${result.status} (iteration ${result.loop_iteration})`;
    for (const event of result.events) {
      logEvent(`${event.kind}: ${JSON.stringify(event.payload).slice(0, 120)}`);
    }
    if (result.status === "converged" || result.status === "failed") {
      showBanner(`session ${result.status}`, "terminal");
    }
    await refreshScene();
    const transcript = await api.transcript(sessionId);
    transcriptPane.textContent = transcript.entries
      .map((entry) => `${entry.seq} ${entry.type}`)
      .join("\n");
  } catch (error) {
    if (error instanceof ApiError && error.status === 409) {
      showBanner("session finished: no more steps", "terminal");
    } else {
      showBanner(String(error), "error");
    }
  }
});

element<HTMLTextAreaElement>("scene-input").value = JSON.stringify(DEMO_SCENE, null, 2);
redraw();
