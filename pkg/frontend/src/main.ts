/**
 * Page wiring: queue panel on the left, brush editor in the middle, Dice
 * trajectory and retrain control on the right. All server state changes go
 * through the documented POST endpoints; the UI applies optimistic status
 * flips and rolls them back when the server rejects the call.
 */

import { ApiError, fetchMetrics, fetchQueue, fetchRetrainStatus, skipPatch,
         startRetrain, submitCorrection } from "./api.js";
import type { Metrics } from "./api.js";
import { chartLegend, drawDiceChart } from "./chart.js";
import { MaskEditor } from "./editor.js";
import { rleEncode } from "./mask.js";
import { renderQueue, renderTabs } from "./queue.js";
import { centersOf, countCorrected, withStatus } from "./queueState.js";
import type { QueueItem } from "./queueState.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const banner = $<HTMLDivElement>("banner");
const tabsEl = $<HTMLDivElement>("tabs");
const queueEl = $<HTMLDivElement>("queue-list");
const canvas = $<HTMLCanvasElement>("editor-canvas");
const patchInfo = $<HTMLDivElement>("patch-info");
const editorMsg = $<HTMLDivElement>("editor-msg");
const paintBtn = $<HTMLButtonElement>("mode-paint");
const eraseBtn = $<HTMLButtonElement>("mode-erase");
const radiusInput = $<HTMLInputElement>("brush-radius");
const radiusLabel = $<HTMLSpanElement>("radius-label");
const undoBtn = $<HTMLButtonElement>("undo-btn");
const clearBtn = $<HTMLButtonElement>("clear-btn");
const zoomOutBtn = $<HTMLButtonElement>("zoom-out");
const zoomInBtn = $<HTMLButtonElement>("zoom-in");
const zoomLabel = $<HTMLSpanElement>("zoom-label");
const heatmapBtn = $<HTMLButtonElement>("heatmap-btn");
const submitBtn = $<HTMLButtonElement>("submit-btn");
const skipBtn = $<HTMLButtonElement>("skip-btn");
const chartCanvas = $<HTMLCanvasElement>("chart");
const legendEl = $<HTMLDivElement>("legend");
const retrainBtn = $<HTMLButtonElement>("retrain-btn");
const retrainStatusEl = $<HTMLDivElement>("retrain-status");

let allItems: QueueItem[] = [];
let viewItems: QueueItem[] = [];
let activeCenter: number | null = null;
let activeId: string | null = null;
let correctionsThisSession = 0;
let retrainRunning = false;
let pollTimer: ReturnType<typeof setTimeout> | null = null;

const editor = new MaskEditor(canvas, syncEditorControls);

function showBanner(message: string, retry: () => void): void {
  banner.replaceChildren();
  const text = document.createElement("span");
  text.textContent = message;
  const btn = document.createElement("button");
  btn.type = "button";
  btn.textContent = "retry";
  btn.addEventListener("click", () => {
    banner.hidden = true;
    retry();
  });
  banner.append(text, btn);
  banner.hidden = false;
}

function flashError(message: string): void {
  editorMsg.textContent = message;
  editorMsg.classList.add("error");
  setTimeout(() => {
    if (editorMsg.textContent === message) {
      editorMsg.textContent = "";
      editorMsg.classList.remove("error");
    }
  }, 6000);
}

function errorText(e: unknown): string {
  if (e instanceof ApiError) return `server: ${e.message}`;
  return e instanceof Error ? e.message : String(e);
}

function syncEditorControls(): void {
  const open = editor.isOpen;
  submitBtn.disabled = !open || retrainRunning;
  skipBtn.disabled = !open
    || editor.currentItem?.review_status === "corrected";
  undoBtn.disabled = !open || editor.undoDepth === 0;
  clearBtn.disabled = !open;
  zoomLabel.textContent = `${editor.zoomLevel}x`;
  heatmapBtn.classList.toggle("active", editor.heatmapVisible);
  paintBtn.classList.toggle("active", editor.mode === "paint");
  eraseBtn.classList.toggle("active", editor.mode === "erase");
  retrainBtn.disabled = retrainRunning
    || (correctionsThisSession === 0 && countCorrected(allItems) === 0);
}

function renderQueuePanel(): void {
  renderTabs(tabsEl, centersOf(allItems), activeCenter, (center) => {
    activeCenter = center;
    refreshView().catch((e) => flashError(errorText(e)));
  });
  renderQueue(queueEl, viewItems, activeId, (item) => void openItem(item));
}

async function refreshView(): Promise<void> {
  viewItems = await fetchQueue(activeCenter);
  renderQueuePanel();
}

async function refreshAll(): Promise<void> {
  allItems = await fetchQueue(null);
  viewItems = activeCenter === null ? allItems : await fetchQueue(activeCenter);
  renderQueuePanel();
  syncEditorControls();
}

async function refreshChart(): Promise<void> {
  const metrics: Metrics = await fetchMetrics();
  drawDiceChart(chartCanvas, metrics);
  legendEl.replaceChildren();
  for (const entry of chartLegend(metrics)) {
    const row = document.createElement("span");
    row.className = "legend-entry";
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.background = entry.color;
    row.append(swatch, document.createTextNode(entry.label));
    legendEl.appendChild(row);
  }
}

async function openItem(item: QueueItem): Promise<void> {
  try {
    await editor.open(item);
  } catch (e) {
    flashError(errorText(e));
    return;
  }
  activeId = item.id;
  patchInfo.textContent = `${item.id} · center ${item.center} · slide `
    + `${item.slide_id} @ (${item.x}, ${item.y}) · mean U ${item.mean.toFixed(4)}`;
  editorMsg.textContent = "";
  renderQueuePanel();
  syncEditorControls();
}

function applyStatus(id: string, status: "pending" | "corrected" | "skipped"): void {
  allItems = withStatus(allItems, id, status);
  viewItems = withStatus(viewItems, id, status);
  const current = editor.currentItem;
  if (current && current.id === id) current.review_status = status;
  renderQueuePanel();
  syncEditorControls();
}

async function submitCurrent(): Promise<void> {
  const item = editor.currentItem;
  if (!item) return;
  const previous = item.review_status;
  const rle = rleEncode(editor.maskCopy());
  applyStatus(item.id, "corrected");
  correctionsThisSession += 1;
  try {
    await submitCorrection(item.id, rle);
    editorMsg.textContent = `stored correction for ${item.id} `
      + `(${editor.foregroundCount()} foreground px)`;
    editorMsg.classList.remove("error");
  } catch (e) {
    correctionsThisSession -= 1;
    applyStatus(item.id, previous);
    flashError(errorText(e));
  }
}

async function skipCurrent(): Promise<void> {
  const item = editor.currentItem;
  if (!item) return;
  const previous = item.review_status;
  applyStatus(item.id, "skipped");
  try {
    await skipPatch(item.id);
  } catch (e) {
    applyStatus(item.id, previous);
    flashError(errorText(e));
  }
}

function describeStatus(s: { status: string; round: number;
                             model_id: string | null;
                             error: string | null }): string {
  const parts = [`retrain: ${s.status}`, `round ${s.round}`];
  if (s.model_id) parts.push(`model ${s.model_id.slice(0, 12)}`);
  if (s.error) parts.push(s.error);
  return parts.join(" · ");
}

function stopPolling(): void {
  if (pollTimer !== null) {
    clearTimeout(pollTimer);
    pollTimer = null;
  }
}

function pollRetrain(): void {
  stopPolling();
  pollTimer = setTimeout(async () => {
    let status;
    try {
      status = await fetchRetrainStatus();
    } catch {
      pollRetrain();  // transient; keep polling
      return;
    }
    retrainStatusEl.textContent = describeStatus(status);
    if (status.status === "running") {
      pollRetrain();
      return;
    }
    retrainRunning = false;
    syncEditorControls();
    if (status.status === "done") {
      correctionsThisSession = 0;
      activeId = null;
      editor.close();
      patchInfo.textContent = "retrained; pick the next patch";
      try {
        await refreshAll();
        await refreshChart();
      } catch (e) {
        flashError(errorText(e));
      }
    } else if (status.status === "failed") {
      flashError(status.error ?? "retrain failed");
    }
  }, 1000);
}

async function triggerRetrain(): Promise<void> {
  retrainRunning = true;
  syncEditorControls();
  retrainStatusEl.textContent = "retrain: starting";
  try {
    await startRetrain();
    pollRetrain();
  } catch (e) {
    retrainRunning = false;
    syncEditorControls();
    retrainStatusEl.textContent = "retrain: idle";
    flashError(errorText(e));
  }
}

function bindControls(): void {
  paintBtn.addEventListener("click", () => {
    editor.mode = "paint";
    syncEditorControls();
  });
  eraseBtn.addEventListener("click", () => {
    editor.mode = "erase";
    syncEditorControls();
  });
  radiusInput.addEventListener("input", () => {
    editor.setRadius(Number(radiusInput.value));
    radiusLabel.textContent = `${editor.radius}px`;
  });
  undoBtn.addEventListener("click", () => editor.undo());
  clearBtn.addEventListener("click", () => editor.clearMask());
  zoomInBtn.addEventListener("click", () => editor.setZoom(1));
  zoomOutBtn.addEventListener("click", () => editor.setZoom(-1));
  heatmapBtn.addEventListener("click", () => editor.toggleHeatmap());
  submitBtn.addEventListener("click", () => void submitCurrent());
  skipBtn.addEventListener("click", () => void skipCurrent());
  retrainBtn.addEventListener("click", () => void triggerRetrain());
  document.addEventListener("keydown", (e) => {
    if (e.target instanceof HTMLInputElement) return;
    if (e.key === "z" && !e.ctrlKey && !e.metaKey) editor.undo();
    if (e.key === "p") { editor.mode = "paint"; syncEditorControls(); }
    if (e.key === "e") { editor.mode = "erase"; syncEditorControls(); }
    if (e.key === "[") {
      editor.setRadius(editor.radius - 1);
      radiusInput.value = String(editor.radius);
      radiusLabel.textContent = `${editor.radius}px`;
    }
    if (e.key === "]") {
      editor.setRadius(editor.radius + 1);
      radiusInput.value = String(editor.radius);
      radiusLabel.textContent = `${editor.radius}px`;
    }
  });
}

async function boot(): Promise<void> {
  try {
    await refreshAll();
    await refreshChart();
    const status = await fetchRetrainStatus();
    retrainStatusEl.textContent = describeStatus(status);
    if (status.status === "running") {
      retrainRunning = true;
      syncEditorControls();
      pollRetrain();
    }
  } catch (e) {
    showBanner(`cannot reach review service (${errorText(e)})`, () => void boot());
  }
}

bindControls();
radiusInput.value = String(editor.radius);
radiusLabel.textContent = `${editor.radius}px`;
syncEditorControls();
void boot();
