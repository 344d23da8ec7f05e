/**
 * Canvas mask editor. The patch renders at native resolution times an
 * integer zoom factor (no fractional scaling, so every screen pixel maps to
 * exactly one mask pixel). The editable layer starts as the model's
 * thresholded prediction; the human corrects it with a round brush. The
 * uncertainty heatmap is drawn as a translucent overlay and never touches
 * the mask or the image.
 */

import { countForeground, maskFromRgba, stampCircle, stampSegment } from "./mask.js";
import { UndoStack } from "./undo.js";
import type { QueueItem } from "./queueState.js";

export type BrushMode = "paint" | "erase";

const MIN_ZOOM = 1;
const MAX_ZOOM = 16;
const TARGET_CANVAS_PX = 384;

async function fetchBitmap(url: string): Promise<ImageBitmap> {
  const resp = await fetch(url, { cache: "no-store" });
  if (!resp.ok) throw new Error(`${url}: ${resp.status} ${resp.statusText}`);
  return createImageBitmap(await resp.blob());
}

function bitmapMask(bitmap: ImageBitmap): Uint8Array {
  const off = document.createElement("canvas");
  off.width = bitmap.width;
  off.height = bitmap.height;
  const ctx = off.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0);
  const rgba = ctx.getImageData(0, 0, bitmap.width, bitmap.height).data;
  return maskFromRgba(rgba);
}

export class MaskEditor {
  mode: BrushMode = "paint";
  radius = 4;
  heatmapVisible = true;

  private item: QueueItem | null = null;
  private image: ImageBitmap | null = null;
  private heatmap: ImageBitmap | null = null;
  private mask: Uint8Array = new Uint8Array(0);
  private size = 0;
  private zoom = 1;
  private undoStack = new UndoStack(32);
  private maskLayer: HTMLCanvasElement;
  private drawing = false;
  private last: { x: number; y: number } | null = null;
  private hover: { x: number; y: number } | null = null;

  constructor(private canvas: HTMLCanvasElement,
              private onChange: () => void = () => {}) {
    this.maskLayer = document.createElement("canvas");
    canvas.addEventListener("pointerdown", (e) => this.pointerDown(e));
    canvas.addEventListener("pointermove", (e) => this.pointerMove(e));
    canvas.addEventListener("pointerup", (e) => this.pointerUp(e));
    canvas.addEventListener("pointercancel", (e) => this.pointerUp(e));
    canvas.addEventListener("pointerleave", () => {
      this.hover = null;
      this.render();
    });
  }

  get patchSize(): number {
    return this.size;
  }

  get zoomLevel(): number {
    return this.zoom;
  }

  get undoDepth(): number {
    return this.undoStack.depth;
  }

  get isOpen(): boolean {
    return this.item !== null;
  }

  get currentItem(): QueueItem | null {
    return this.item;
  }

  async open(item: QueueItem): Promise<void> {
    const [image, heatmap, prediction] = await Promise.all([
      fetchBitmap(item.image_url),
      fetchBitmap(item.heatmap_url),
      fetchBitmap(`/api/patch/${item.id}/prediction`),
    ]);
    this.item = item;
    this.image = image;
    this.heatmap = heatmap;
    this.size = image.width;
    this.mask = bitmapMask(prediction);
    this.maskLayer.width = this.size;
    this.maskLayer.height = this.size;
    this.undoStack.clear();
    this.zoom = Math.min(
      MAX_ZOOM, Math.max(MIN_ZOOM, Math.round(TARGET_CANVAS_PX / this.size)));
    this.drawing = false;
    this.last = null;
    this.render();
    this.onChange();
  }

  close(): void {
    this.item = null;
    this.image = null;
    this.heatmap = null;
    this.mask = new Uint8Array(0);
    this.undoStack.clear();
    const ctx = this.canvas.getContext("2d");
    if (ctx) ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    this.onChange();
  }

  maskCopy(): Uint8Array {
    return this.mask.slice();
  }

  foregroundCount(): number {
    return countForeground(this.mask);
  }

  setZoom(delta: number): void {
    const z = Math.min(MAX_ZOOM, Math.max(MIN_ZOOM, this.zoom + delta));
    if (z !== this.zoom) {
      this.zoom = z;
      this.render();
      this.onChange();
    }
  }

  setRadius(radius: number): void {
    this.radius = Math.min(32, Math.max(1, Math.round(radius)));
    this.render();
  }

  toggleHeatmap(): void {
    this.heatmapVisible = !this.heatmapVisible;
    this.render();
    this.onChange();
  }

  undo(): void {
    const prev = this.undoStack.pop();
    if (prev) {
      this.mask = prev;
      this.render();
      this.onChange();
    }
  }

  /** Wipe to all-background (its own undoable step). */
  clearMask(): void {
    if (!this.item) return;
    this.undoStack.push(this.mask);
    this.mask.fill(0);
    this.render();
    this.onChange();
  }

  private toPatch(e: PointerEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    return {
      x: Math.floor((e.clientX - rect.left) / this.zoom),
      y: Math.floor((e.clientY - rect.top) / this.zoom),
    };
  }

  private pointerDown(e: PointerEvent): void {
    if (!this.item || e.button !== 0) return;
    this.canvas.setPointerCapture(e.pointerId);
    this.undoStack.push(this.mask);
    this.drawing = true;
    const p = this.toPatch(e);
    this.last = p;
    stampCircle(this.mask, this.size, this.size, p.x, p.y, this.radius,
      this.mode === "paint" ? 1 : 0);
    this.render();
    this.onChange();
  }

  private pointerMove(e: PointerEvent): void {
    if (!this.item) return;
    const p = this.toPatch(e);
    this.hover = p;
    if (this.drawing && this.last) {
      stampSegment(this.mask, this.size, this.size,
        this.last.x, this.last.y, p.x, p.y, this.radius,
        this.mode === "paint" ? 1 : 0);
      this.last = p;
    }
    this.render();
  }

  private pointerUp(e: PointerEvent): void {
    if (this.drawing) {
      this.drawing = false;
      this.last = null;
      this.canvas.releasePointerCapture(e.pointerId);
      this.onChange();
    }
  }

  private renderMaskLayer(): void {
    const ctx = this.maskLayer.getContext("2d")!;
    const img = ctx.createImageData(this.size, this.size);
    for (let i = 0; i < this.mask.length; i++) {
      if (this.mask[i]) {
        img.data[i * 4] = 255;
        img.data[i * 4 + 1] = 64;
        img.data[i * 4 + 2] = 64;
        img.data[i * 4 + 3] = 140;
      }
    }
    ctx.putImageData(img, 0, 0);
  }

  render(): void {
    if (!this.item || !this.image) return;
    const px = this.size * this.zoom;
    if (this.canvas.width !== px) {
      this.canvas.width = px;
      this.canvas.height = px;
    }
    const ctx = this.canvas.getContext("2d")!;
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, px, px);
    ctx.drawImage(this.image, 0, 0, px, px);
    if (this.heatmapVisible && this.heatmap) {
      ctx.globalAlpha = 0.4;
      ctx.drawImage(this.heatmap, 0, 0, px, px);
      ctx.globalAlpha = 1;
    }
    this.renderMaskLayer();
    ctx.drawImage(this.maskLayer, 0, 0, px, px);
    if (this.hover) {
      ctx.strokeStyle = this.mode === "paint" ? "#ffffff" : "#ffb04e";
      ctx.lineWidth = 1;
      ctx.beginPath();
      ctx.arc((this.hover.x + 0.5) * this.zoom, (this.hover.y + 0.5) * this.zoom,
        this.radius * this.zoom, 0, Math.PI * 2);
      ctx.stroke();
    }
  }
}
