/**
 * Dependency-free canvas line chart: mean test Dice per center across
 * retraining rounds, one polyline per center plus a heavier overall line.
 */

import type { Metrics, MetricsRound } from "./api.js";

export interface ChartSeries {
  labels: string[];                     // one per round, in round order
  centers: number[];                    // ascending
  perCenter: Map<number, (number | null)[]>;  // null where a round lacks the center
  overall: number[];
}

/** Flatten the metrics payload into plottable series. */
export function chartSeries(metrics: Metrics): ChartSeries {
  const rounds = [...metrics.rounds].sort((a, b) => a.round - b.round);
  const centers = [...new Set(rounds.flatMap(
    (r) => Object.keys(r.report.per_center).map(Number)))].sort((a, b) => a - b);
  const perCenter = new Map<number, (number | null)[]>(
    centers.map((c) => [c, []]));
  for (const r of rounds) {
    for (const c of centers) {
      perCenter.get(c)!.push(r.report.per_center[String(c)]?.mean ?? null);
    }
  }
  return {
    labels: rounds.map(roundLabel),
    centers,
    perCenter,
    overall: rounds.map((r) => r.report.overall.mean),
  };
}

function roundLabel(r: MetricsRound): string {
  return r.name === "baseline" ? "base" : `r${r.round}`;
}

const PALETTE = ["#4e9af1", "#f1734e", "#4ef19a", "#d84ef1", "#f1d84e",
                 "#4ef1e3", "#f14e7c", "#9af14e"];

export function centerColor(index: number): string {
  return PALETTE[index % PALETTE.length]!;
}

export function drawDiceChart(canvas: HTMLCanvasElement, metrics: Metrics): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const series = chartSeries(metrics);
  if (series.labels.length === 0) {
    ctx.fillStyle = "#8a93a6";
    ctx.font = "12px sans-serif";
    ctx.textAlign = "center";
    ctx.fillText("no evaluation rounds yet", w / 2, h / 2);
    return;
  }

  const pad = { left: 34, right: 8, top: 8, bottom: 18 };
  const plotW = w - pad.left - pad.right;
  const plotH = h - pad.top - pad.bottom;
  const n = series.labels.length;
  const xAt = (i: number) => pad.left + (n === 1 ? plotW / 2 : (i / (n - 1)) * plotW);
  const yAt = (dice: number) => pad.top + (1 - dice) * plotH;

  ctx.strokeStyle = "#39404f";
  ctx.fillStyle = "#8a93a6";
  ctx.font = "10px sans-serif";
  ctx.lineWidth = 1;
  for (const tick of [0, 0.25, 0.5, 0.75, 1]) {
    const y = yAt(tick);
    ctx.beginPath();
    ctx.moveTo(pad.left, y);
    ctx.lineTo(w - pad.right, y);
    ctx.stroke();
    ctx.textAlign = "right";
    ctx.fillText(tick.toFixed(2), pad.left - 4, y + 3);
  }
  ctx.textAlign = "center";
  for (let i = 0; i < n; i++) {
    ctx.fillText(series.labels[i]!, xAt(i), h - 5);
  }

  const polyline = (values: (number | null)[], color: string, width: number) => {
    ctx.strokeStyle = color;
    ctx.fillStyle = color;
    ctx.lineWidth = width;
    ctx.beginPath();
    let pen = false;
    values.forEach((v, i) => {
      if (v === null) { pen = false; return; }
      const x = xAt(i);
      const y = yAt(v);
      if (pen) ctx.lineTo(x, y); else ctx.moveTo(x, y);
      pen = true;
    });
    ctx.stroke();
    values.forEach((v, i) => {
      if (v === null) return;
      ctx.beginPath();
      ctx.arc(xAt(i), yAt(v), width + 1, 0, Math.PI * 2);
      ctx.fill();
    });
  };

  series.centers.forEach((c, idx) => {
    polyline(series.perCenter.get(c)!, centerColor(idx), 1);
  });
  polyline(series.overall, "#e8ebf2", 2);
}

/** Legend entries matching drawDiceChart's colors. */
export function chartLegend(metrics: Metrics): { label: string; color: string }[] {
  const series = chartSeries(metrics);
  const entries = series.centers.map((c, idx) => (
    { label: `center ${c}`, color: centerColor(idx) }));
  entries.push({ label: "overall", color: "#e8ebf2" });
  return entries;
}
