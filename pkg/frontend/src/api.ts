/**
 * Thin typed wrappers over the review service's JSON endpoints. PNG
 * artifacts (image, heatmap, prediction, stored correction) are fetched by
 * URL directly where they are rendered; only JSON passes through here.
 */

import type { QueueItem } from "./queueState.js";

export interface RetrainStatus {
  status: "idle" | "running" | "failed" | "done";
  job_id: number;
  error: string | null;
  round: number;
  model_id: string | null;
}

export interface CenterStratum {
  mean: number;
  std: number;
  n: number;
}

export interface MetricsRound {
  round: number;
  name: string;
  model_id?: string;
  trained_on?: string[];
  report: {
    overall: CenterStratum;
    per_center: Record<string, CenterStratum>;
    [key: string]: unknown;
  };
}

export interface Metrics {
  rounds: MetricsRound[];
}

/** Non-2xx response; message carries the server's detail string. */
export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
  }
}

async function request<T>(path: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(path, init);
  if (!resp.ok) {
    let detail = `${resp.status} ${resp.statusText}`;
    try {
      const body = (await resp.json()) as { detail?: unknown };
      if (typeof body.detail === "string") detail = body.detail;
      else if (body.detail !== undefined) detail = JSON.stringify(body.detail);
    } catch {
      // non-JSON error body; keep the status line
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export function fetchQueue(center: number | null = null,
                           limit: number | null = null): Promise<QueueItem[]> {
  const params = new URLSearchParams();
  if (center !== null) params.set("center", String(center));
  if (limit !== null) params.set("limit", String(limit));
  const qs = params.toString();
  return request<QueueItem[]>(`/api/queue${qs ? `?${qs}` : ""}`);
}

export function submitCorrection(patchId: string, rle: number[]):
    Promise<{ id: string; review_status: string; overwrite: boolean }> {
  return request(`/api/patch/${patchId}/correction`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ rle }),
  });
}

export function skipPatch(patchId: string):
    Promise<{ id: string; review_status: string }> {
  return request(`/api/patch/${patchId}/skip`, { method: "POST" });
}

export function startRetrain(): Promise<{ job_id: number; status: string }> {
  return request("/api/retrain", { method: "POST" });
}

export function fetchRetrainStatus(): Promise<RetrainStatus> {
  return request("/api/retrain/status");
}

export function fetchMetrics(): Promise<Metrics> {
  return request("/api/metrics");
}
