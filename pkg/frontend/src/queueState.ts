/**
 * Client-side view of the review queue. The server already orders items by
 * descending uncertainty; nothing here re-sorts, helpers only filter and
 * patch review status for optimistic updates.
 */

export type ReviewStatus = "pending" | "corrected" | "skipped";

/** One row of GET /api/queue. */
export interface QueueItem {
  id: string;
  slide_id: number;
  center: number;
  x: number;
  y: number;
  total: number;
  mean: number;
  background_fraction: number;
  rank: number;
  selected_by: string;
  review_status: ReviewStatus;
  image_url: string;
  heatmap_url: string;
}

/** Distinct centers present, ascending (for the filter tabs). */
export function centersOf(items: QueueItem[]): number[] {
  return [...new Set(items.map((it) => it.center))].sort((a, b) => a - b);
}

/** Filter without reordering; null keeps everything. */
export function filterByCenter(items: QueueItem[], center: number | null): QueueItem[] {
  return center === null ? items.slice() : items.filter((it) => it.center === center);
}

/** New array with one item's status replaced; the rest are shared. */
export function withStatus(items: QueueItem[], id: string,
                           status: ReviewStatus): QueueItem[] {
  return items.map((it) => (it.id === id ? { ...it, review_status: status } : it));
}

export function countCorrected(items: QueueItem[]): number {
  return items.filter((it) => it.review_status === "corrected").length;
}
