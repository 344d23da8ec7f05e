/**
 * Queue panel rendering: center filter tabs plus the ranked list, kept in
 * the exact order the server returned.
 */

import type { QueueItem } from "./queueState.js";

export function renderTabs(container: HTMLElement, centers: number[],
                           active: number | null,
                           onPick: (center: number | null) => void): void {
  container.replaceChildren();
  const tabs: { label: string; value: number | null }[] = [
    { label: "all", value: null },
    ...centers.map((c) => ({ label: `center ${c}`, value: c })),
  ];
  for (const tab of tabs) {
    const btn = document.createElement("button");
    btn.type = "button";
    btn.className = "tab" + (tab.value === active ? " active" : "");
    btn.textContent = tab.label;
    btn.addEventListener("click", () => onPick(tab.value));
    container.appendChild(btn);
  }
}

export function renderQueue(container: HTMLElement, items: QueueItem[],
                            activeId: string | null,
                            onSelect: (item: QueueItem) => void): void {
  container.replaceChildren();
  if (items.length === 0) {
    const empty = document.createElement("div");
    empty.className = "queue-empty";
    empty.textContent = "queue is empty";
    container.appendChild(empty);
    return;
  }
  for (const item of items) {
    const row = document.createElement("div");
    row.className = `queue-row status-${item.review_status}`
      + (item.id === activeId ? " active" : "");
    row.dataset["patchId"] = item.id;

    const thumb = document.createElement("img");
    thumb.className = "thumb";
    thumb.src = item.image_url;
    thumb.alt = item.id;
    thumb.loading = "lazy";

    const meta = document.createElement("div");
    meta.className = "meta";
    const title = document.createElement("div");
    title.className = "title";
    title.textContent = `slide ${item.slide_id} (${item.x}, ${item.y})`;
    const sub = document.createElement("div");
    sub.className = "sub";
    sub.textContent = `center ${item.center} · U ${item.mean.toFixed(4)}`;
    meta.append(title, sub);

    const badge = document.createElement("span");
    badge.className = "badge";
    badge.textContent = item.review_status;

    row.append(thumb, meta, badge);
    row.addEventListener("click", () => onSelect(item));
    container.appendChild(row);
  }
}
