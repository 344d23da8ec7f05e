/**
 * Bounded undo history for the mask editor. Each entry is a full snapshot:
 * patches are small (64x64 by default) so copies are cheap and restores are
 * bit-exact without replaying strokes.
 */

export class UndoStack {
  private snapshots: Uint8Array[] = [];

  constructor(private capacity = 32) {
    if (capacity < 1) throw new Error("capacity must be >= 1");
  }

  /** Record the state as it was before an edit. Oldest entries fall off. */
  push(mask: Uint8Array): void {
    this.snapshots.push(mask.slice());
    if (this.snapshots.length > this.capacity) this.snapshots.shift();
  }

  /** Pop the most recent snapshot, or null when nothing is left. */
  pop(): Uint8Array | null {
    return this.snapshots.pop() ?? null;
  }

  get depth(): number {
    return this.snapshots.length;
  }

  clear(): void {
    this.snapshots = [];
  }
}
