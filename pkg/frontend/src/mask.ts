/**
 * Binary mask primitives shared by the brush editor and the upload path.
 *
 * Masks are flat row-major Uint8Arrays holding 0/1, matching the patch
 * dimensions. The run-length form is the service's upload format: run
 * lengths over the flat mask, alternating values starting with background,
 * summing to the mask area (a leading 0 covers masks that start with
 * foreground).
 */

export function rleEncode(mask: Uint8Array): number[] {
  const runs: number[] = [];
  let value = 0;
  let run = 0;
  for (let i = 0; i < mask.length; i++) {
    const v = mask[i]! ? 1 : 0;
    if (v === value) {
      run++;
    } else {
      runs.push(run);
      value = v;
      run = 1;
    }
  }
  runs.push(run);
  return runs;
}

export function rleDecode(runs: number[], area: number): Uint8Array {
  let total = 0;
  for (const r of runs) {
    if (r < 0 || !Number.isInteger(r)) throw new Error(`bad run length ${r}`);
    total += r;
  }
  if (total !== area) throw new Error(`run lengths sum to ${total}, expected ${area}`);
  const mask = new Uint8Array(area);
  let pos = 0;
  let value = 0;
  for (const r of runs) {
    if (value) mask.fill(1, pos, pos + r);
    pos += r;
    value ^= 1;
  }
  return mask;
}

/** Paint or erase a filled circle (dist² ≤ r², clipped to bounds). */
export function stampCircle(
  mask: Uint8Array, width: number, height: number,
  cx: number, cy: number, radius: number, value: 0 | 1,
): void {
  const r2 = radius * radius;
  const x0 = Math.max(0, Math.ceil(cx - radius));
  const x1 = Math.min(width - 1, Math.floor(cx + radius));
  const y0 = Math.max(0, Math.ceil(cy - radius));
  const y1 = Math.min(height - 1, Math.floor(cy + radius));
  for (let y = y0; y <= y1; y++) {
    const dy = y - cy;
    for (let x = x0; x <= x1; x++) {
      const dx = x - cx;
      if (dx * dx + dy * dy <= r2) mask[y * width + x] = value;
    }
  }
}

/** Stamp circles along a segment so fast pointer moves leave no gaps. */
export function stampSegment(
  mask: Uint8Array, width: number, height: number,
  x0: number, y0: number, x1: number, y1: number,
  radius: number, value: 0 | 1,
): void {
  const steps = Math.max(1, Math.ceil(Math.hypot(x1 - x0, y1 - y0)));
  for (let i = 0; i <= steps; i++) {
    const t = i / steps;
    stampCircle(mask, width, height, x0 + (x1 - x0) * t, y0 + (y1 - y0) * t,
      radius, value);
  }
}

/** Threshold the red channel of RGBA pixel data into a binary mask. */
export function maskFromRgba(rgba: Uint8Array | Uint8ClampedArray,
                             threshold = 128): Uint8Array {
  const mask = new Uint8Array(rgba.length / 4);
  for (let i = 0; i < mask.length; i++) {
    mask[i] = rgba[i * 4]! >= threshold ? 1 : 0;
  }
  return mask;
}

export function countForeground(mask: Uint8Array): number {
  let n = 0;
  for (let i = 0; i < mask.length; i++) n += mask[i]!;
  return n;
}
