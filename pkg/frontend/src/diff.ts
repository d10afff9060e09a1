// Difference-pane helpers. The service encodes the signed difference into an
// 8-bit grayscale PNG centered at 128 with a fixed ±diff_scale intensity
// span; the client only colorizes those bytes (it never recomputes images).

export const NEAR_ZERO_THRESHOLD = 2 / 255;

// Diverging blue-white-red map over the already-scaled diff bytes.
export function colorizeDiffPixel(gray: number): [number, number, number] {
  const t = (gray - 128) / 127.5; // -1 .. 1 in fixed diff units
  if (t < 0) {
    const s = Math.min(-t, 1);
    return [Math.round(255 * (1 - s)), Math.round(255 * (1 - s)), 255];
  }
  const s = Math.min(t, 1);
  return [255, Math.round(255 * (1 - s)), Math.round(255 * (1 - s))];
}

export function colorizeDiff(gray: Uint8Array | number[]): Uint8ClampedArray {
  const out = new Uint8ClampedArray(gray.length * 4);
  for (let i = 0; i < gray.length; i++) {
    const value = gray[i] ?? 128;
    const [r, g, b] = colorizeDiffPixel(value);
    out[i * 4] = r;
    out[i * 4 + 1] = g;
    out[i * 4 + 2] = b;
    out[i * 4 + 3] = 255;
  }
  return out;
}

// The server reports the true max |difference| in intensity units; panes
// show a "no visible change" badge when it is within quantization noise.
export function isNearZeroDiff(diffMaxAbs: number | undefined): boolean {
  return diffMaxAbs !== undefined && diffMaxAbs <= NEAR_ZERO_THRESHOLD;
}
