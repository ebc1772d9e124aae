// Mask compositing on raw RGBA buffers. Kept DOM-free: callers hand in
// ImageData-shaped arrays and draw the result themselves.

export interface Rgba {
  data: Uint8ClampedArray; // length = width * height * 4
  width: number;
  height: number;
}

export const MASK_TINT: [number, number, number] = [255, 64, 64];

/** A mask pixel is "on" when its luminance channel clears 127. */
export function maskFromGray(img: Rgba): boolean[] {
  const n = img.width * img.height;
  const out = new Array<boolean>(n);
  for (let i = 0; i < n; i++) out[i] = img.data[i * 4] > 127;
  return out;
}

/**
 * Blend a tint into base wherever the mask is on.
 *
 * alpha 0 leaves base untouched, 1 replaces masked pixels with the tint.
 * Returns a new buffer; base is not modified.
 */
export function tintMask(base: Rgba, mask: boolean[], alpha: number, tint = MASK_TINT): Rgba {
  if (mask.length !== base.width * base.height) {
    throw new Error(`mask length ${mask.length} does not match ${base.width}x${base.height}`);
  }
  const a = Math.min(1, Math.max(0, alpha));
  const data = new Uint8ClampedArray(base.data);
  for (let i = 0; i < mask.length; i++) {
    if (!mask[i]) continue;
    const o = i * 4;
    data[o] = data[o] * (1 - a) + tint[0] * a;
    data[o + 1] = data[o + 1] * (1 - a) + tint[1] * a;
    data[o + 2] = data[o + 2] * (1 - a) + tint[2] * a;
  }
  return { data, width: base.width, height: base.height };
}

/** Fraction of mask pixels that are on, for the status line. */
export function maskCoverage(mask: boolean[]): number {
  if (mask.length === 0) return 0;
  let on = 0;
  for (const m of mask) if (m) on++;
  return on / mask.length;
}
