/** Field rendering: deterministic color mapping with per-frame normalization. */

type Rgb = readonly [number, number, number];

// dark violet -> orange -> yellow ramp; index 0 doubles as the baseline color
const STOPS: readonly Rgb[] = [
  [13, 8, 135],
  [126, 3, 168],
  [203, 70, 121],
  [248, 149, 64],
  [240, 249, 33],
];

/** Non-finite cells render as this so they can never pass for data. */
export const SENTINEL_COLOR: Rgb = [255, 0, 255];

export function sampleColor(t: number): Rgb {
  const clamped = t <= 0 ? 0 : t >= 1 ? 1 : t;
  const position = clamped * (STOPS.length - 1);
  const index = Math.min(Math.floor(position), STOPS.length - 2);
  const frac = position - index;
  const lo = STOPS[index] as Rgb;
  const hi = STOPS[index + 1] as Rgb;
  return [
    Math.round(lo[0] + (hi[0] - lo[0]) * frac),
    Math.round(lo[1] + (hi[1] - lo[1]) * frac),
    Math.round(lo[2] + (hi[2] - lo[2]) * frac),
  ];
}

/**
 * Map a row-major scalar grid to RGBA pixels.
 *
 * Normalization is fixed per frame: the finite min/max of this grid span the
 * ramp. A grid with no spread (constant, all zero) renders uniformly in the
 * baseline color; NaN and infinite cells get the sentinel color.
 */
export function renderField(
  values: ArrayLike<number>,
  width: number,
  height: number,
): Uint8ClampedArray {
  if (width <= 0 || height <= 0 || values.length !== width * height) {
    throw new RangeError(`grid of ${values.length} cells is not ${width}x${height}`);
  }
  let lo = Infinity;
  let hi = -Infinity;
  for (let k = 0; k < values.length; k += 1) {
    const v = values[k] as number;
    if (Number.isFinite(v)) {
      if (v < lo) lo = v;
      if (v > hi) hi = v;
    }
  }
  const span = hi - lo;
  const pixels = new Uint8ClampedArray(4 * width * height);
  for (let k = 0; k < values.length; k += 1) {
    const v = values[k] as number;
    const rgb = Number.isFinite(v)
      ? sampleColor(span > 0 ? (v - lo) / span : 0)
      : SENTINEL_COLOR;
    pixels[4 * k] = rgb[0];
    pixels[4 * k + 1] = rgb[1];
    pixels[4 * k + 2] = rgb[2];
    pixels[4 * k + 3] = 255;
  }
  return pixels;
}
