/**
 * Binary answer frame codec.
 *
 * A query answer arrives as a 48-byte little-endian header followed by the
 * reconstructed field, discretization^2 float64 values in row-major order
 * (k = iy * D + ix, boundary cells included).
 *
 * Header layout (offsets in bytes):
 *    0  magic "RBQF"
 *    4  discretization  u32
 *    8  snapshots used  u32
 *   12  strategy        u8   (index into STRATEGIES)
 *   13  quality ok      u8
 *   14  served remotely u8
 *   15  padding
 *   16  residual        f64
 *   24  bound           f64
 *   32  bytes read      u64
 *   40  basis version   u32
 *   44  padding
 */

export const FRAME_HEADER_BYTES = 48;

const MAGIC = [0x52, 0x42, 0x51, 0x46] as const; // "RBQF"

export const STRATEGIES = ["basic", "adaptive", "subspace", "reorder"] as const;
export type Strategy = (typeof STRATEGIES)[number];

export interface QueryFrame {
  discretization: number;
  snapshotsUsed: number;
  strategy: Strategy;
  qualityOk: boolean;
  servedRemotely: boolean;
  /** Certified residual of this answer; displayed as-is, never recomputed. */
  residual: number;
  bound: number;
  bytesRead: number;
  basisVersion: number;
  values: Float64Array;
}

export function decodeFrame(buffer: ArrayBuffer): QueryFrame {
  if (buffer.byteLength < FRAME_HEADER_BYTES) {
    throw new RangeError(`frame too short: ${buffer.byteLength} bytes`);
  }
  const view = new DataView(buffer);
  for (let i = 0; i < 4; i += 1) {
    if (view.getUint8(i) !== MAGIC[i]) {
      throw new RangeError("bad frame magic");
    }
  }
  const discretization = view.getUint32(4, true);
  const snapshotsUsed = view.getUint32(8, true);
  const strategyCode = view.getUint8(12);
  const strategy = STRATEGIES[strategyCode];
  if (strategy === undefined) {
    throw new RangeError(`unknown strategy code ${strategyCode}`);
  }
  const cells = discretization * discretization;
  const expected = FRAME_HEADER_BYTES + 8 * cells;
  if (buffer.byteLength !== expected) {
    throw new RangeError(
      `frame length ${buffer.byteLength} does not match ${expected} for D=${discretization}`,
    );
  }
  const bytesRead = view.getBigUint64(32, true);
  if (bytesRead > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new RangeError("bytes-read counter exceeds the safe integer range");
  }
  // offset 48 is 8-aligned, so the field can alias the buffer without a copy
  const values = new Float64Array(buffer, FRAME_HEADER_BYTES, cells);
  return {
    discretization,
    snapshotsUsed,
    strategy,
    qualityOk: view.getUint8(13) !== 0,
    servedRemotely: view.getUint8(14) !== 0,
    residual: view.getFloat64(16, true),
    bound: view.getFloat64(24, true),
    bytesRead: Number(bytesRead),
    basisVersion: view.getUint32(40, true),
    values,
  };
}

/** Inverse of decodeFrame; used by tests and loopback tooling. */
export function encodeFrame(frame: QueryFrame): ArrayBuffer {
  const cells = frame.discretization * frame.discretization;
  if (frame.values.length !== cells) {
    throw new RangeError(`field has ${frame.values.length} cells, header says ${cells}`);
  }
  const buffer = new ArrayBuffer(FRAME_HEADER_BYTES + 8 * cells);
  const view = new DataView(buffer);
  MAGIC.forEach((byte, i) => view.setUint8(i, byte));
  view.setUint32(4, frame.discretization, true);
  view.setUint32(8, frame.snapshotsUsed, true);
  view.setUint8(12, STRATEGIES.indexOf(frame.strategy));
  view.setUint8(13, frame.qualityOk ? 1 : 0);
  view.setUint8(14, frame.servedRemotely ? 1 : 0);
  view.setFloat64(16, frame.residual, true);
  view.setFloat64(24, frame.bound, true);
  view.setBigUint64(32, BigInt(frame.bytesRead), true);
  view.setUint32(40, frame.basisVersion, true);
  for (let k = 0; k < cells; k += 1) {
    view.setFloat64(FRAME_HEADER_BYTES + 8 * k, frame.values[k] as number, true);
  }
  return buffer;
}
