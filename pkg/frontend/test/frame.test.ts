import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { decodeFrame, encodeFrame, FRAME_HEADER_BYTES, QueryFrame } from "../src/frame.js";

function fixture(name: string): Buffer {
  return readFileSync(fileURLToPath(new URL(`./fixtures/${name}`, import.meta.url)));
}

function fixtureBuffer(): ArrayBuffer {
  const raw = fixture("answer-frame-d8.bin");
  // tight copy into a plain ArrayBuffer so byteLength matches the frame
  const buffer = new ArrayBuffer(raw.byteLength);
  new Uint8Array(buffer).set(raw);
  return buffer;
}

const expected = JSON.parse(fixture("answer-frame-d8.json").toString("utf8")) as {
  discretization: number;
  snapshotsUsed: number;
  strategy: string;
  qualityOk: boolean;
  servedRemotely: boolean;
  residual: number;
  bound: number;
  bytesRead: number;
  basisVersion: number;
  values: number[];
};

describe("answer frame decoding", () => {
  it("decodes a frame produced by the middleware byte for byte", () => {
    const frame = decodeFrame(fixtureBuffer());
    expect(frame.discretization).toBe(expected.discretization);
    expect(frame.snapshotsUsed).toBe(expected.snapshotsUsed);
    expect(frame.strategy).toBe(expected.strategy);
    expect(frame.qualityOk).toBe(expected.qualityOk);
    expect(frame.servedRemotely).toBe(expected.servedRemotely);
    // the certificate must survive the wire bit-exactly
    expect(frame.residual).toBe(expected.residual);
    expect(frame.bound).toBe(expected.bound);
    expect(frame.bytesRead).toBe(expected.bytesRead);
    expect(frame.basisVersion).toBe(expected.basisVersion);
    expect(frame.values.length).toBe(expected.values.length);
    for (let k = 0; k < frame.values.length; k += 1) {
      expect(frame.values[k]).toBe(expected.values[k]);
    }
  });

  it("re-encodes to the identical bytes", () => {
    const original = fixtureBuffer();
    const encoded = encodeFrame(decodeFrame(original));
    expect(new Uint8Array(encoded)).toEqual(new Uint8Array(original));
  });

  it("round-trips non-finite field cells", () => {
    const values = new Float64Array(4);
    values[0] = Number.NaN;
    values[1] = Number.POSITIVE_INFINITY;
    values[2] = -0;
    values[3] = 1.25;
    const frame: QueryFrame = {
      discretization: 2,
      snapshotsUsed: 1,
      strategy: "basic",
      qualityOk: false,
      servedRemotely: true,
      residual: 0.5,
      bound: 0.1,
      bytesRead: 0,
      basisVersion: 0,
      values,
    };
    const back = decodeFrame(encodeFrame(frame));
    expect(Number.isNaN(back.values[0])).toBe(true);
    expect(back.values[1]).toBe(Number.POSITIVE_INFINITY);
    expect(Object.is(back.values[2], -0)).toBe(true);
    expect(back.values[3]).toBe(1.25);
    expect(back.qualityOk).toBe(false);
    expect(back.servedRemotely).toBe(true);
  });

  it("rejects frames that are too short for a header", () => {
    expect(() => decodeFrame(new ArrayBuffer(FRAME_HEADER_BYTES - 1))).toThrow(/too short/);
  });

  it("rejects a wrong magic", () => {
    const buffer = fixtureBuffer();
    new DataView(buffer).setUint8(0, 0x58);
    expect(() => decodeFrame(buffer)).toThrow(/magic/);
  });

  it("rejects an unknown strategy code", () => {
    const buffer = fixtureBuffer();
    new DataView(buffer).setUint8(12, 9);
    expect(() => decodeFrame(buffer)).toThrow(/strategy code 9/);
  });

  it("rejects a body that does not match the advertised grid", () => {
    const buffer = fixtureBuffer().slice(0, FRAME_HEADER_BYTES + 8 * 63);
    expect(() => decodeFrame(buffer)).toThrow(/does not match/);
  });
});
