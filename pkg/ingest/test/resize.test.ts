import { describe, expect, it } from "vitest";
import { resizeBilinear } from "../src/resize.js";

describe("bilinear resize", () => {
  it("identity at equal size", () => {
    const src = new Uint8Array([10, 20, 30, 40]);
    expect(Array.from(resizeBilinear(src, 2, 2, 1, 2, 2))).toEqual([10, 20, 30, 40]);
  });

  it("constant images stay constant", () => {
    const src = new Uint8Array(28 * 28).fill(77);
    const out = resizeBilinear(src, 28, 28, 1, 32, 32);
    expect(out.length).toBe(32 * 32);
    expect(new Set(out)).toEqual(new Set([77]));
  });

  it("matches hand-computed 2x2 -> 4x4 upsample", () => {
    // pixel centers: src = (dst+0.5)*0.5 - 0.5 -> fractions 0, .25, .75, 1 (clamped)
    const src = new Uint8Array([0, 100, 200, 60]);
    const out = resizeBilinear(src, 2, 2, 1, 4, 4);
    // hand-evaluated corners and edge midpoints
    expect(out[0]).toBe(0); // top-left clamp
    expect(out[3]).toBe(100); // top-right clamp
    expect(out[12]).toBe(200); // bottom-left clamp
    expect(out[15]).toBe(60); // bottom-right clamp
    // row 0, x=1: fx=0.25 -> 0*(0.75) + 100*(0.25) = 25
    expect(out[1]).toBe(25);
    // x=0, y=1: fy=0.25 -> 0*0.75 + 200*0.25 = 50
    expect(out[4]).toBe(50);
  });

  it("handles multi-channel interleaved data", () => {
    const src = new Uint8Array([
      // 2x2 RGB: R plane 0/255, G constant 10, B gradient
      0, 10, 0, 255, 10, 50,
      0, 10, 100, 255, 10, 150,
    ]);
    const out = resizeBilinear(src, 2, 2, 3, 4, 4);
    expect(out.length).toBe(4 * 4 * 3);
    for (let p = 0; p < 16; p++) {
      expect(out[p * 3 + 1]).toBe(10); // G stays constant
    }
  });

  it("downsampling averages neighborhoods", () => {
    const src = new Uint8Array(16).map((_, i) => (i % 4 < 2 ? 0 : 200));
    const out = resizeBilinear(src, 4, 4, 1, 2, 2);
    expect(out[0]).toBeLessThan(100);
    expect(out[1]).toBeGreaterThan(100);
  });
});
