import { describe, expect, it } from "vitest";

import { SH_C0, SplatFormatError, parseSplat } from "../src/splat.js";
import { STANDARD_FIELDS, makePlyBytes } from "./helpers/splatData.js";

describe("splat parser", () => {
  it("parses counts and per-field values from the standard layout", () => {
    const bytes = makePlyBytes(5, 0, {
      fill: (field, i) => {
        if (field === "x") return i;
        if (field === "y") return 2 * i;
        if (field === "z") return 3 * i;
        if (field === "f_dc_0") return 0.25;
        if (field === "opacity") return -1.5;
        if (field === "scale_1") return 0.5;
        if (field === "rot_0") return 1;
        return 0;
      },
    });
    const splat = parseSplat(bytes);
    expect(splat.count).toBe(5);
    expect(splat.positions[3 * 4]).toBe(4);
    expect(splat.positions[3 * 4 + 1]).toBe(8);
    expect(splat.positions[3 * 4 + 2]).toBe(12);
    expect(splat.shDc[0]).toBeCloseTo(0.25, 6);
    expect(splat.opacityLogits[2]).toBeCloseTo(-1.5, 6);
    expect(splat.logScales[3 * 1 + 1]).toBeCloseTo(0.5, 6);
    expect(splat.rotations[0]).toBe(1);
    expect(splat.rotations[1]).toBe(0);
  });

  it("tolerates shuffled property order and extra properties", () => {
    const shuffled = [...STANDARD_FIELDS].reverse();
    shuffled.splice(10, 0, "segment_id");
    const bytes = makePlyBytes(3, 2, {
      fields: shuffled,
      fill: (field, i) => (field === "x" ? 10 + i : field === "rot_0" ? 1 : 0),
    });
    const splat = parseSplat(bytes);
    expect(splat.count).toBe(3);
    expect(splat.positions[0]).toBe(10);
    expect(splat.positions[3]).toBe(11);
  });

  it("handles zero Gaussians", () => {
    const splat = parseSplat(makePlyBytes(0));
    expect(splat.count).toBe(0);
    expect(splat.positions.length).toBe(0);
  });

  it("rejects malformed payloads", () => {
    expect(() => parseSplat(new TextEncoder().encode("not a ply").buffer)).toThrow(
      SplatFormatError,
    );
    const good = new Uint8Array(makePlyBytes(4, 1));
    expect(() => parseSplat(good.slice(0, good.length - 8).buffer)).toThrow(
      /truncated/,
    );
    const noRot = makePlyBytes(2, 0, {
      fields: STANDARD_FIELDS.filter((f) => f !== "rot_3"),
    });
    expect(() => parseSplat(noRot)).toThrow(/missing property rot_3/);
    const intX = new TextEncoder().encode(
      "ply\nformat binary_little_endian 1.0\nelement vertex 0\n" +
        "property int x\nend_header\n",
    );
    expect(() => parseSplat(intX.buffer)).toThrow(/must be float32/);
    const ascii = new TextEncoder().encode(
      "ply\nformat ascii 1.0\nelement vertex 0\nend_header\n",
    );
    expect(() => parseSplat(ascii.buffer)).toThrow(/binary_little_endian/);
  });

  it("exposes the DC-to-color constant used by the preview", () => {
    expect(SH_C0).toBeCloseTo(0.28209479177387814, 15);
  });
});
