/** Builds synthetic binary PLY splat payloads for parser and flow tests. */

import { mulberry32 } from "./prng.js";

export const STANDARD_FIELDS: string[] = [
  "x", "y", "z",
  "nx", "ny", "nz",
  ...Array.from({ length: 3 }, (_, i) => `f_dc_${i}`),
  ...Array.from({ length: 45 }, (_, i) => `f_rest_${i}`),
  "opacity",
  "scale_0", "scale_1", "scale_2",
  "rot_0", "rot_1", "rot_2", "rot_3",
];

export interface PlyOptions {
  fields?: string[];
  /** Filler value for fields without explicit values. */
  fill?: (field: string, index: number, rng: () => number) => number;
}

export function makePlyBytes(
  count: number,
  seed = 0,
  options: PlyOptions = {},
): ArrayBuffer {
  const fields = options.fields ?? STANDARD_FIELDS;
  const rng = mulberry32(seed);
  const fill =
    options.fill ??
    ((field: string, _index: number, r: () => number) => {
      if (field.startsWith("rot_")) return field === "rot_0" ? 1 : 0;
      if (field === "opacity") return 2.0;
      if (field.startsWith("scale_")) return -4.0 + r() * 0.5;
      return r() * 2 - 1;
    });
  const header =
    "ply\n" +
    "format binary_little_endian 1.0\n" +
    `element vertex ${count}\n` +
    fields.map((f) => `property float ${f}\n`).join("") +
    "end_header\n";
  const headerBytes = new TextEncoder().encode(header);
  const stride = fields.length * 4;
  const buffer = new ArrayBuffer(headerBytes.length + count * stride);
  new Uint8Array(buffer).set(headerBytes, 0);
  const view = new DataView(buffer, headerBytes.length);
  for (let i = 0; i < count; i++) {
    for (let f = 0; f < fields.length; f++) {
      view.setFloat32(i * stride + f * 4, fill(fields[f]!, i, rng), true);
    }
  }
  return buffer;
}
