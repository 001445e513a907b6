/**
 * Binary little-endian PLY splat parser. One `vertex` element whose
 * properties include float32 x,y,z, f_dc_0..2, opacity, scale_0..2,
 * rot_0..3; extra properties and arbitrary property order are tolerated.
 * Read-only: the client previews and counts Gaussians, it never writes
 * splat files.
 */

/** Degree-0 real spherical harmonic basis constant. */
export const SH_C0 = 0.28209479177387814;

export class SplatFormatError extends Error {}

export interface ParsedSplat {
  count: number;
  /** (n*3) world positions. */
  positions: Float32Array;
  /** (n*3) SH DC coefficients; rgb = 0.5 + SH_C0 * dc. */
  shDc: Float32Array;
  /** (n,) pre-sigmoid opacities. */
  opacityLogits: Float32Array;
  /** (n*3) log scales. */
  logScales: Float32Array;
  /** (n*4) (w,x,y,z) quaternions. */
  rotations: Float32Array;
}

const TYPE_SIZES: Record<string, number> = {
  float: 4, float32: 4, double: 8, float64: 8,
  uchar: 1, uint8: 1, char: 1, int8: 1,
  short: 2, int16: 2, ushort: 2, uint16: 2,
  int: 4, int32: 4, uint: 4, uint32: 4,
};

const FLOAT_TYPES = new Set(["float", "float32"]);

interface PropertyLayout {
  offset: number;
  type: string;
}

function parseHeader(bytes: Uint8Array): {
  count: number;
  layout: Map<string, PropertyLayout>;
  stride: number;
  payloadOffset: number;
} {
  const marker = "end_header\n";
  const markerBytes = new TextEncoder().encode(marker);
  let end = -1;
  outer: for (let i = 0; i + markerBytes.length <= bytes.length; i++) {
    for (let j = 0; j < markerBytes.length; j++) {
      if (bytes[i + j] !== markerBytes[j]) continue outer;
    }
    end = i;
    break;
  }
  if (end < 0) throw new SplatFormatError("missing end_header");
  const header = new TextDecoder("ascii").decode(bytes.subarray(0, end));
  const lines = header.split("\n");
  if (lines.length === 0 || lines[0]!.trim() !== "ply") {
    throw new SplatFormatError("not a PLY file");
  }
  if (!lines.some((ln) => ln.trim() === "format binary_little_endian 1.0")) {
    throw new SplatFormatError("unsupported PLY format (need binary_little_endian 1.0)");
  }
  let count: number | null = null;
  let inVertex = false;
  const layout = new Map<string, PropertyLayout>();
  let stride = 0;
  for (const ln of lines.slice(1)) {
    const parts = ln.trim().split(/\s+/);
    if (parts.length === 0 || parts[0] === "" || parts[0] === "comment") continue;
    if (parts[0] === "element") {
      if (parts.length !== 3) throw new SplatFormatError(`bad element line: ${ln}`);
      inVertex = parts[1] === "vertex";
      if (!inVertex) throw new SplatFormatError(`unsupported extra element: ${parts[1]}`);
      count = Number(parts[2]);
      if (!Number.isInteger(count) || count < 0) {
        throw new SplatFormatError("element count must be >= 0");
      }
      continue;
    }
    if (parts[0] === "property" && inVertex) {
      if (parts.length !== 3) throw new SplatFormatError(`bad property line: ${ln}`);
      const type = parts[1]!;
      const size = TYPE_SIZES[type];
      if (size === undefined) throw new SplatFormatError(`unsupported property type ${type}`);
      layout.set(parts[2]!, { offset: stride, type });
      stride += size;
    }
  }
  if (count === null) throw new SplatFormatError("missing vertex element");
  return { count, layout, stride, payloadOffset: end + markerBytes.length };
}

function requireFloat(layout: Map<string, PropertyLayout>, name: string): number {
  const prop = layout.get(name);
  if (prop === undefined) throw new SplatFormatError(`missing property ${name}`);
  if (!FLOAT_TYPES.has(prop.type)) {
    throw new SplatFormatError(`property ${name} must be float32`);
  }
  return prop.offset;
}

export function parseSplat(buffer: ArrayBuffer): ParsedSplat {
  const bytes = new Uint8Array(buffer);
  const { count, layout, stride, payloadOffset } = parseHeader(bytes);
  if (payloadOffset + count * stride > bytes.length) {
    throw new SplatFormatError("payload truncated");
  }
  const fieldGroups: [string[], Float32Array][] = [
    [["x", "y", "z"], new Float32Array(count * 3)],
    [["f_dc_0", "f_dc_1", "f_dc_2"], new Float32Array(count * 3)],
    [["opacity"], new Float32Array(count)],
    [["scale_0", "scale_1", "scale_2"], new Float32Array(count * 3)],
    [["rot_0", "rot_1", "rot_2", "rot_3"], new Float32Array(count * 4)],
  ];
  const offsets = fieldGroups.map(([names]) => names.map((n) => requireFloat(layout, n)));
  const view = new DataView(buffer, payloadOffset);
  for (let i = 0; i < count; i++) {
    const base = i * stride;
    for (let g = 0; g < fieldGroups.length; g++) {
      const [, out] = fieldGroups[g]!;
      const groupOffsets = offsets[g]!;
      for (let k = 0; k < groupOffsets.length; k++) {
        out[i * groupOffsets.length + k] = view.getFloat32(
          base + groupOffsets[k]!,
          true,
        );
      }
    }
  }
  return {
    count,
    positions: fieldGroups[0]![1],
    shDc: fieldGroups[1]![1],
    opacityLogits: fieldGroups[2]![1],
    logScales: fieldGroups[3]![1],
    rotations: fieldGroups[4]![1],
  };
}
