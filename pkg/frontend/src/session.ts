/**
 * Per-tab authoring session: active primitive, client copy of the
 * conditioning grid, edit log, selected tool, camera, and a mirror of the
 * server scene's layer list. One session per browser tab; mutations are
 * optimistic and reconciled against server payloads by the panels.
 */

import { applyEdit, BrushJson, brushFromCells, EditOp, EditResult } from "./edits.js";
import { ClientGrid, cloneGrid, makeGrid } from "./grid.js";
import { CameraState, createCamera } from "./render.js";

export interface TransformJson {
  translation: number[];
  /** (w,x,y,z) unit quaternion. */
  quaternion: number[];
  scale: number;
}

export interface LayerInfo {
  id: string;
  primitive_id: string;
  point_count: number;
  transform: TransformJson;
  color_gain: number[];
}

export type Tool =
  | { kind: "add" }
  | { kind: "remove" }
  | { kind: "brush"; brush: BrushJson }
  | { kind: "mesh"; brush: BrushJson };

export interface Notice {
  kind: string;
  message: string;
}

export interface EditorSession {
  primitiveId: string | null;
  coarseResolution: number;
  /** Replay base: empty for a fresh session, or a fetched conditioning. */
  initialGrid: ClientGrid;
  /** Live conditioning grid; always equals replay(initialGrid, editLog). */
  grid: ClientGrid;
  editLog: EditOp[];
  tool: Tool;
  camera: CameraState;
  sceneId: string | null;
  layers: LayerInfo[];
  notices: Notice[];
  lastSeed: number | null;
}

export interface SessionOptions {
  primitiveId?: string;
  coarseResolution: number;
  bounds?: number[][];
  initialGrid?: ClientGrid;
  camera?: Partial<CameraState>;
}

export function createSession(options: SessionOptions): EditorSession {
  const initial =
    options.initialGrid ?? makeGrid(options.coarseResolution, options.bounds);
  if (initial.resolution !== options.coarseResolution) {
    throw new Error("initial grid resolution must match the coarse resolution");
  }
  return {
    primitiveId: options.primitiveId ?? null,
    coarseResolution: options.coarseResolution,
    initialGrid: cloneGrid(initial),
    grid: cloneGrid(initial),
    editLog: [],
    tool: { kind: "add" },
    camera: createCamera(options.camera),
    sceneId: null,
    layers: [],
    notices: [],
    lastSeed: null,
  };
}

export function selectTool(session: EditorSession, tool: Tool): void {
  session.tool = tool;
}

export function pushNotice(session: EditorSession, kind: string, message: string): void {
  session.notices.push({ kind, message });
}

export function clearNotices(session: EditorSession): void {
  session.notices = [];
}

function editForTool(cell: number[], tool: Tool): EditOp {
  switch (tool.kind) {
    case "add":
      return { op: "add", cell: cell.slice() };
    case "remove":
      return { op: "remove", cell: cell.slice() };
    case "brush":
    case "mesh":
      return { op: "stamp", brush: tool.brush, offset: cell.slice() };
  }
}

/**
 * Apply the active tool at a picked cell. Accepted edits mutate the grid
 * and append to the log; rejected ones (out of bounds) leave both alone
 * and surface a notice as the visual cue.
 */
export function voxelEdit(
  session: EditorSession,
  cell: number[],
  tool: Tool = session.tool,
): EditResult {
  const edit = editForTool(cell, tool);
  const result = applyEdit(session.grid, edit);
  if (result.ok) {
    session.editLog.push(edit);
  } else {
    pushNotice(session, "edit-rejected", `${edit.op}: ${result.reason}`);
  }
  return result;
}

/** Reset the conditioning to the replay base, dropping the edit log. */
export function resetEdits(session: EditorSession): void {
  session.grid = cloneGrid(session.initialGrid);
  session.editLog = [];
}

// ---------------------------------------------------------------------------
// Mesh import: voxelize a triangle surface into a reusable stamp.
// ---------------------------------------------------------------------------

type Vec3 = readonly [number, number, number];

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function norm(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

/**
 * Voxelize a triangle mesh surface onto a cube of `resolution` cells laid
 * over the mesh bounding box, then re-origin the result as a brush. Each
 * triangle is sampled densely enough that no cell the surface passes
 * through at the sample spacing is missed; this is an authoring stamp, not
 * an exact rasterizer.
 */
export function meshToBrush(
  name: string,
  vertices: number[][],
  faces: number[][],
  resolution: number,
): BrushJson {
  if (resolution < 1 || !Number.isInteger(resolution)) {
    throw new Error("mesh import resolution must be a positive integer");
  }
  if (vertices.length === 0 || faces.length === 0) {
    throw new Error("mesh import needs vertices and faces");
  }
  const lo = [Infinity, Infinity, Infinity];
  const hi = [-Infinity, -Infinity, -Infinity];
  for (const v of vertices) {
    for (let axis = 0; axis < 3; axis++) {
      lo[axis] = Math.min(lo[axis]!, v[axis]!);
      hi[axis] = Math.max(hi[axis]!, v[axis]!);
    }
  }
  const span = Math.max(hi[0]! - lo[0]!, hi[1]! - lo[1]!, hi[2]! - lo[2]!);
  if (!(span > 0) || !Number.isFinite(span)) {
    throw new Error("mesh has a degenerate bounding box");
  }
  const cellSize = span / resolution;

  const toCell = (p: Vec3): number[] => {
    const cell = new Array<number>(3);
    for (const axis of [0, 1, 2] as const) {
      const t = (p[axis] - lo[axis]!) / cellSize;
      cell[axis] = Math.min(Math.max(Math.floor(t), 0), resolution - 1);
    }
    return cell;
  };

  const seen = new Set<string>();
  const cells: number[][] = [];
  const mark = (p: Vec3) => {
    const cell = toCell(p);
    const key = cell.join(",");
    if (seen.has(key)) return;
    seen.add(key);
    cells.push(cell);
  };

  for (const face of faces) {
    const a = vertices[face[0]!]! as unknown as Vec3;
    const b = vertices[face[1]!]! as unknown as Vec3;
    const c = vertices[face[2]!]! as unknown as Vec3;
    const edge = Math.max(norm(sub(b, a)), norm(sub(c, a)), norm(sub(c, b)));
    // Sample spacing below half a cell guarantees coverage of crossed cells.
    const steps = Math.max(1, Math.ceil((edge / cellSize) * 2));
    for (let i = 0; i <= steps; i++) {
      for (let j = 0; j <= steps - i; j++) {
        const u = i / steps;
        const v = j / steps;
        const w = 1 - u - v;
        mark([
          w * a[0] + u * b[0] + v * c[0],
          w * a[1] + u * b[1] + v * c[1],
          w * a[2] + u * b[2] + v * c[2],
        ]);
      }
    }
  }
  return brushFromCells(name, cells);
}
