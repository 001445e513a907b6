/**
 * Ordered edit log over the conditioning grid. The session invariant is
 * that replaying the log over the session's initial grid reproduces the
 * live grid exactly, so rejected edits are never appended. The wire format
 * matches the service's /generate "edits" list: add / remove single cells,
 * stamp = brush cells + offset, later edits win, and an edit whose cells
 * would land out of bounds is rejected whole.
 */

import {
  Cell,
  ClientGrid,
  cloneGrid,
  inBounds,
  removeCell,
  setCell,
} from "./grid.js";

export interface BrushJson {
  name: string;
  /** (3,) cell extents of the stamp's bounding box. */
  extents: number[];
  /** (n,3) occupied cells, min corner at the origin. */
  cells: number[][];
}

export type EditOp =
  | { op: "add"; cell: number[] }
  | { op: "remove"; cell: number[] }
  | { op: "stamp"; brush: BrushJson; offset: number[] };

export interface EditResult {
  ok: boolean;
  reason?: string;
}

export function validateBrush(brush: BrushJson): string | null {
  if (!Array.isArray(brush.extents) || brush.extents.length !== 3) {
    return "brush extents must have 3 entries";
  }
  if (!Array.isArray(brush.cells) || brush.cells.length === 0) {
    return "brush has no cells";
  }
  for (const cell of brush.cells) {
    if (!Array.isArray(cell) || cell.length !== 3) return "brush cells must be (n,3)";
    for (let axis = 0; axis < 3; axis++) {
      const v = cell[axis]!;
      if (!Number.isInteger(v) || v < 0 || v >= brush.extents[axis]!) {
        return "brush cells outside extents";
      }
    }
  }
  return null;
}

/** Re-origin a cell set to its bounding box as a reusable stamp. */
export function brushFromCells(name: string, cells: number[][]): BrushJson {
  if (cells.length === 0) throw new Error("empty selection for brush extraction");
  const lo = [Infinity, Infinity, Infinity];
  const hi = [-Infinity, -Infinity, -Infinity];
  for (const cell of cells) {
    for (let axis = 0; axis < 3; axis++) {
      lo[axis] = Math.min(lo[axis]!, cell[axis]!);
      hi[axis] = Math.max(hi[axis]!, cell[axis]!);
    }
  }
  const seen = new Set<string>();
  const origined: number[][] = [];
  for (const cell of cells) {
    const c = [cell[0]! - lo[0]!, cell[1]! - lo[1]!, cell[2]! - lo[2]!];
    const key = c.join(",");
    if (seen.has(key)) continue;
    seen.add(key);
    origined.push(c);
  }
  return {
    name,
    extents: [hi[0]! - lo[0]! + 1, hi[1]! - lo[1]! + 1, hi[2]! - lo[2]! + 1],
    cells: origined,
  };
}

export function stampCells(brush: BrushJson, offset: number[]): Cell[] {
  return brush.cells.map((c) => [
    c[0]! + offset[0]!,
    c[1]! + offset[1]!,
    c[2]! + offset[2]!,
  ]);
}

/**
 * Apply one edit in place. Returns {ok: false} without touching the grid
 * when any target cell is out of bounds (whole-stamp rejection, matching
 * the server's assemble semantics).
 */
export function applyEdit(grid: ClientGrid, edit: EditOp): EditResult {
  if (edit.op === "add" || edit.op === "remove") {
    if (!inBounds(grid, edit.cell)) {
      return { ok: false, reason: "cell out of bounds" };
    }
    if (edit.op === "add") setCell(grid, edit.cell);
    else removeCell(grid, edit.cell);
    return { ok: true };
  }
  if (edit.op === "stamp") {
    const brushErr = validateBrush(edit.brush);
    if (brushErr) return { ok: false, reason: brushErr };
    const cells = stampCells(edit.brush, edit.offset);
    for (const cell of cells) {
      if (!inBounds(grid, cell)) {
        return { ok: false, reason: "stamp extends out of bounds" };
      }
    }
    for (const cell of cells) setCell(grid, cell);
    return { ok: true };
  }
  return { ok: false, reason: `unknown edit op ${(edit as { op: string }).op}` };
}

/**
 * Fold an accepted-edit log over an initial grid. Logs only ever contain
 * accepted edits, so a failing edit here means the log and grid diverged.
 */
export function replayEdits(initial: ClientGrid, log: EditOp[]): ClientGrid {
  const grid = cloneGrid(initial);
  for (let i = 0; i < log.length; i++) {
    const result = applyEdit(grid, log[i]!);
    if (!result.ok) {
      throw new Error(`edit ${i} failed on replay: ${result.reason}`);
    }
  }
  return grid;
}
