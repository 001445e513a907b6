/**
 * Client-side voxel grid mirroring the server's VoxelGrid JSON interchange:
 * {resolution, bounds: [lo, hi], cells: [{xyz, feature?}]}.
 *
 * Cells live in a map keyed by packed coordinate, so a client grid can never
 * hold duplicates; serialization emits cells in lexicographic order and must
 * always be accepted by the server's parser (same validation rules below).
 */

export const FEATURE_DIM = 8;

export interface GridCellJson {
  xyz: number[];
  feature?: number[];
}

export interface GridJson {
  resolution: number;
  bounds: number[][];
  cells: GridCellJson[];
}

export type Cell = readonly [number, number, number];

export interface ClientGrid {
  resolution: number;
  /** [lo, hi] world-space corners, hi > lo on every axis. */
  bounds: [number[], number[]];
  /** packed "x,y,z" key -> optional feature vector (length FEATURE_DIM). */
  cells: Map<string, number[] | null>;
}

export class GridFormatError extends Error {}

export function cellKey(cell: ArrayLike<number>): string {
  return `${cell[0]},${cell[1]},${cell[2]}`;
}

export function keyCell(key: string): Cell {
  const parts = key.split(",");
  return [Number(parts[0]), Number(parts[1]), Number(parts[2])];
}

const UNIT_BOUNDS: [number[], number[]] = [
  [0, 0, 0],
  [1, 1, 1],
];

export function makeGrid(resolution: number, bounds?: number[][]): ClientGrid {
  const b = bounds ?? UNIT_BOUNDS;
  const err = checkHeader(resolution, b);
  if (err) throw new GridFormatError(err);
  return {
    resolution,
    bounds: [b[0]!.slice(), b[1]!.slice()],
    cells: new Map(),
  };
}

export function cloneGrid(grid: ClientGrid): ClientGrid {
  const copy = makeGrid(grid.resolution, grid.bounds);
  for (const [key, feature] of grid.cells) {
    copy.cells.set(key, feature ? feature.slice() : null);
  }
  return copy;
}

export function inBounds(grid: ClientGrid, cell: ArrayLike<number>): boolean {
  for (let axis = 0; axis < 3; axis++) {
    const v = cell[axis];
    if (v === undefined || !Number.isInteger(v) || v < 0 || v >= grid.resolution) {
      return false;
    }
  }
  return true;
}

/** Occupy a cell; out-of-bounds cells are the caller's bug, so this throws. */
export function setCell(
  grid: ClientGrid,
  cell: ArrayLike<number>,
  feature: number[] | null = null,
): void {
  if (!inBounds(grid, cell)) {
    throw new GridFormatError(`cell ${cellKey(cell)} outside [0, ${grid.resolution})`);
  }
  grid.cells.set(cellKey(cell), feature ? feature.slice() : null);
}

export function removeCell(grid: ClientGrid, cell: ArrayLike<number>): void {
  grid.cells.delete(cellKey(cell));
}

export function hasCell(grid: ClientGrid, cell: ArrayLike<number>): boolean {
  return grid.cells.has(cellKey(cell));
}

export function cellCount(grid: ClientGrid): number {
  return grid.cells.size;
}

function compareCells(a: Cell, b: Cell): number {
  return a[0] - b[0] || a[1] - b[1] || a[2] - b[2];
}

export function sortedCells(grid: ClientGrid): Cell[] {
  const cells = Array.from(grid.cells.keys(), keyCell);
  cells.sort(compareCells);
  return cells;
}

export function serializeGrid(grid: ClientGrid): GridJson {
  const cells: GridCellJson[] = [];
  for (const cell of sortedCells(grid)) {
    const feature = grid.cells.get(cellKey(cell));
    const entry: GridCellJson = { xyz: [cell[0], cell[1], cell[2]] };
    if (feature) entry.feature = feature.slice();
    cells.push(entry);
  }
  return {
    resolution: grid.resolution,
    bounds: [grid.bounds[0].slice(), grid.bounds[1].slice()],
    cells,
  };
}

function checkHeader(resolution: unknown, bounds: unknown): string | null {
  if (typeof resolution !== "number" || !Number.isInteger(resolution)) {
    return "resolution must be an integer";
  }
  if (resolution < 1) return "resolution must be >= 1";
  if (!Array.isArray(bounds) || bounds.length !== 2) return "bounds must be [lo, hi]";
  for (const corner of bounds) {
    if (!Array.isArray(corner) || corner.length !== 3) return "bounds corners must have 3 entries";
    for (const v of corner) {
      if (typeof v !== "number" || !Number.isFinite(v)) return "non-finite bounds";
    }
  }
  const [lo, hi] = bounds as [number[], number[]];
  for (let axis = 0; axis < 3; axis++) {
    if (!(hi[axis]! > lo[axis]!)) return "bounds must be non-degenerate";
  }
  return null;
}

/**
 * First violation of the interchange contract, or null when valid. Mirrors
 * the server's parser: integer resolution >= 1, finite non-degenerate
 * bounds, integer coords inside [0, resolution), optional features of
 * length FEATURE_DIM with finite entries.
 */
export function validateGridJson(obj: unknown): string | null {
  if (typeof obj !== "object" || obj === null) return "grid JSON must be an object";
  const grid = obj as Record<string, unknown>;
  const headerErr = checkHeader(grid.resolution, grid.bounds);
  if (headerErr) return headerErr;
  const resolution = grid.resolution as number;
  if (!Array.isArray(grid.cells)) return "cells must be an array";
  for (let i = 0; i < grid.cells.length; i++) {
    const cell = grid.cells[i] as Record<string, unknown>;
    if (typeof cell !== "object" || cell === null) return `bad cell entry at index ${i}`;
    const xyz = cell.xyz;
    if (!Array.isArray(xyz) || xyz.length !== 3) return `bad cell entry at index ${i}`;
    for (const v of xyz) {
      if (typeof v !== "number" || !Number.isInteger(v)) return `bad cell entry at index ${i}`;
      if (v < 0 || v >= resolution) return "cell coords outside [0, resolution)";
    }
    const feature = cell.feature;
    if (feature !== undefined && feature !== null) {
      if (!Array.isArray(feature) || feature.length !== FEATURE_DIM) {
        return `cell ${i}: feature must have ${FEATURE_DIM} entries`;
      }
      for (const v of feature) {
        if (typeof v !== "number" || !Number.isFinite(v)) return "non-finite value in grid JSON";
      }
    }
  }
  return null;
}

/** Parse a server grid payload; duplicate cells keep the first occurrence. */
export function parseGrid(obj: unknown): ClientGrid {
  const err = validateGridJson(obj);
  if (err) throw new GridFormatError(err);
  const json = obj as GridJson;
  const grid = makeGrid(json.resolution, json.bounds);
  for (const cell of json.cells) {
    const key = cellKey(cell.xyz);
    if (grid.cells.has(key)) continue;
    grid.cells.set(key, cell.feature ? cell.feature.slice() : null);
  }
  return grid;
}

export function gridsEqual(a: ClientGrid, b: ClientGrid): boolean {
  if (a.resolution !== b.resolution) return false;
  for (let axis = 0; axis < 3; axis++) {
    if (a.bounds[0][axis] !== b.bounds[0][axis]) return false;
    if (a.bounds[1][axis] !== b.bounds[1][axis]) return false;
  }
  if (a.cells.size !== b.cells.size) return false;
  for (const [key, feature] of a.cells) {
    if (!b.cells.has(key)) return false;
    const other = b.cells.get(key) ?? null;
    if (feature === null || other === null) {
      if (feature !== other) return false;
      continue;
    }
    if (feature.length !== other.length) return false;
    for (let i = 0; i < feature.length; i++) {
      if (feature[i] !== other[i]) return false;
    }
  }
  return true;
}
