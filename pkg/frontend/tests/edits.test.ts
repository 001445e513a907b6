import { describe, expect, it } from "vitest";

import {
  EditOp,
  applyEdit,
  brushFromCells,
  replayEdits,
  stampCells,
  validateBrush,
} from "../src/edits.js";
import {
  cellCount,
  cloneGrid,
  gridsEqual,
  hasCell,
  makeGrid,
  setCell,
} from "../src/grid.js";

describe("edit ops", () => {
  it("add then remove the same cell restores the grid", () => {
    const grid = makeGrid(8);
    setCell(grid, [3, 3, 3]);
    const before = cloneGrid(grid);
    expect(applyEdit(grid, { op: "add", cell: [1, 2, 3] }).ok).toBe(true);
    expect(applyEdit(grid, { op: "remove", cell: [1, 2, 3] }).ok).toBe(true);
    expect(gridsEqual(grid, before)).toBe(true);
  });

  it("removing an absent cell is accepted and changes nothing", () => {
    const grid = makeGrid(8);
    const result = applyEdit(grid, { op: "remove", cell: [0, 0, 0] });
    expect(result.ok).toBe(true);
    expect(cellCount(grid)).toBe(0);
  });

  it("out-of-bounds add/remove are rejected without touching the grid", () => {
    const grid = makeGrid(8);
    for (const cell of [[8, 0, 0], [-1, 2, 2], [0, 0, 1.5]]) {
      const result = applyEdit(grid, { op: "add", cell });
      expect(result.ok).toBe(false);
      expect(result.reason).toMatch(/out of bounds/);
    }
    expect(cellCount(grid)).toBe(0);
  });

  it("a stamp lands the brush translated by the offset", () => {
    const brush = brushFromCells("L", [
      [0, 0, 0],
      [1, 0, 0],
      [1, 1, 0],
    ]);
    const grid = makeGrid(8);
    const result = applyEdit(grid, { op: "stamp", brush, offset: [2, 3, 4] });
    expect(result.ok).toBe(true);
    expect(cellCount(grid)).toBe(3);
    for (const cell of [[2, 3, 4], [3, 3, 4], [3, 4, 4]]) {
      expect(hasCell(grid, cell)).toBe(true);
    }
    expect(stampCells(brush, [2, 3, 4])).toEqual([
      [2, 3, 4],
      [3, 3, 4],
      [3, 4, 4],
    ]);
  });

  it("a stamp that sticks out anywhere is rejected whole", () => {
    const brush = brushFromCells("bar", [
      [0, 0, 0],
      [3, 0, 0],
    ]);
    const grid = makeGrid(8);
    const result = applyEdit(grid, { op: "stamp", brush, offset: [6, 0, 0] });
    expect(result.ok).toBe(false);
    expect(result.reason).toMatch(/stamp extends out of bounds/);
    expect(cellCount(grid)).toBe(0);
  });

  it("brush extraction re-origins cells to their bounding box", () => {
    const brush = brushFromCells("blob", [
      [5, 7, 2],
      [6, 7, 2],
      [5, 9, 2],
      [5, 7, 2],
    ]);
    expect(brush.extents).toEqual([2, 3, 1]);
    expect(brush.cells).toEqual([
      [0, 0, 0],
      [1, 0, 0],
      [0, 2, 0],
    ]);
    expect(validateBrush(brush)).toBeNull();
    expect(validateBrush({ name: "bad", extents: [1, 1, 1], cells: [] })).toMatch(
      /no cells/,
    );
    expect(
      validateBrush({ name: "bad", extents: [1, 1, 1], cells: [[1, 0, 0]] }),
    ).toMatch(/outside extents/);
  });

  it("replay folds the log over the initial grid", () => {
    const initial = makeGrid(8);
    setCell(initial, [7, 7, 7]);
    const live = cloneGrid(initial);
    const log: EditOp[] = [
      { op: "add", cell: [1, 1, 1] },
      { op: "add", cell: [2, 2, 2] },
      { op: "remove", cell: [7, 7, 7] },
      { op: "remove", cell: [1, 1, 1] },
    ];
    for (const edit of log) expect(applyEdit(live, edit).ok).toBe(true);
    expect(gridsEqual(replayEdits(initial, [...log]), live)).toBe(true);
  });
});
