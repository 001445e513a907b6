import { describe, expect, it } from "vitest";

import { replayEdits } from "../src/edits.js";
import {
  cellCount,
  gridsEqual,
  hasCell,
  makeGrid,
  parseGrid,
  serializeGrid,
  setCell,
  validateGridJson,
} from "../src/grid.js";
import {
  createSession,
  meshToBrush,
  resetEdits,
  selectTool,
  voxelEdit,
} from "../src/session.js";
import { runRandomScript } from "./helpers/editScripts.js";

describe("editor session", () => {
  it("starts from the initial grid with an empty log", () => {
    const initial = makeGrid(8);
    setCell(initial, [1, 1, 1]);
    const session = createSession({ coarseResolution: 8, initialGrid: initial });
    expect(gridsEqual(session.grid, initial)).toBe(true);
    expect(session.editLog).toEqual([]);
    expect(session.tool.kind).toBe("add");
  });

  it("rejects a session whose initial grid disagrees with the resolution", () => {
    expect(() =>
      createSession({ coarseResolution: 8, initialGrid: makeGrid(4) }),
    ).toThrow(/resolution/);
  });

  it("accepted edits update grid and log; the add tool adds the clicked cell", () => {
    const session = createSession({ coarseResolution: 8 });
    expect(voxelEdit(session, [2, 3, 4]).ok).toBe(true);
    expect(hasCell(session.grid, [2, 3, 4])).toBe(true);
    expect(session.editLog).toEqual([{ op: "add", cell: [2, 3, 4] }]);
  });

  it("out-of-bounds clicks are ignored with a visual cue", () => {
    const session = createSession({ coarseResolution: 8 });
    voxelEdit(session, [1, 1, 1]);
    const logBefore = session.editLog.length;
    const result = voxelEdit(session, [8, 1, 1]);
    expect(result.ok).toBe(false);
    expect(session.editLog.length).toBe(logBefore);
    expect(cellCount(session.grid)).toBe(1);
    expect(session.notices.at(-1)?.kind).toBe("edit-rejected");
  });

  it("the brush tool stamps at the clicked offset", () => {
    const session = createSession({ coarseResolution: 8 });
    selectTool(session, {
      kind: "brush",
      brush: { name: "pair", extents: [2, 1, 1], cells: [[0, 0, 0], [1, 0, 0]] },
    });
    expect(voxelEdit(session, [4, 5, 6]).ok).toBe(true);
    expect(hasCell(session.grid, [4, 5, 6])).toBe(true);
    expect(hasCell(session.grid, [5, 5, 6])).toBe(true);
    expect(session.editLog[0]?.op).toBe("stamp");
  });

  it("resetEdits returns to the replay base", () => {
    const initial = makeGrid(8);
    setCell(initial, [0, 0, 0]);
    const session = createSession({ coarseResolution: 8, initialGrid: initial });
    voxelEdit(session, [3, 3, 3]);
    resetEdits(session);
    expect(gridsEqual(session.grid, initial)).toBe(true);
    expect(session.editLog).toEqual([]);
  });

  it("mesh import voxelizes a quad into a plane stamp", () => {
    const brush = meshToBrush(
      "quad",
      [
        [0, 0, 0],
        [1, 0, 0],
        [1, 1, 0],
        [0, 1, 0],
      ],
      [
        [0, 1, 2],
        [0, 2, 3],
      ],
      4,
    );
    // A z=0 square spanning the box maps onto a full 4x4x1 slab of cells.
    expect(brush.extents).toEqual([4, 4, 1]);
    expect(brush.cells.length).toBe(16);
    const session = createSession({ coarseResolution: 8 });
    selectTool(session, { kind: "mesh", brush });
    expect(voxelEdit(session, [2, 2, 3]).ok).toBe(true);
    expect(cellCount(session.grid)).toBe(16);
    expect(hasCell(session.grid, [2, 2, 3])).toBe(true);
    expect(hasCell(session.grid, [5, 5, 3])).toBe(true);
  });

  it("mesh import rejects degenerate input", () => {
    expect(() => meshToBrush("bad", [], [], 4)).toThrow(/vertices and faces/);
    expect(() =>
      meshToBrush("bad", [[0, 0, 0], [0, 0, 0], [0, 0, 0]], [[0, 1, 2]], 4),
    ).toThrow(/degenerate/);
  });

  it("replay(log) reproduces the live grid across random scripts", () => {
    for (let seed = 0; seed < 60; seed++) {
      const { session } = runRandomScript(9000 + seed);
      const replayed = replayEdits(session.initialGrid, session.editLog);
      expect(gridsEqual(replayed, session.grid)).toBe(true);
    }
  });

  it("the conditioning grid always serializes to valid interchange JSON", () => {
    for (let seed = 0; seed < 200; seed++) {
      const { session } = runRandomScript(40000 + seed);
      const json = serializeGrid(session.grid);
      expect(validateGridJson(json)).toBeNull();
      expect(gridsEqual(parseGrid(json), session.grid)).toBe(true);
    }
  });
});
