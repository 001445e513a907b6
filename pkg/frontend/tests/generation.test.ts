import { describe, expect, it } from "vitest";

import { ApiClient, JobState } from "../src/api.js";
import { GenerationFlow, canGenerate } from "../src/generation.js";
import { GridJson } from "../src/grid.js";
import { DrawListRenderer } from "../src/render.js";
import { EditorSession, createSession, voxelEdit } from "../src/session.js";
import { MockGenerateScript, MockServer } from "./helpers/mockServer.js";
import { makePlyBytes } from "./helpers/splatData.js";

function stateGrid(step: number): GridJson {
  return {
    resolution: 32,
    bounds: [[0, 0, 0], [1, 1, 1]],
    cells: Array.from({ length: step + 1 }, (_, i) => ({
      xyz: [i, step, 0],
      feature: [0.1 * i, -0.2, 0.3, 0, 0, 0, 0, 0],
    })),
  };
}

function growthScript(
  steps: number,
  pointCount: number,
  revealPerPoll: number,
): MockGenerateScript {
  const states: JobState[] = Array.from({ length: steps }, (_, t) => ({
    step: t,
    grid: stateGrid(t),
  }));
  return {
    states,
    revealPerPoll,
    result: {
      grid: stateGrid(steps - 1),
      point_count: pointCount,
      skipped_voxels: 1,
      seed: 0,
    },
    splatBytes: makePlyBytes(pointCount, 11),
  };
}

function readySession(server: MockServer): EditorSession {
  const prim = server.addPrimitive({ coarse_resolution: 8 });
  const session = createSession({ primitiveId: prim.id, coarseResolution: 8 });
  voxelEdit(session, [3, 3, 3]);
  voxelEdit(session, [3, 4, 3]);
  return session;
}

function makeFlow(server: MockServer, maxPolls = 100) {
  const api = new ApiClient("http://mock", server.fetch);
  const renderer = new DrawListRenderer();
  const flow = new GenerationFlow(api, renderer, {
    sleep: () => Promise.resolve(),
    pollDelayMs: 0,
    maxPolls,
  });
  return { api, renderer, flow };
}

describe("generation flow", () => {
  it("renders every streamed state once, in order, then the final splat", async () => {
    const server = new MockServer();
    const session = readySession(server);
    server.nextGenerateScript = growthScript(8, 10, 3);
    const { renderer, flow } = makeFlow(server);

    const outcome = await flow.trigger(session, 42);
    expect(outcome.ok).toBe(true);
    expect(outcome.seed).toBe(42);
    expect(session.lastSeed).toBe(42);

    // every intermediate state rendered exactly once, arrival order kept
    expect(renderer.stateRenders.length).toBe(8);
    expect(renderer.stateRenders.map((s) => s.step)).toEqual([0, 1, 2, 3, 4, 5, 6, 7]);
    expect(outcome.renderedSteps).toEqual([0, 1, 2, 3, 4, 5, 6, 7]);
    for (let i = 1; i < outcome.renderedSteps.length; i++) {
      expect(outcome.renderedSteps[i]!).toBeGreaterThanOrEqual(
        outcome.renderedSteps[i - 1]!,
      );
    }
    // the growth preview draws the streamed cells as colored voxels
    expect(renderer.stateRenders[7]!.sprites.length).toBe(8);

    // final render point count equals the returned payload count
    expect(outcome.pointCount).toBe(10);
    expect(renderer.finalSprites).not.toBeNull();
    expect(renderer.finalSprites!.length).toBe(10);
    expect(outcome.splat!.count).toBe(10);
    expect(outcome.skippedVoxels).toBe(1);
  });

  it("an empty conditioning grid disables generation and sends nothing", async () => {
    const server = new MockServer();
    const prim = server.addPrimitive();
    const session = createSession({ primitiveId: prim.id, coarseResolution: 8 });
    const { flow } = makeFlow(server);

    expect(canGenerate(session)).toBe(false);
    const outcome = await flow.trigger(session, 1);
    expect(outcome.ok).toBe(false);
    expect(outcome.error).toMatch(/empty/);
    expect(server.requestLog.length).toBe(0);
    expect(session.notices.at(-1)?.kind).toBe("generation-failed");

    voxelEdit(session, [0, 0, 0]);
    expect(canGenerate(session)).toBe(true);
  });

  it("requires an active primitive", async () => {
    const server = new MockServer();
    const session = createSession({ coarseResolution: 8 });
    voxelEdit(session, [1, 1, 1]);
    const { flow } = makeFlow(server);
    const outcome = await flow.trigger(session);
    expect(outcome.ok).toBe(false);
    expect(outcome.error).toMatch(/primitive/);
    expect(server.requestLog.length).toBe(0);
  });

  it("surfaces job failure inline and never fetches the result", async () => {
    const server = new MockServer();
    const session = readySession(server);
    const script = growthScript(3, 5, 2);
    script.error = "sampler collapsed to an empty state";
    server.nextGenerateScript = script;
    const { renderer, flow } = makeFlow(server);

    const outcome = await flow.trigger(session, 7);
    expect(outcome.ok).toBe(false);
    expect(outcome.error).toMatch(/sampler collapsed/);
    expect(session.notices.some((n) => n.kind === "generation-failed")).toBe(true);
    // the states streamed before the failure still rendered
    expect(renderer.stateRenders.length).toBe(3);
    expect(renderer.finalSprites).toBeNull();
    const resultFetches = server.requestLog.filter((r) =>
      r.path.includes("/result"),
    );
    expect(resultFetches.length).toBe(0);
  });

  it("maps a rejected generate request onto an inline error", async () => {
    const server = new MockServer();
    const prim = server.addPrimitive({ coarse_resolution: 16 });
    // session resolution disagrees with the primitive's coarse resolution
    const session = createSession({ primitiveId: prim.id, coarseResolution: 8 });
    voxelEdit(session, [1, 1, 1]);
    const { flow } = makeFlow(server);
    const outcome = await flow.trigger(session);
    expect(outcome.ok).toBe(false);
    expect(outcome.error).toMatch(/does not match primitive coarse resolution/);
  });

  it("resample reuses the conditioning with a fresh server seed", async () => {
    const server = new MockServer();
    const session = readySession(server);
    server.nextGenerateScript = growthScript(2, 4, 2);
    const { flow } = makeFlow(server);
    const first = await flow.trigger(session, 123);
    server.nextGenerateScript = growthScript(2, 4, 2);
    const second = await flow.resample(session);

    expect(first.ok && second.ok).toBe(true);
    expect(second.seed).not.toBe(first.seed);
    expect(session.lastSeed).toBe(second.seed);
    const posts = server.requestLog.filter((r) => r.path.includes("/generate"));
    expect(posts.length).toBe(2);
    const bodyA = posts[0]!.body as { conditioning: unknown; seed?: number };
    const bodyB = posts[1]!.body as { conditioning: unknown; seed?: number };
    expect(bodyB.conditioning).toEqual(bodyA.conditioning);
    expect(bodyA.seed).toBe(123);
    expect(bodyB.seed).toBeUndefined();
  });

  it("turns rejected-edit state entries into notices, not draws", async () => {
    const server = new MockServer();
    const session = readySession(server);
    const script = growthScript(2, 4, 5);
    script.states = [
      { rejected_edits: [{ index: 0, op: "add", reason: "cell out of bounds" }] },
      ...script.states,
    ];
    server.nextGenerateScript = script;
    const { renderer, flow } = makeFlow(server);
    const outcome = await flow.trigger(session, 3);
    expect(outcome.ok).toBe(true);
    expect(renderer.stateRenders.length).toBe(2);
    expect(session.notices.some((n) => n.kind === "edit-rejected")).toBe(true);
  });

  it("flags a splat whose count disagrees with the payload", async () => {
    const server = new MockServer();
    const session = readySession(server);
    const script = growthScript(2, 6, 2);
    script.splatBytes = makePlyBytes(5, 1);
    server.nextGenerateScript = script;
    const { renderer, flow } = makeFlow(server);
    const outcome = await flow.trigger(session, 9);
    expect(outcome.ok).toBe(false);
    expect(outcome.error).toMatch(/5 points but result reports 6/);
    expect(renderer.finalSprites!.length).toBe(5);
  });

  it("gives up politely when polling exceeds its budget", async () => {
    const server = new MockServer();
    const session = readySession(server);
    server.nextGenerateScript = growthScript(4, 4, 0);
    const { flow } = makeFlow(server, 3);
    const outcome = await flow.trigger(session, 2);
    expect(outcome.ok).toBe(false);
    expect(outcome.error).toMatch(/timed out/);
  });

  it("refuses concurrent runs in one session", async () => {
    const server = new MockServer();
    const session = readySession(server);
    server.nextGenerateScript = growthScript(3, 4, 1);
    const { flow } = makeFlow(server);
    const first = flow.trigger(session, 1);
    const second = await flow.trigger(session, 2);
    expect(second.ok).toBe(false);
    expect(second.error).toMatch(/already running/);
    expect((await first).ok).toBe(true);
  });
});
