/**
 * Generation flow: post the session's conditioning, poll the job, render
 * every streamed intermediate state exactly once in arrival order, then
 * fetch the result payload and splat and render the final sprites. The
 * resample action reuses the conditioning with a fresh server-assigned
 * seed. Failures are surfaced inline on the session, never thrown at the
 * UI shell.
 */

import { ApiClient, ApiError, GenerateResultPayload, JobState } from "./api.js";
import { cellCount, GridJson, serializeGrid } from "./grid.js";
import { RendererSink } from "./render.js";
import { EditorSession, pushNotice } from "./session.js";
import { ParsedSplat, parseSplat } from "./splat.js";

export interface GenerationOutcome {
  ok: boolean;
  jobId: string | null;
  seed: number | null;
  error: string | null;
  /** Step indices in the order they were rendered. */
  renderedSteps: number[];
  pointCount: number | null;
  skippedVoxels: number | null;
  resultGrid: GridJson | null;
  splat: ParsedSplat | null;
}

export interface FlowOptions {
  pollDelayMs?: number;
  sleep?: (ms: number) => Promise<void>;
  /** Poll budget before giving up; generation jobs are short. */
  maxPolls?: number;
}

/** The generate button's enabled state. */
export function canGenerate(session: EditorSession): boolean {
  return session.primitiveId !== null && cellCount(session.grid) > 0;
}

function failure(
  session: EditorSession,
  outcome: Partial<GenerationOutcome>,
  error: string,
): GenerationOutcome {
  pushNotice(session, "generation-failed", error);
  return {
    ok: false,
    jobId: null,
    seed: null,
    error,
    renderedSteps: [],
    pointCount: null,
    skippedVoxels: null,
    resultGrid: null,
    splat: null,
    ...outcome,
  };
}

export class GenerationFlow {
  private api: ApiClient;
  private renderer: RendererSink;
  private pollDelayMs: number;
  private sleep: (ms: number) => Promise<void>;
  private maxPolls: number;
  running = false;

  constructor(api: ApiClient, renderer: RendererSink, options: FlowOptions = {}) {
    this.api = api;
    this.renderer = renderer;
    this.pollDelayMs = options.pollDelayMs ?? 250;
    this.sleep =
      options.sleep ?? ((ms) => new Promise((resolve) => setTimeout(resolve, ms)));
    this.maxPolls = options.maxPolls ?? 4800;
  }

  /**
   * Render states [from, states.length) and return the new cursor. Any
   * rejected-edit entries become notices instead of draws.
   */
  private renderNewStates(
    session: EditorSession,
    states: JobState[],
    from: number,
    renderedSteps: number[],
  ): number {
    for (let i = from; i < states.length; i++) {
      const state = states[i]!;
      if ("grid" in state && "step" in state) {
        this.renderer.renderVoxelState(state.step, state.grid);
        renderedSteps.push(state.step);
      } else if ("rejected_edits" in state) {
        for (const rejected of state.rejected_edits) {
          pushNotice(
            session,
            "edit-rejected",
            `edit ${rejected.index} (${rejected.op}): ${rejected.reason}`,
          );
        }
      }
    }
    return states.length;
  }

  /**
   * Run one generation, rendering growth previews as they stream. Passing
   * no seed lets the server assign one from its counter; the echoed seed is
   * stored on the session for the resample action.
   */
  async trigger(session: EditorSession, seed?: number): Promise<GenerationOutcome> {
    if (!canGenerate(session)) {
      return failure(
        session,
        {},
        session.primitiveId === null
          ? "no active primitive"
          : "conditioning grid is empty",
      );
    }
    if (this.running) {
      return failure(session, {}, "a generation is already running");
    }
    this.running = true;
    try {
      return await this.run(session, seed);
    } finally {
      this.running = false;
    }
  }

  /** Reuse the current conditioning with a fresh server-assigned seed. */
  resample(session: EditorSession): Promise<GenerationOutcome> {
    return this.trigger(session, undefined);
  }

  private async run(session: EditorSession, seed?: number): Promise<GenerationOutcome> {
    this.renderer.clear();
    const renderedSteps: number[] = [];
    let jobId: string;
    let echoedSeed: number;
    try {
      const resp = await this.api.generate(session.primitiveId!, {
        conditioning: serializeGrid(session.grid),
        ...(seed !== undefined ? { seed } : {}),
      });
      jobId = resp.job_id;
      echoedSeed = resp.seed;
    } catch (e) {
      const msg = e instanceof ApiError ? e.detail : String(e);
      return failure(session, {}, `generation request rejected: ${msg}`);
    }
    session.lastSeed = echoedSeed;

    let rendered = 0;
    for (let poll = 0; poll < this.maxPolls; poll++) {
      let snap;
      try {
        snap = await this.api.getJob(jobId);
      } catch (e) {
        const msg = e instanceof ApiError ? e.detail : String(e);
        return failure(
          session,
          { jobId, seed: echoedSeed, renderedSteps },
          `job poll failed: ${msg}`,
        );
      }
      rendered = this.renderNewStates(session, snap.states, rendered, renderedSteps);
      if (snap.status === "failed") {
        return failure(
          session,
          { jobId, seed: echoedSeed, renderedSteps },
          snap.error ?? "generation job failed",
        );
      }
      if (snap.status === "done") {
        return await this.finalize(session, jobId, echoedSeed, renderedSteps);
      }
      await this.sleep(this.pollDelayMs);
    }
    return failure(
      session,
      { jobId, seed: echoedSeed, renderedSteps },
      "generation polling timed out",
    );
  }

  private async finalize(
    session: EditorSession,
    jobId: string,
    seed: number,
    renderedSteps: number[],
  ): Promise<GenerationOutcome> {
    let result: GenerateResultPayload;
    let splat: ParsedSplat;
    try {
      result = await this.api.getJobResult(jobId);
      splat = parseSplat(await this.api.getJobSplat(jobId));
    } catch (e) {
      const msg = e instanceof ApiError ? e.detail : String(e);
      return failure(
        session,
        { jobId, seed, renderedSteps },
        `result fetch failed: ${msg}`,
      );
    }
    this.renderer.renderFinalSplat(splat);
    if (splat.count !== result.point_count) {
      return failure(
        session,
        {
          jobId,
          seed,
          renderedSteps,
          pointCount: result.point_count,
          skippedVoxels: result.skipped_voxels,
          resultGrid: result.grid,
          splat,
        },
        `splat payload has ${splat.count} points but result reports ${result.point_count}`,
      );
    }
    return {
      ok: true,
      jobId,
      seed,
      error: null,
      renderedSteps,
      pointCount: result.point_count,
      skippedVoxels: result.skipped_voxels,
      resultGrid: result.grid,
      splat,
    };
  }
}
