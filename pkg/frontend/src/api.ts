/**
 * Typed client for the authoring service. Every request the UI makes goes
 * through this table of documented endpoints; no other module touches the
 * network, which is what keeps "UI never mutates server state except
 * through documented endpoints" checkable.
 */

import { GridJson } from "./grid.js";
import { EditOp } from "./edits.js";
import { LayerInfo, TransformJson } from "./session.js";

export interface PrimitivePayload {
  id: string;
  name: string;
  status: string;
  error: string | null;
  target_resolution?: number;
  coarse_resolution?: number;
  exemplar_cells?: number;
  point_count?: number;
}

export interface CreatePrimitiveResponse {
  id: string;
  name: string;
  status: string;
  job_id?: string;
  seed?: number;
}

export interface GenerateResponse {
  job_id: string;
  seed: number;
  status: string;
}

export type JobState =
  | { step: number; grid: GridJson }
  | { rejected_edits: { index: number; op: string; reason: string }[] };

export interface JobSnapshot {
  id: string;
  kind: string;
  primitive_id: string;
  seed: number;
  status: "queued" | "running" | "done" | "failed";
  progress: number;
  error: string | null;
  state_count: number;
  states: JobState[];
}

export interface GenerateResultPayload {
  grid: GridJson;
  point_count: number;
  skipped_voxels: number;
  seed: number;
}

export interface ScenePayload {
  id: string;
  name: string;
  layers: LayerInfo[];
}

export interface GenerateRequest {
  conditioning?: GridJson;
  edits?: EditOp[];
  seed?: number;
  T_infer?: number;
  l?: number;
  consistency_iterations?: number;
  w?: number;
  beta?: number;
  lambda_patch?: number;
  consistency?: boolean;
}

export interface TrainRequest {
  seed?: number;
  iterations?: number;
  base_channels?: number;
  depth?: number;
  target_resolution?: number;
  coarse_resolution?: number;
  allow_any_resolution?: boolean;
  lr?: number;
  wd?: number;
}

export interface LayerUpdateRequest {
  transform?: TransformJson;
  color_gain?: number[];
}

export class ApiError extends Error {
  status: number;
  detail: string;

  constructor(status: number, detail: string) {
    super(`HTTP ${status}: ${detail}`);
    this.status = status;
    this.detail = detail;
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private baseUrl: string;
  private fetchFn: FetchLike;

  constructor(baseUrl: string, fetchFn?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  private async request(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<Response> {
    const init: RequestInit = { method };
    if (body instanceof ArrayBuffer || body instanceof Uint8Array) {
      init.body = body as BodyInit;
      init.headers = { "content-type": "application/octet-stream" };
    } else if (body !== undefined) {
      init.body = JSON.stringify(body);
      init.headers = { "content-type": "application/json" };
    }
    const res = await this.fetchFn(this.baseUrl + path, init);
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const parsed = (await res.json()) as { detail?: unknown };
        if (parsed && parsed.detail !== undefined) detail = String(parsed.detail);
      } catch {
        // non-JSON error body: keep the status text
      }
      throw new ApiError(res.status, detail);
    }
    return res;
  }

  private async json<T>(method: string, path: string, body?: unknown): Promise<T> {
    const res = await this.request(method, path, body);
    return (await res.json()) as T;
  }

  private async binary(method: string, path: string, body?: unknown): Promise<ArrayBuffer> {
    const res = await this.request(method, path, body);
    return await res.arrayBuffer();
  }

  // -- primitives -----------------------------------------------------------

  /** Upload a splat payload and start training; options ride as query params. */
  createPrimitiveFromSplat(
    name: string,
    splatBytes: ArrayBuffer | Uint8Array,
    options: Record<string, string | number | boolean> = {},
  ): Promise<CreatePrimitiveResponse> {
    const params = new URLSearchParams({ name });
    for (const [key, value] of Object.entries(options)) {
      params.set(key, String(value));
    }
    return this.json("POST", `/primitives?${params.toString()}`, splatBytes);
  }

  /** Upload a pre-trained archive; ready immediately, no training job. */
  createPrimitiveFromArchive(
    name: string,
    archiveBytes: ArrayBuffer | Uint8Array,
  ): Promise<CreatePrimitiveResponse> {
    const params = new URLSearchParams({ name });
    return this.json("POST", `/primitives?${params.toString()}`, archiveBytes);
  }

  listPrimitives(): Promise<{ primitives: PrimitivePayload[] }> {
    return this.json("GET", "/primitives");
  }

  getPrimitive(id: string): Promise<PrimitivePayload> {
    return this.json("GET", `/primitives/${id}`);
  }

  retrainPrimitive(id: string, body: TrainRequest = {}): Promise<{
    id: string;
    job_id: string;
    seed: number;
  }> {
    return this.json("POST", `/primitives/${id}/train`, body);
  }

  // -- generation -------------------------------------------------------------

  generate(primitiveId: string, body: GenerateRequest): Promise<GenerateResponse> {
    return this.json("POST", `/primitives/${primitiveId}/generate`, body);
  }

  getJob(jobId: string): Promise<JobSnapshot> {
    return this.json("GET", `/jobs/${jobId}`);
  }

  getJobResult(jobId: string): Promise<GenerateResultPayload> {
    return this.json("GET", `/jobs/${jobId}/result`);
  }

  getJobSplat(jobId: string): Promise<ArrayBuffer> {
    return this.binary("GET", `/jobs/${jobId}/result/splat`);
  }

  // -- scenes -----------------------------------------------------------------

  createScene(name: string): Promise<{ id: string; name: string }> {
    return this.json("POST", "/scenes", { name });
  }

  listScenes(): Promise<{ scenes: ScenePayload[] }> {
    return this.json("GET", "/scenes");
  }

  getScene(sceneId: string): Promise<ScenePayload> {
    return this.json("GET", `/scenes/${sceneId}`);
  }

  deleteScene(sceneId: string): Promise<{ ok: boolean }> {
    return this.json("DELETE", `/scenes/${sceneId}`);
  }

  addLayer(
    sceneId: string,
    body: { job_id: string; transform?: TransformJson; color_gain?: number[] },
  ): Promise<{ layer_id: string; scene: ScenePayload }> {
    return this.json("POST", `/scenes/${sceneId}/layers`, body);
  }

  updateLayer(
    sceneId: string,
    layerId: string,
    body: LayerUpdateRequest,
  ): Promise<{ layer: LayerInfo }> {
    return this.json("PUT", `/scenes/${sceneId}/layers/${layerId}`, body);
  }

  duplicateLayer(
    sceneId: string,
    layerId: string,
  ): Promise<{ layer_id: string; scene: ScenePayload }> {
    return this.json("POST", `/scenes/${sceneId}/layers/${layerId}/duplicate`);
  }

  deleteLayer(sceneId: string, layerId: string): Promise<{ scene: ScenePayload }> {
    return this.json("DELETE", `/scenes/${sceneId}/layers/${layerId}`);
  }

  exportScene(sceneId: string, allowEmpty = false): Promise<ArrayBuffer> {
    return this.binary("POST", `/scenes/${sceneId}/export`, {
      allow_empty: allowEmpty,
    });
  }
}
