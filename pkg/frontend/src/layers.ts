/**
 * Layer panel actions: duplicate, translate, rotate, color gain, delete,
 * export. Every mutation goes through the API client, the optimistic local
 * change is reconciled from the server payload that comes back, and a
 * stale layer or scene reference triggers a refetch plus a retry prompt.
 */

import { ApiClient, ApiError, ScenePayload } from "./api.js";
import { EditorSession, LayerInfo, pushNotice, TransformJson } from "./session.js";

export interface PanelResult {
  ok: boolean;
  error?: string;
  layerId?: string;
}

const IDENTITY_TRANSFORM: TransformJson = {
  translation: [0, 0, 0],
  quaternion: [1, 0, 0, 0],
  scale: 1,
};

function cloneTransform(t: TransformJson): TransformJson {
  return {
    translation: t.translation.slice(),
    quaternion: t.quaternion.slice(),
    scale: t.scale,
  };
}

export class LayerPanel {
  private api: ApiClient;

  constructor(api: ApiClient) {
    this.api = api;
  }

  /** Create the backing scene on first use. */
  async ensureScene(session: EditorSession, name = "session scene"): Promise<string> {
    if (session.sceneId !== null) return session.sceneId;
    const created = await this.api.createScene(name);
    session.sceneId = created.id;
    session.layers = [];
    return created.id;
  }

  private reconcile(session: EditorSession, scene: ScenePayload): void {
    session.layers = scene.layers.map((layer) => ({
      ...layer,
      transform: cloneTransform(layer.transform),
      color_gain: layer.color_gain.slice(),
    }));
  }

  /** Refetch the server scene and mirror it locally. */
  async refresh(session: EditorSession): Promise<void> {
    if (session.sceneId === null) return;
    this.reconcile(session, await this.api.getScene(session.sceneId));
  }

  /**
   * Shared error path: a vanished scene or layer means our mirror is stale,
   * so refetch and ask the user to retry against fresh state.
   */
  private async stale(session: EditorSession, e: unknown): Promise<PanelResult> {
    const detail = e instanceof ApiError ? e.detail : String(e);
    if (e instanceof ApiError && (e.status === 404 || e.status === 409)) {
      try {
        await this.refresh(session);
      } catch {
        // the scene itself may be gone; the notice below still fires
      }
      pushNotice(session, "stale-retry", `view was stale, retry: ${detail}`);
    } else {
      pushNotice(session, "panel-error", detail);
    }
    return { ok: false, error: detail };
  }

  private findLayer(session: EditorSession, layerId: string): LayerInfo | null {
    return session.layers.find((layer) => layer.id === layerId) ?? null;
  }

  /** Attach a finished generation job to the scene as a new layer. */
  async addFromJob(
    session: EditorSession,
    jobId: string,
    options: { transform?: TransformJson; color_gain?: number[] } = {},
  ): Promise<PanelResult> {
    try {
      const sceneId = await this.ensureScene(session);
      const resp = await this.api.addLayer(sceneId, { job_id: jobId, ...options });
      this.reconcile(session, resp.scene);
      return { ok: true, layerId: resp.layer_id };
    } catch (e) {
      return this.stale(session, e);
    }
  }

  async duplicate(session: EditorSession, layerId: string): Promise<PanelResult> {
    if (session.sceneId === null) return { ok: false, error: "no scene" };
    const src = this.findLayer(session, layerId);
    // Optimistic: show the copy immediately, reconcile from the response.
    if (src !== null) {
      session.layers.push({
        ...src,
        id: `${layerId}-pending-copy`,
        transform: cloneTransform(src.transform),
        color_gain: src.color_gain.slice(),
      });
    }
    try {
      const resp = await this.api.duplicateLayer(session.sceneId, layerId);
      this.reconcile(session, resp.scene);
      return { ok: true, layerId: resp.layer_id };
    } catch (e) {
      if (src !== null) {
        session.layers = session.layers.filter(
          (layer) => layer.id !== `${layerId}-pending-copy`,
        );
      }
      return this.stale(session, e);
    }
  }

  async remove(session: EditorSession, layerId: string): Promise<PanelResult> {
    if (session.sceneId === null) return { ok: false, error: "no scene" };
    try {
      const resp = await this.api.deleteLayer(session.sceneId, layerId);
      this.reconcile(session, resp.scene);
      return { ok: true };
    } catch (e) {
      return this.stale(session, e);
    }
  }

  private async updateLayer(
    session: EditorSession,
    layerId: string,
    body: { transform?: TransformJson; color_gain?: number[] },
  ): Promise<PanelResult> {
    if (session.sceneId === null) return { ok: false, error: "no scene" };
    try {
      const resp = await this.api.updateLayer(session.sceneId, layerId, body);
      const mirrored = this.findLayer(session, layerId);
      if (mirrored !== null) {
        mirrored.transform = cloneTransform(resp.layer.transform);
        mirrored.color_gain = resp.layer.color_gain.slice();
        mirrored.point_count = resp.layer.point_count;
      } else {
        await this.refresh(session);
      }
      return { ok: true, layerId };
    } catch (e) {
      return this.stale(session, e);
    }
  }

  /** Tone-mapping gain; travels to the server so exports carry it. */
  setGain(
    session: EditorSession,
    layerId: string,
    gain: [number, number, number],
  ): Promise<PanelResult> {
    return this.updateLayer(session, layerId, { color_gain: [...gain] });
  }

  setTranslation(
    session: EditorSession,
    layerId: string,
    translation: [number, number, number],
  ): Promise<PanelResult> {
    const current = this.findLayer(session, layerId)?.transform ?? IDENTITY_TRANSFORM;
    const transform = cloneTransform(current);
    transform.translation = [...translation];
    return this.updateLayer(session, layerId, { transform });
  }

  /** Set the layer rotation as a (w,x,y,z) quaternion. */
  setRotation(
    session: EditorSession,
    layerId: string,
    quaternion: [number, number, number, number],
  ): Promise<PanelResult> {
    const current = this.findLayer(session, layerId)?.transform ?? IDENTITY_TRANSFORM;
    const transform = cloneTransform(current);
    transform.quaternion = [...quaternion];
    return this.updateLayer(session, layerId, { transform });
  }

  /** Composite the scene server-side into one splat payload. */
  async exportScene(session: EditorSession, allowEmpty = false): Promise<ArrayBuffer> {
    if (session.sceneId === null) throw new Error("no scene to export");
    return await this.api.exportScene(session.sceneId, allowEmpty);
  }
}
