/**
 * Typed client for the edit service's /v1 HTTP API.
 *
 * One rule the UI depends on: a session holds a single active edit.
 * The service answers 409 when a second edit races an in-flight one,
 * and the client mirrors that by refusing to start a request while one
 * is pending, so the Apply button can simply bind to `busy`.
 */

import { toBase64, fromBase64 } from "./b64.js";

export interface HealthzResponse {
  status: string;
  ckpt_hash: string;
  resolution: number;
}

export interface DirectionInfo {
  name: string;
  default_epsilon: number;
}

export interface AttrStep {
  name: string;
  epsilon: number;
}

export interface EditLayers {
  mask: Uint8Array;
  sketch?: Uint8Array;
  semantic?: Uint8Array;
  color?: Uint8Array;
  exemplar?: Uint8Array;
  text?: string;
  attrs?: AttrStep[];
  seed?: number;
}

export interface EditResponse {
  /** Decoded result PNG bytes. */
  image: Uint8Array;
  /** Raw base64 as returned; byte-stable key for caching/thumbnails. */
  imageB64: string;
  step_index: number;
  timings: Record<string, number>;
  bg_max_dev: number;
  seed: number;
  warning?: string;
  text_trajectory?: number[];
  text_aborted?: boolean;
}

export interface UndoResponse {
  image: Uint8Array;
  imageB64: string;
  step_index: number;
}

export interface HistoryStep {
  step_index: number;
  seed: number;
  summary: {
    modalities: string[];
    text: string | null;
    attrs: [string, number][];
  };
  mask_hash: string;
  inputs_hash: string;
  output_hash: string;
  timestamp: number;
}

export class ApiError extends Error {
  readonly status: number;
  readonly correlationId?: string;

  constructor(status: number, detail: string, correlationId?: string) {
    super(detail);
    this.status = status;
    this.correlationId = correlationId;
  }

  /** Message suitable for the status bar. */
  display(): string {
    const id = this.correlationId ? ` [ref ${this.correlationId}]` : "";
    return `${this.message} (HTTP ${this.status})${id}`;
  }
}

type FetchFn = typeof fetch;

export class EditClient {
  readonly baseUrl: string;
  private readonly fetchFn: FetchFn;
  private _busy = false;

  constructor(baseUrl: string, fetchFn: FetchFn = fetch) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchFn = fetchFn;
  }

  get busy(): boolean {
    return this._busy;
  }

  private async request(
    method: "GET" | "POST",
    path: string,
    body?: unknown,
  ): Promise<any> {
    let res: Response;
    try {
      res = await this.fetchFn(`${this.baseUrl}${path}`, {
        method,
        headers: body !== undefined ? { "content-type": "application/json" } : undefined,
        body: body !== undefined ? JSON.stringify(body) : undefined,
      });
    } catch (err) {
      throw new ApiError(0, `service unreachable: ${String(err)}`);
    }
    let payload: any = null;
    try {
      payload = await res.json();
    } catch {
      // non-JSON error body; fall through with the status alone
    }
    if (!res.ok) {
      const detail =
        payload && typeof payload.detail === "string"
          ? payload.detail
          : `request failed with status ${res.status}`;
      throw new ApiError(res.status, detail, payload?.correlation_id);
    }
    return payload;
  }

  /**
   * Run fn as the single in-flight mutation. Rejects immediately when
   * another one is pending instead of queueing, matching the server's
   * 409 on concurrent edits.
   */
  private async exclusive<T>(fn: () => Promise<T>): Promise<T> {
    if (this._busy) {
      throw new ApiError(409, "an edit is already in flight");
    }
    this._busy = true;
    try {
      return await fn();
    } finally {
      this._busy = false;
    }
  }

  healthz(): Promise<HealthzResponse> {
    return this.request("GET", "/v1/healthz");
  }

  async directions(): Promise<DirectionInfo[]> {
    const body = await this.request("GET", "/v1/directions");
    return body.directions;
  }

  async createSession(
    imagePng: Uint8Array,
  ): Promise<{ sessionId: string; warning?: string }> {
    const body = await this.request("POST", "/v1/sessions", {
      image: toBase64(imagePng),
    });
    return { sessionId: body.session_id, warning: body.warning };
  }

  edit(sessionId: string, layers: EditLayers): Promise<EditResponse> {
    return this.exclusive(async () => {
      const payload: Record<string, unknown> = {
        mask: toBase64(layers.mask),
        seed: layers.seed ?? 0,
        attrs: layers.attrs ?? [],
      };
      if (layers.sketch) payload.sketch = toBase64(layers.sketch);
      if (layers.semantic) payload.semantic = toBase64(layers.semantic);
      if (layers.color) payload.color = toBase64(layers.color);
      if (layers.exemplar) payload.exemplar = toBase64(layers.exemplar);
      if (layers.text !== undefined) payload.text = layers.text;
      const body = await this.request(
        "POST",
        `/v1/sessions/${sessionId}/edit`,
        payload,
      );
      return {
        image: fromBase64(body.image),
        imageB64: body.image,
        step_index: body.step_index,
        timings: body.timings,
        bg_max_dev: body.bg_max_dev,
        seed: body.seed,
        warning: body.warning,
        text_trajectory: body.text_trajectory,
        text_aborted: body.text_aborted,
      };
    });
  }

  undo(sessionId: string): Promise<UndoResponse> {
    return this.exclusive(async () => {
      const body = await this.request(
        "POST",
        `/v1/sessions/${sessionId}/undo`,
        {},
      );
      return {
        image: fromBase64(body.image),
        imageB64: body.image,
        step_index: body.step_index,
      };
    });
  }

  async history(sessionId: string): Promise<HistoryStep[]> {
    const body = await this.request(
      "GET",
      `/v1/sessions/${sessionId}/history`,
    );
    return body.steps;
  }
}
