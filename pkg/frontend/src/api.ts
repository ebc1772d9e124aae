// Typed client for the field service. Every mask and render comes from the
// server; the viewer never computes similarity locally, so the bytes returned
// here are displayed as-is.

export interface SceneInfo {
  n_views: number;
  width: number;
  height: number;
  train_views: number[];
  test_views: number[];
  near: number;
  far: number;
  labels: string[];
  fg_labels: string[];
  objects: { label: string; kind: string }[];
  bbox_min: number[];
  bbox_max: number[];
  resolution: number[];
}

export type Modality = 'visual' | 'language';
export type EditKind = 'extract' | 'delete' | 'recolor';

export interface QueryBody {
  label?: string;
  rect?: [number, number, number, number, number]; // view, x0, y0, x1, y1
  embedding?: number[];
  modality: Modality;
  threshold: number;
  edit: EditKind;
  color?: [number, number, number];
  view?: number;
  n_samples?: number;
}

export interface QueryStats {
  selected_voxel_fraction: number;
  view: number;
  mask_iou?: number;
  gt_label?: string;
}

export interface QueryResponse {
  render_png: string; // base64 PNG of the edited render
  mask_png: string; // base64 PNG of the 2D visibility mask
  stats: QueryStats;
}

/** Non-2xx responses carry the server's field-level message in `detail`. */
export class ServiceError extends Error {
  constructor(public status: number, public detail: string) {
    super(`service ${status}: ${detail}`);
  }
}

async function unwrap<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      if (typeof body.detail === 'string') detail = body.detail;
    } catch {
      // non-JSON error body: keep the status text
    }
    throw new ServiceError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class ApiClient {
  constructor(
    private base: string,
    private fetchFn: typeof fetch = fetch,
  ) {}

  async scene(): Promise<SceneInfo> {
    return unwrap<SceneInfo>(await this.fetchFn(`${this.base}/scene`));
  }

  /** PNG endpoint URLs are handed straight to <img>/fetch. */
  frameUrl(view: number): string {
    return `${this.base}/frames/${view}`;
  }

  groundTruthUrl(view: number): string {
    return `${this.base}/gt/${view}`;
  }

  async query(body: QueryBody, signal?: AbortSignal): Promise<QueryResponse> {
    const resp = await this.fetchFn(`${this.base}/query`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
      signal,
    });
    return unwrap<QueryResponse>(resp);
  }
}

/** Decode a base64 PNG payload to raw bytes (browser and node). */
export function decodeBase64(data: string): Uint8Array {
  if (typeof atob === 'function') {
    const bin = atob(data);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  return new Uint8Array(Buffer.from(data, 'base64'));
}
