// Pure session state for the viewer: what the user is drafting, what was
// last applied, and a bounded history of applied queries. No DOM access, so
// the whole module runs under plain node tests.

import type { EditKind, Modality, QueryBody } from './api.js';

export interface RectDraft {
  kind: 'rect';
  view: number;
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export interface LabelDraft {
  kind: 'label';
  label: string;
}

export type Draft = RectDraft | LabelDraft;

export interface HistoryEntry {
  body: QueryBody;
  summary: string;
}

/** Cosine thresholds live in (-1, 1]; 1 selects only exact matches. */
export function clampThreshold(t: number): number {
  if (Number.isNaN(t)) return 0.8;
  return Math.min(1, Math.max(-0.999, t));
}

/** Order corners and clip to image bounds so the server never sees an empty
 * or out-of-range patch. */
export function clampRect(d: RectDraft, width: number, height: number): RectDraft {
  let { x0, y0, x1, y1 } = d;
  if (x1 < x0) [x0, x1] = [x1, x0];
  if (y1 < y0) [y0, y1] = [y1, y0];
  const clip = (v: number, hi: number) => Math.min(hi - 1, Math.max(0, Math.round(v)));
  x0 = clip(x0, width);
  y0 = clip(y0, height);
  x1 = clip(x1, width);
  y1 = clip(y1, height);
  if (x1 === x0) x1 = Math.min(width - 1, x0 + 1);
  if (y1 === y0) y1 = Math.min(height - 1, y0 + 1);
  return { kind: 'rect', view: d.view, x0, y0, x1, y1 };
}

export class SessionState {
  draft: Draft | null = null;
  modality: Modality = 'visual';
  threshold = 0.8;
  edit: EditKind = 'extract';
  color: [number, number, number] = [0.2, 0.8, 0.2];
  view = 0;
  overlayAlpha = 0.45;
  history: HistoryEntry[] = [];
  maxHistory = 20;

  constructor(
    public width: number,
    public height: number,
  ) {}

  setRect(view: number, x0: number, y0: number, x1: number, y1: number): void {
    this.draft = clampRect({ kind: 'rect', view, x0, y0, x1, y1 }, this.width, this.height);
  }

  setLabel(label: string): void {
    this.draft = { kind: 'label', label };
  }

  setThreshold(t: number): void {
    this.threshold = clampThreshold(t);
  }

  /** null when there is nothing to apply yet. */
  buildQueryBody(): QueryBody | null {
    if (this.draft === null) return null;
    const body: QueryBody = {
      modality: this.modality,
      threshold: this.threshold,
      edit: this.edit,
      view: this.view,
    };
    if (this.edit === 'recolor') body.color = [...this.color] as [number, number, number];
    if (this.draft.kind === 'rect') {
      const r = this.draft;
      body.rect = [r.view, r.x0, r.y0, r.x1, r.y1];
    } else {
      body.label = this.draft.label;
    }
    return body;
  }

  describeDraft(): string {
    if (this.draft === null) return 'no selection';
    if (this.draft.kind === 'label') return `label "${this.draft.label}"`;
    const r = this.draft;
    return `rect view ${r.view} [${r.x0},${r.y0}]..[${r.x1},${r.y1}]`;
  }

  pushHistory(body: QueryBody): void {
    const what = body.label !== undefined ? `"${body.label}"` : `rect@${body.rect?.[0]}`;
    const summary = `${what} ${body.modality} τ=${body.threshold.toFixed(2)} ${body.edit}`;
    this.history.push({ body, summary });
    if (this.history.length > this.maxHistory) this.history.shift();
  }

  /** Restore the controls that produced a past query so Apply replays it. */
  restore(entry: HistoryEntry): void {
    const b = entry.body;
    this.modality = b.modality;
    this.threshold = b.threshold;
    this.edit = b.edit;
    if (b.color) this.color = [...b.color] as [number, number, number];
    if (b.view !== undefined) this.view = b.view;
    if (b.rect) {
      const [view, x0, y0, x1, y1] = b.rect;
      this.draft = { kind: 'rect', view, x0, y0, x1, y1 };
    } else if (b.label !== undefined) {
      this.draft = { kind: 'label', label: b.label };
    }
  }
}

/** At most one request in flight; starting a new one aborts the old. */
export class SingleFlight {
  private controller: AbortController | null = null;

  async run<T>(fn: (signal: AbortSignal) => Promise<T>): Promise<T> {
    this.controller?.abort();
    const controller = new AbortController();
    this.controller = controller;
    try {
      return await fn(controller.signal);
    } finally {
      if (this.controller === controller) this.controller = null;
    }
  }

  get busy(): boolean {
    return this.controller !== null;
  }

  cancel(): void {
    this.controller?.abort();
    this.controller = null;
  }
}
