// DOM wiring for the viewer. All logic that merits tests lives in api.ts,
// state.ts and overlay.ts; this file only moves values between widgets and
// those modules.

import { ApiClient, decodeBase64, ServiceError } from './api.js';
import type { QueryResponse, SceneInfo } from './api.js';
import { maskFromGray, tintMask } from './overlay.js';
import type { Rgba } from './overlay.js';
import { SessionState, SingleFlight } from './state.js';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function apiBase(): string {
  const param = new URLSearchParams(window.location.search).get('api');
  return (param ?? 'http://localhost:8000').replace(/\/$/, '');
}

async function pngToRgba(bytes: Uint8Array): Promise<Rgba> {
  const bitmap = await createImageBitmap(
    new Blob([bytes.buffer as ArrayBuffer], { type: 'image/png' }),
  );
  const canvas = document.createElement('canvas');
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  const g = canvas.getContext('2d')!;
  g.drawImage(bitmap, 0, 0);
  const img = g.getImageData(0, 0, bitmap.width, bitmap.height);
  return { data: img.data, width: img.width, height: img.height };
}

function drawRgba(canvas: HTMLCanvasElement, img: Rgba): void {
  canvas.width = img.width;
  canvas.height = img.height;
  canvas
    .getContext('2d')!
    .putImageData(new ImageData(new Uint8ClampedArray(img.data), img.width, img.height), 0, 0);
}

async function main(): Promise<void> {
  const api = new ApiClient(apiBase());
  const status = el<HTMLDivElement>('status');
  const errorBox = el<HTMLDivElement>('error');

  let scene: SceneInfo;
  try {
    scene = await api.scene();
  } catch (e) {
    errorBox.textContent = `cannot reach service at ${apiBase()}: ${e}`;
    return;
  }

  const state = new SessionState(scene.width, scene.height);
  const flight = new SingleFlight();

  const viewSelect = el<HTMLSelectElement>('view');
  const labelSelect = el<HTMLSelectElement>('label');
  const modalitySelect = el<HTMLSelectElement>('modality');
  const editSelect = el<HTMLSelectElement>('edit');
  const thresholdInput = el<HTMLInputElement>('threshold');
  const thresholdShow = el<HTMLSpanElement>('threshold-show');
  const alphaInput = el<HTMLInputElement>('alpha');
  const applyBtn = el<HTMLButtonElement>('apply');
  const cancelBtn = el<HTMLButtonElement>('cancel');
  const clearBtn = el<HTMLButtonElement>('clear');
  const sourceCanvas = el<HTMLCanvasElement>('source');
  const resultCanvas = el<HTMLCanvasElement>('result');
  const prevCanvas = el<HTMLCanvasElement>('previous');
  const historyList = el<HTMLUListElement>('history');
  const draftShow = el<HTMLSpanElement>('draft');

  function refreshLabels(labels: string[]): void {
    labelSelect.innerHTML = '';
    const none = document.createElement('option');
    none.value = '';
    none.textContent = '(none)';
    labelSelect.appendChild(none);
    for (const label of labels) {
      const opt = document.createElement('option');
      opt.value = label;
      opt.textContent = label;
      labelSelect.appendChild(opt);
    }
  }

  for (const v of [...scene.train_views, ...scene.test_views].sort((a, b) => a - b)) {
    const opt = document.createElement('option');
    opt.value = String(v);
    opt.textContent = scene.test_views.includes(v) ? `view ${v} (test)` : `view ${v}`;
    viewSelect.appendChild(opt);
  }
  refreshLabels(scene.fg_labels.length ? scene.fg_labels : scene.labels);

  let sourceImage: Rgba | null = null;
  let lastResult: { render: Rgba; mask: boolean[] } | null = null;
  let prevResult: { render: Rgba; mask: boolean[] } | null = null;

  async function showSource(): Promise<void> {
    status.textContent = `rendering view ${state.view}...`;
    const resp = await fetch(api.frameUrl(state.view));
    sourceImage = await pngToRgba(new Uint8Array(await resp.arrayBuffer()));
    drawRgba(sourceCanvas, sourceImage);
    status.textContent = '';
  }

  function redrawResult(): void {
    const alpha = Number(alphaInput.value);
    if (lastResult) drawRgba(resultCanvas, tintMask(lastResult.render, lastResult.mask, alpha));
    if (prevResult) drawRgba(prevCanvas, tintMask(prevResult.render, prevResult.mask, alpha));
  }

  function syncDraft(): void {
    draftShow.textContent = state.describeDraft();
  }

  viewSelect.addEventListener('change', () => {
    state.view = Number(viewSelect.value);
    void showSource();
  });

  labelSelect.addEventListener('change', () => {
    if (labelSelect.value) state.setLabel(labelSelect.value);
    syncDraft();
  });

  modalitySelect.addEventListener('change', () => {
    state.modality = modalitySelect.value as SessionState['modality'];
  });

  editSelect.addEventListener('change', () => {
    state.edit = editSelect.value as SessionState['edit'];
  });

  thresholdInput.addEventListener('input', () => {
    state.setThreshold(Number(thresholdInput.value));
    thresholdShow.textContent = state.threshold.toFixed(2);
  });

  alphaInput.addEventListener('input', redrawResult);

  // Rect selection by drag on the source canvas.
  let dragStart: [number, number] | null = null;
  const canvasXY = (ev: MouseEvent): [number, number] => {
    const r = sourceCanvas.getBoundingClientRect();
    return [
      ((ev.clientX - r.left) / r.width) * scene.width,
      ((ev.clientY - r.top) / r.height) * scene.height,
    ];
  };
  sourceCanvas.addEventListener('mousedown', (ev) => {
    dragStart = canvasXY(ev);
  });
  sourceCanvas.addEventListener('mouseup', (ev) => {
    if (!dragStart) return;
    const [x1, y1] = canvasXY(ev);
    state.setRect(state.view, dragStart[0], dragStart[1], x1, y1);
    dragStart = null;
    labelSelect.value = '';
    syncDraft();
  });

  clearBtn.addEventListener('click', () => {
    state.draft = null;
    labelSelect.value = '';
    syncDraft();
  });

  cancelBtn.addEventListener('click', () => {
    flight.cancel();
    status.textContent = 'cancelled';
  });

  async function apply(): Promise<void> {
    const body = state.buildQueryBody();
    if (!body) {
      errorBox.textContent = 'select a label or drag a rectangle first';
      return;
    }
    errorBox.textContent = '';
    status.textContent = 'querying...';
    applyBtn.disabled = true;
    let resp: QueryResponse;
    try {
      resp = await flight.run((signal) => api.query(body, signal));
    } catch (e) {
      if (e instanceof DOMException && e.name === 'AbortError') return;
      if (e instanceof ServiceError) {
        errorBox.textContent = e.detail;
        if (e.status === 404) {
          // label table may have changed under us; refetch
          const fresh = await api.scene();
          refreshLabels(fresh.fg_labels.length ? fresh.fg_labels : fresh.labels);
        }
      } else {
        errorBox.textContent = String(e);
      }
      return;
    } finally {
      applyBtn.disabled = false;
      if (status.textContent === 'querying...') status.textContent = '';
    }

    const render = await pngToRgba(decodeBase64(resp.render_png));
    const mask = maskFromGray(await pngToRgba(decodeBase64(resp.mask_png)));
    prevResult = lastResult;
    lastResult = { render, mask };
    redrawResult();

    const s = resp.stats;
    const iou = s.mask_iou !== undefined ? `, mask IoU ${s.mask_iou.toFixed(3)}` : '';
    const gt = s.gt_label ? ` vs "${s.gt_label}"` : '';
    status.textContent =
      `view ${s.view}: ${(100 * s.selected_voxel_fraction).toFixed(2)}% of voxels selected` +
      iou + gt;

    state.pushHistory(body);
    const li = document.createElement('li');
    const btn = document.createElement('button');
    const entry = state.history[state.history.length - 1];
    btn.textContent = entry.summary;
    btn.addEventListener('click', () => {
      state.restore(entry);
      thresholdInput.value = String(state.threshold);
      thresholdShow.textContent = state.threshold.toFixed(2);
      modalitySelect.value = state.modality;
      editSelect.value = state.edit;
      viewSelect.value = String(state.view);
      syncDraft();
      void apply();
    });
    li.appendChild(btn);
    historyList.prepend(li);
    while (historyList.children.length > state.maxHistory) {
      historyList.lastChild?.remove();
    }
  }

  applyBtn.addEventListener('click', () => void apply());

  state.view = Number(viewSelect.value || 0);
  syncDraft();
  await showSource();
}

void main();
