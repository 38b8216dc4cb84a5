// Annotation workbench wiring: queue -> mask editor -> what-if -> metrics.

import { api, ApiError, QueueEntry, RoundStatus, WhatifResponse } from './api.js';
import { annotatedCount, cycleFeature, cycleTime, MaskDraft, newDraft,
         sparseFeatureCells, sparseTimeCells, validateDraft } from './masks.js';
import { heatmapHtml, maskEditorHtml, metricsHtml, queueListHtml,
         rankedFeaturesHtml, staleBanner, useHeatmap, whatifHtml } from './views.js';

interface AppState {
  status: RoundStatus | null;
  entries: QueueEntry[];
  selected: string | null;
  drafts: Map<string, MaskDraft>;   // drafts persist across navigation
  whatifCells: number[][];
  whatifResponse: WhatifResponse | null;
  whatifStale: boolean;
  banner: string | null;
  error: string | null;
}

const state: AppState = {
  status: null,
  entries: [],
  selected: null,
  drafts: new Map(),
  whatifCells: [],
  whatifResponse: null,
  whatifStale: false,
  banner: null,
  error: null,
};

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node;
}

function currentEntry(): QueueEntry | null {
  return state.entries.find((e) => e.instance_id === state.selected) ?? null;
}

function currentDraft(): MaskDraft | null {
  if (!state.selected) return null;
  const entry = currentEntry();
  if (!entry) return null;
  let draft = state.drafts.get(state.selected);
  if (!draft) {
    draft = newDraft(state.selected, entry.x.length, entry.x[0].length);
    state.drafts.set(state.selected, draft);
  }
  return draft;
}

async function refreshStatus(): Promise<void> {
  const prev = state.status;
  state.status = await api.status();
  if (prev && prev.state === 'open' && state.status.state !== 'open') {
    state.banner = staleBanner();
  }
  if (state.status.state === 'open') {
    try {
      const queue = await api.queue();
      state.entries = queue.entries; // server order; never re-sorted
    } catch (err) {
      if (!(err instanceof ApiError && err.status === 409)) throw err;
    }
  } else if (state.status.state !== 'reranking') {
    state.entries = [];
  }
}

async function selectInstance(id: string): Promise<void> {
  state.selected = id;
  state.whatifCells = [];
  state.whatifResponse = null;
  state.whatifStale = false;
  render();
}

function handleCellClick(t: number, d: number): void {
  const draft = currentDraft();
  if (!draft) return;
  state.drafts.set(draft.instanceId, cycleFeature(draft, t, d));
  render();
}

function handleTimeClick(t: number): void {
  const draft = currentDraft();
  if (!draft) return;
  state.drafts.set(draft.instanceId, cycleTime(draft, t));
  render();
}

async function toggleWhatif(t: number, d: number): Promise<void> {
  const key = state.whatifCells.findIndex(([a, b]) => a === t && b === d);
  if (key >= 0) state.whatifCells.splice(key, 1);
  else state.whatifCells.push([t, d]);
  await runWhatif();
}

async function runWhatif(): Promise<void> {
  if (!state.selected) return;
  if (state.whatifCells.length === 0) {
    state.whatifResponse = null;
    state.whatifStale = false;
    render();
    return;
  }
  try {
    state.whatifResponse = await api.whatif(state.selected, state.whatifCells);
    state.whatifStale = false;
  } catch {
    state.whatifStale = true; // keep last-good values, mark them stale
  }
  render();
}

async function submitCurrent(): Promise<void> {
  const draft = currentDraft();
  if (!draft || !state.selected) return;
  const validation = validateDraft(draft);
  if (!validation.ok) {
    state.error = validation.problems.join('; ');
    render();
    return;
  }
  try {
    await api.submit(state.selected, sparseFeatureCells(draft),
                     sparseTimeCells(draft));
    state.drafts.delete(state.selected);
    state.error = null;
    await refreshStatus();
  } catch (err) {
    // server rejections carry cell coordinates; surface them verbatim
    state.error = err instanceof ApiError ? err.message : String(err);
  }
  render();
}

async function advanceRound(): Promise<void> {
  const P = Number((el('adv-p') as HTMLInputElement).value);
  const K = Number((el('adv-k') as HTMLInputElement).value);
  const F = Number((el('adv-f') as HTMLInputElement).value);
  const instScorer = (el('adv-inst') as HTMLSelectElement).value;
  const featScorer = (el('adv-feat') as HTMLSelectElement).value;
  try {
    await api.advance(P, K, F, instScorer, featScorer);
    state.error = null;
  } catch (err) {
    state.error = err instanceof ApiError ? err.message : String(err);
  }
  await refreshStatus();
  render();
}

async function refreshMetrics(): Promise<void> {
  const metrics = await api.metrics();
  el('metrics-panel').innerHTML = metricsHtml(metrics.records);
}

function render(): void {
  const status = state.status;
  el('status-line').textContent = status
    ? `round ${status.round} | ${status.state} | ${status.queue_done}/${status.queue_total} done | store ${status.store_size}`
    : 'connecting...';
  el('banner-slot').innerHTML = state.banner ?? '';
  el('error-slot').textContent = state.error ?? '';
  el('queue-panel').innerHTML = queueListHtml(state.entries, state.selected);

  const entry = currentEntry();
  const draft = currentDraft();
  if (entry && draft) {
    el('instance-title').textContent =
      `${entry.instance_id} | prediction ${entry.prediction.map((v) => v.toFixed(4)).join(', ')}`;
    el('editor-panel').innerHTML = useHeatmap(draft.T, draft.D)
      ? heatmapHtml(entry, draft)
      : maskEditorHtml(entry, draft);
    el('features-panel').innerHTML = rankedFeaturesHtml(entry);
    el('draft-count').textContent = `${annotatedCount(draft)} cells annotated`;
    (el('submit-btn') as HTMLButtonElement).disabled =
      entry.status === 'done' || !validateDraft(draft).ok;
  } else {
    el('instance-title').textContent = 'select an instance';
    el('editor-panel').innerHTML = '';
    el('features-panel').innerHTML = '';
    el('draft-count').textContent = '';
  }
  el('whatif-panel').innerHTML =
    whatifHtml(state.whatifResponse, state.whatifStale, state.whatifCells);
}

function bindEvents(): void {
  el('queue-panel').addEventListener('click', (ev) => {
    const row = (ev.target as HTMLElement).closest('.queue-row');
    if (row) void selectInstance((row as HTMLElement).dataset.id!);
  });
  el('editor-panel').addEventListener('click', (ev) => {
    const target = ev.target as HTMLElement;
    const bar = target.closest('.bar, .cell') as HTMLElement | null;
    if (bar) {
      const t = Number(bar.dataset.t);
      const d = Number(bar.dataset.d);
      if (ev.shiftKey) void toggleWhatif(t, d);
      else handleCellClick(t, d);
      return;
    }
    const tbtn = target.closest('.time-toggle') as HTMLElement | null;
    if (tbtn) handleTimeClick(Number(tbtn.dataset.t));
  });
  el('submit-btn').addEventListener('click', () => void submitCurrent());
  el('advance-btn').addEventListener('click', () => void advanceRound());
  el('banner-slot').addEventListener('click', (ev) => {
    if ((ev.target as HTMLElement).id === 'refresh-btn') {
      state.banner = null;
      void refreshStatus().then(render);
    }
  });
  el('whatif-clear').addEventListener('click', () => {
    state.whatifCells = [];
    void runWhatif();
  });
}

async function init(): Promise<void> {
  bindEvents();
  await refreshStatus();
  render();
  await refreshMetrics();
  setInterval(() => {
    void refreshStatus().then(() => {
      render();
      return refreshMetrics();
    });
  }, 3000);
}

void init();
