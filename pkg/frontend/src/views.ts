// HTML fragments for the workbench panels. Server order is never re-sorted;
// every number is a formatted pass-through of an API value.

import { MetricsRecord, QueueEntry, WhatifResponse } from './api.js';
import { fmt, whatifDisplay } from './format.js';
import { MaskDraft } from './masks.js';

export function esc(text: string): string {
  return text.replace(/&/g, '&amp;').replace(/</g, '&lt;').replace(/>/g, '&gt;');
}

export function queueListHtml(entries: QueueEntry[], selected: string | null): string {
  if (entries.length === 0) {
    return `<div class="guidance">No open round. Advance a round to fill the
      queue with the instances most in need of attention feedback.</div>`;
  }
  const rows = entries.map((e) => {
    const badge = e.status === 'done'
      ? '<span class="badge done">done</span>'
      : '<span class="badge pending">pending</span>';
    const cls = e.instance_id === selected ? 'queue-row selected' : 'queue-row';
    return `<div class="${cls}" data-id="${esc(e.instance_id)}">
      <span class="rank">#${e.rank + 1}</span>
      <span class="iid">${esc(e.instance_id)}</span>
      <span class="score">${fmt(e.score)}</span>
      ${badge}
    </div>`;
  });
  return rows.join('\n');
}

export function staleBanner(): string {
  return `<div class="banner stale">Round state changed on the server.
    <button id="refresh-btn">Refresh</button></div>`;
}

const MASK_CLASS: Record<number, string> = { [-1]: 'unknown', 0: 'off', 1: 'on' };

// Tabular rendering: one bar group per timestep, one bar per feature.
// Bar height encodes |contribution|; color encodes the current mask value.
export function maskEditorHtml(entry: QueueEntry, draft: MaskDraft): string {
  const T = draft.T;
  const D = draft.D;
  const ranked = new Set(entry.features.map(([t, d]) => `${t}:${d}`));
  let maxAbs = 1e-12;
  for (const row of entry.contribution) {
    for (const v of row) maxAbs = Math.max(maxAbs, Math.abs(v));
  }
  const groups: string[] = [];
  for (let t = 0; t < T; t++) {
    const bars: string[] = [];
    for (let d = 0; d < D; d++) {
      const contrib = entry.contribution[t][d];
      const h = Math.max(4, Math.round((56 * Math.abs(contrib)) / maxAbs));
      const cls = MASK_CLASS[draft.feature[t][d]];
      const hot = ranked.has(`${t}:${d}`) ? ' ranked' : '';
      bars.push(`<div class="bar ${cls}${hot}" data-t="${t}" data-d="${d}"
        style="height:${h}px" title="(${t}, ${d}) contribution ${fmt(contrib)}"></div>`);
    }
    const tCls = MASK_CLASS[draft.time[t]];
    groups.push(`<div class="step">
      <div class="bars">${bars.join('')}</div>
      <button class="time-toggle ${tCls}" data-t="${t}">t${t}</button>
    </div>`);
  }
  return `<div class="editor-grid">${groups.join('')}</div>`;
}

// Dense grids render as a heatmap with per-cell toggles instead of bars.
export function useHeatmap(T: number, D: number): boolean {
  return T > 20 || D > 60;
}

export function heatmapHtml(entry: QueueEntry, draft: MaskDraft): string {
  let maxAbs = 1e-12;
  for (const row of entry.contribution) {
    for (const v of row) maxAbs = Math.max(maxAbs, Math.abs(v));
  }
  const rows: string[] = [];
  for (let t = 0; t < draft.T; t++) {
    const cells: string[] = [];
    for (let d = 0; d < draft.D; d++) {
      const a = Math.abs(entry.contribution[t][d]) / maxAbs;
      const cls = MASK_CLASS[draft.feature[t][d]];
      cells.push(`<td class="cell ${cls}" data-t="${t}" data-d="${d}"
        style="opacity:${(0.25 + 0.75 * a).toFixed(2)}"></td>`);
    }
    rows.push(`<tr>${cells.join('')}</tr>`);
  }
  return `<table class="heatmap"><tbody>${rows.join('')}</tbody></table>`;
}

export function rankedFeaturesHtml(entry: QueueEntry): string {
  const rows = entry.features.map(([t, d, score, scorer], i) =>
    `<li>#${i + 1} cell (${t}, ${d}) score ${fmt(score)} <em>${esc(scorer)}</em></li>`);
  return `<ol class="ranked-features">${rows.join('')}</ol>`;
}

export function whatifHtml(response: WhatifResponse | null, stale: boolean,
                           selectedCells: number[][]): string {
  if (!response) {
    return `<div class="whatif-empty">Toggle cells to preview switching their
      attention off. Selection: ${selectedCells.length} cells. Delta 0.</div>`;
  }
  const shown = whatifDisplay(response.delta, response.delta_norm);
  const staleTag = stale ? '<span class="badge stale">stale</span>' : '';
  return `<div class="whatif-result">
    ${staleTag}
    <div>base: ${response.y_base.map((v) => fmt(v)).join(', ')}</div>
    <div>counterfactual: ${response.y_cf.map((v) => fmt(v)).join(', ')}</div>
    <div>delta: ${shown.delta} (norm ${shown.norm})</div>
  </div>`;
}

export function metricsHtml(records: MetricsRecord[]): string {
  if (records.length === 0) {
    return '<div class="guidance">No completed rounds yet.</div>';
  }
  const rows = records.map((r) =>
    `<tr><td>${r.round}</td><td>${esc(r.metric)}</td>
     <td>${fmt(r.value)}</td><td>${fmt(r.loss)}</td><td>${r.context_size}</td></tr>`);
  return `<table class="metrics"><thead>
    <tr><th>round</th><th>metric</th><th>value</th><th>loss</th><th>masks</th></tr>
    </thead><tbody>${rows.join('')}</tbody></table>`;
}
