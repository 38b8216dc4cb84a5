// Typed client for the annotation gateway (gateway/v1 wire schema).
// The UI does zero numeric modeling: every displayed number originates here.

export const API_BASE = '';

export interface RoundStatus {
  schema: string;
  state: 'idle' | 'reranking' | 'open' | 'closing' | 'adapting' | 'error';
  round: number;
  open_round: number | null;
  queue_done: number;
  queue_total: number;
  params_digest: string;
  store_size: number;
  error: string | null;
}

export interface QueueEntry {
  instance_id: string;
  rank: number;
  score: number;
  status: 'pending' | 'done';
  x: number[][];
  y: number[];
  prediction: number[];
  contribution: number[][];
  attention: { beta: number[]; gamma: number[][] };
  features: [number, number, number, string][];
}

export interface WhatifResponse {
  schema: string;
  instance_id: string;
  off: number[][];
  y_base: number[];
  y_cf: number[];
  delta: number[];
  delta_norm: number;
  contribution_delta: number[][];
}

export interface MetricsRecord {
  schema: string;
  round: number;
  metric: string;
  value: number;
  loss: number;
  n: number;
  context_size: number;
}

async function getJson<T>(path: string): Promise<T> {
  const res = await fetch(`${API_BASE}${path}`);
  if (!res.ok) throw new ApiError(res.status, await res.text());
  return res.json() as Promise<T>;
}

async function postJson<T>(path: string, body: unknown): Promise<T> {
  const res = await fetch(`${API_BASE}${path}`, {
    method: 'POST',
    headers: { 'Content-Type': 'application/json' },
    body: JSON.stringify(body),
  });
  if (!res.ok) throw new ApiError(res.status, await res.text());
  return res.json() as Promise<T>;
}

export class ApiError extends Error {
  status: number;
  constructor(status: number, detail: string) {
    super(detail);
    this.status = status;
  }
}

export const api = {
  status: () => getJson<RoundStatus>('/api/round/status'),
  round: () => getJson<RoundStatus>('/api/round'),
  queue: () => getJson<{ schema: string; entries: QueueEntry[] }>('/api/queue'),
  instance: (id: string) => getJson<QueueEntry>(`/api/instances/${id}`),
  advance: (P: number, K: number, F: number, instScorer: string, featScorer: string) =>
    postJson<{ schema: string; round: number; state: string }>('/api/round/advance', {
      P, K, F, inst_scorer: instScorer, feat_scorer: featScorer,
    }),
  submit: (instanceId: string, featureMask: number[][], timeMask: number[][]) =>
    postJson<{ schema: string; remaining: number; store_size: number }>('/api/annotations', {
      instance_id: instanceId, feature_mask: featureMask, time_mask: timeMask,
    }),
  whatif: (instanceId: string, off: number[][]) =>
    postJson<WhatifResponse>('/api/whatif', { instance_id: instanceId, off }),
  metrics: () => getJson<{ schema: string; records: MetricsRecord[] }>('/api/metrics'),
};
