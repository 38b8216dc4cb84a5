// Ternary mask drafts: -1 unknown, 0 not-attend, 1 attend.
// Pure logic, no DOM: unit-tested directly.

export type Tri = -1 | 0 | 1;

export interface MaskDraft {
  instanceId: string;
  T: number;
  D: number;
  feature: Tri[][]; // [t][d]
  time: Tri[];      // [t]
  dirty: boolean;
}

export function newDraft(instanceId: string, T: number, D: number): MaskDraft {
  return {
    instanceId,
    T,
    D,
    feature: Array.from({ length: T }, () => Array<Tri>(D).fill(-1)),
    time: Array<Tri>(T).fill(-1),
    dirty: false,
  };
}

// Click cycle puts "attend" one click away from unknown: -1 -> 1 -> 0 -> -1.
export function cycle(value: Tri): Tri {
  if (value === -1) return 1;
  if (value === 1) return 0;
  return -1;
}

export function cycleFeature(draft: MaskDraft, t: number, d: number): MaskDraft {
  if (t < 0 || t >= draft.T || d < 0 || d >= draft.D) return draft;
  const feature = draft.feature.map((row) => row.slice());
  feature[t][d] = cycle(feature[t][d]);
  return { ...draft, feature, dirty: true };
}

export function cycleTime(draft: MaskDraft, t: number): MaskDraft {
  if (t < 0 || t >= draft.T) return draft;
  const time = draft.time.slice();
  time[t] = cycle(time[t]);
  return { ...draft, time, dirty: true };
}

// Submission payload holds only annotated (non-unknown) cells.
export function sparseFeatureCells(draft: MaskDraft): number[][] {
  const out: number[][] = [];
  for (let t = 0; t < draft.T; t++) {
    for (let d = 0; d < draft.D; d++) {
      if (draft.feature[t][d] !== -1) out.push([t, d, draft.feature[t][d]]);
    }
  }
  return out;
}

export function sparseTimeCells(draft: MaskDraft): number[][] {
  const out: number[][] = [];
  for (let t = 0; t < draft.T; t++) {
    if (draft.time[t] !== -1) out.push([t, draft.time[t]]);
  }
  return out;
}

export interface ValidationResult {
  ok: boolean;
  problems: string[];
}

export function validateDraft(draft: MaskDraft): ValidationResult {
  const problems: string[] = [];
  for (let t = 0; t < draft.T; t++) {
    for (let d = 0; d < draft.D; d++) {
      const v = draft.feature[t][d];
      if (v !== -1 && v !== 0 && v !== 1) {
        problems.push(`cell (${t}, ${d}) has value ${v}`);
      }
    }
    const tv = draft.time[t];
    if (tv !== -1 && tv !== 0 && tv !== 1) {
      problems.push(`timestep ${t} has value ${tv}`);
    }
  }
  return { ok: problems.length === 0, problems };
}

export function annotatedCount(draft: MaskDraft): number {
  return sparseFeatureCells(draft).length + sparseTimeCells(draft).length;
}
