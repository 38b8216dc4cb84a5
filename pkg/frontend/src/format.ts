// Display formatting: all values shown come from the server verbatim,
// only rounded for the screen.

export const DISPLAY_DECIMALS = 4;

export function fmt(value: number, decimals: number = DISPLAY_DECIMALS): string {
  if (!Number.isFinite(value)) return String(value);
  return value.toFixed(decimals);
}

export function fmtVector(values: number[], decimals: number = DISPLAY_DECIMALS): string {
  return `[${values.map((v) => fmt(v, decimals)).join(', ')}]`;
}

// The what-if panel must show exactly the API's delta at display precision.
export function whatifDisplay(delta: number[], deltaNorm: number): {
  delta: string; norm: string;
} {
  return { delta: fmtVector(delta), norm: fmt(deltaNorm) };
}

export function pct(value: number): string {
  return `${(100 * value).toFixed(1)}%`;
}
