// Per-turn latency breakdown: display-only math over server-reported timings.
//
// The panel never recomputes server numbers beyond formatting; segment
// fractions are taken against the reported total, and whatever the three
// stages do not cover is the (unrendered) residual.

import type { StageTimings } from "./types.js";

export interface StageSegment {
  label: string;
  seconds: number;
  fraction: number; // of t_total, in [0, 1]
}

export function stageSegments(stats: StageTimings): StageSegment[] {
  const total = stats.t_total;
  const fraction = (s: number) => (total > 0 ? Math.max(0, Math.min(1, s / total)) : 0);
  return [
    { label: "visual", seconds: stats.t_ve, fraction: fraction(stats.t_ve) },
    { label: "prompt", seconds: stats.t_prompt, fraction: fraction(stats.t_prompt) },
    { label: "generate", seconds: stats.t_gen, fraction: fraction(stats.t_gen) },
  ];
}

/** Two-decimal rendering; missing values show as an em dash. */
export function fmt2(x: number | null | undefined): string {
  if (x === null || x === undefined || Number.isNaN(x)) return "—";
  return x.toFixed(2);
}

export interface StatRow {
  label: string;
  value: string;
}

export function statRows(stats: StageTimings): StatRow[] {
  return [
    { label: "T_VE (s)", value: fmt2(stats.t_ve) },
    { label: "S_prompt (tok/s)", value: fmt2(stats.s_prompt) },
    { label: "S_gen (tok/s)", value: fmt2(stats.s_gen) },
    { label: "T_total (s)", value: fmt2(stats.t_total) },
    { label: "N_prompt", value: String(stats.n_prompt) },
    { label: "N_gen", value: String(stats.n_gen) },
  ];
}
