// Session state and the view models the DOM layer renders. All pane image
// sources are data URLs wrapping bytes the service returned; the client
// never synthesizes image content.

import { ApiClient } from "./api";
import { isNearZeroDiff } from "./diff";
import { SliderSpec, validateAssignment } from "./sliders";
import {
  ApiError,
  CounterfactualResponse,
  ModelInfo,
  ObservationSummary,
} from "./types";

export const HISTORY_LIMIT = 50;

export interface HistoryEntry {
  interventions: Record<string, number>;
  response: CounterfactualResponse;
}

export interface PaneModel {
  originalSrc: string;
  counterfactualSrc: string;
  diffSrc: string | null;
  nearZeroDiff: boolean;
  latencyMs: number;
}

export interface CovariateRow {
  name: string;
  before: number;
  after: number;
  changed: boolean;
}

export interface SessionState {
  modelInfo: ModelInfo | null;
  observations: ObservationSummary[];
  selected: ObservationSummary | null;
  interventions: Record<string, number>;
  history: HistoryEntry[];
  diffOverlay: boolean;
  inlineErrors: Record<string, string>;
  lastResponse: CounterfactualResponse | null;
}

// Shared across all in-flight requests of a session; a response only lands
// if nothing newer has landed before it.
export interface RequestSequencer {
  next: number;
  applied: number;
}

export function newSequencer(): RequestSequencer {
  return { next: 0, applied: 0 };
}

export function initialState(): SessionState {
  return {
    modelInfo: null,
    observations: [],
    selected: null,
    interventions: {},
    history: [],
    diffOverlay: true,
    inlineErrors: {},
    lastResponse: null,
  };
}

export function dataUrl(pngBase64: string): string {
  return `data:image/png;base64,${pngBase64}`;
}

export function paneModel(response: CounterfactualResponse): PaneModel {
  return {
    originalSrc: dataUrl(response.image_original),
    counterfactualSrc: dataUrl(response.image_counterfactual),
    diffSrc: response.image_diff ? dataUrl(response.image_diff) : null,
    nearZeroDiff: isNearZeroDiff(response.diff_max_abs),
    latencyMs: response.latency_ms,
  };
}

export function covariateTable(response: CounterfactualResponse): CovariateRow[] {
  const names = Object.keys(response.covariates_before).sort();
  return names.map((name) => {
    const before = response.covariates_before[name] ?? NaN;
    const after = response.covariates_after[name] ?? NaN;
    return {
      name,
      before,
      after,
      changed: Math.abs(after - before) > 1e-9,
    };
  });
}

export function appendHistory(
  state: SessionState,
  entry: HistoryEntry,
): SessionState {
  const history = [...state.history, entry];
  if (history.length > HISTORY_LIMIT) {
    history.splice(0, history.length - HISTORY_LIMIT);
  }
  return { ...state, history };
}

export interface ApplyOutcome {
  state: SessionState;
  pane: PaneModel | null;
  stale: boolean;
}

// Validates against the slider specs, POSTs, and resolves stale responses by
// sequence number: a commit whose response lands after a newer commit's
// response is discarded.
export async function applyIntervention(
  state: SessionState,
  specs: SliderSpec[],
  assignments: Record<string, number>,
  client: ApiClient,
  sequencer: RequestSequencer,
): Promise<ApplyOutcome> {
  const errors: Record<string, string> = {};
  for (const [name, value] of Object.entries(assignments)) {
    const spec = specs.find((s) => s.name === name);
    if (!spec) {
      errors[name] = `${name}: not intervenable`;
      continue;
    }
    const verdict = validateAssignment(spec, value);
    if (!verdict.ok) {
      errors[name] = verdict.message ?? "invalid value";
    }
  }
  if (Object.keys(errors).length > 0) {
    // invalid input never reaches the service
    return {
      state: { ...state, inlineErrors: errors },
      pane: null,
      stale: false,
    };
  }
  if (!state.selected) {
    return {
      state: {
        ...state,
        inlineErrors: { _global: "select an observation first" },
      },
      pane: null,
      stale: false,
    };
  }

  const seq = ++sequencer.next;
  const working: SessionState = {
    ...state,
    inlineErrors: {},
    interventions: { ...assignments },
  };
  try {
    const response = await client.postCounterfactual({
      observation_id: state.selected.id,
      interventions: assignments,
      options: { return_diff: true, deterministic: true },
    });
    if (seq <= sequencer.applied) {
      return { state: working, pane: null, stale: true };
    }
    sequencer.applied = seq;
    const updated = appendHistory(
      { ...working, lastResponse: response },
      { interventions: { ...assignments }, response },
    );
    return { state: updated, pane: paneModel(response), stale: false };
  } catch (error) {
    if (error instanceof ApiError && error.status === 400) {
      const variable = error.detail?.variable;
      const message = error.detail?.error ?? "invalid intervention";
      return {
        state: {
          ...working,
          inlineErrors: variable ? { [variable]: message } : { _global: message },
        },
        pane: null,
        stale: false,
      };
    }
    throw error;
  }
}

export interface ComparisonModel {
  left: HistoryEntry;
  right: HistoryEntry;
}

export function compareHistory(
  state: SessionState,
  i: number,
  j: number,
): ComparisonModel | null {
  const left = state.history[i];
  const right = state.history[j];
  if (!left || !right) return null;
  return { left, right };
}

// Deep links restore a comparison: "#compare=i,j".
export function encodeComparisonHash(i: number, j: number): string {
  return `#compare=${i},${j}`;
}

export function decodeComparisonHash(hash: string): [number, number] | null {
  const match = /^#compare=(\d+),(\d+)$/.exec(hash);
  if (!match) return null;
  return [Number(match[1]), Number(match[2])];
}
