// Slider specifications are derived from /model/info only; nothing about
// variable ranges is hard-coded in the client.

import { ModelInfo, VariableInfo } from "./types";

export interface SliderSpec {
  name: string;
  unit: string;
  kind: VariableInfo["kind"];
  min: number;
  max: number;
  step: number;
}

const CONTINUOUS_STEPS = 200;

export function buildSliderSpecs(info: ModelInfo): SliderSpec[] {
  const specs: SliderSpec[] = [];
  for (const variable of info.variables) {
    if (!variable.intervenable) continue;
    if (variable.kind === "binary") {
      specs.push({
        name: variable.name,
        unit: variable.unit,
        kind: variable.kind,
        min: 0,
        max: 1,
        step: 1,
      });
      continue;
    }
    const observed = variable.observed_range;
    const lo = observed ? observed.lo : (variable.support.lo ?? 0);
    const hi = observed ? observed.hi : (variable.support.hi ?? lo + 1);
    // hard support bounds still win over the observed span
    const min = clampToSupport(variable, lo);
    const max = variable.support.hi !== null
      ? Math.min(hi, variable.support.hi)
      : hi;
    const step = variable.kind === "discrete-count"
      ? 1
      : (max - min) / CONTINUOUS_STEPS || 1;
    specs.push({
      name: variable.name,
      unit: variable.unit,
      kind: variable.kind,
      min,
      max,
      step,
    });
  }
  return specs;
}

function clampToSupport(variable: VariableInfo, lo: number): number {
  if (variable.support.lo === null) return lo;
  const bound = variable.support.lo;
  const clamped = Math.max(lo, bound);
  if (variable.support.lo_open && clamped === bound) {
    // strictly-positive quantities: keep the slider off the open bound
    return bound + Math.max(Math.abs(bound), 1) * 1e-3;
  }
  return clamped;
}

export interface ValidationResult {
  ok: boolean;
  message?: string;
}

export function validateAssignment(
  spec: SliderSpec,
  value: number,
): ValidationResult {
  if (!Number.isFinite(value)) {
    return { ok: false, message: `${spec.name}: value must be a number` };
  }
  if (spec.kind === "binary" && value !== 0 && value !== 1) {
    return { ok: false, message: `${spec.name}: must be 0 or 1` };
  }
  if (spec.kind === "discrete-count" && !Number.isInteger(value)) {
    return { ok: false, message: `${spec.name}: must be an integer` };
  }
  if (value < spec.min || value > spec.max) {
    return {
      ok: false,
      message: `${spec.name}: ${value} outside [${spec.min}, ${spec.max}]`,
    };
  }
  return { ok: true };
}
