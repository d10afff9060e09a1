// Wire types for the inference service's v1 JSON schema, with zod
// validators so malformed responses surface as schema errors instead of
// silently broken panes.

import { z } from "zod";

export const rangeSchema = z.object({
  lo: z.number(),
  hi: z.number(),
});

export const variableSchema = z.object({
  name: z.string(),
  kind: z.enum(["continuous-positive", "binary", "discrete-count", "image"]),
  unit: z.string(),
  parents: z.array(z.string()),
  support: z.object({
    lo: z.number().nullable(),
    hi: z.number().nullable(),
    lo_open: z.boolean(),
  }),
  observed_range: rangeSchema.nullable(),
  intervenable: z.boolean(),
});

export const modelInfoSchema = z.object({
  schema_version: z.literal("v1"),
  image_size: z.number(),
  display_clip: z.number(),
  diff_scale: z.number(),
  latents: z.object({
    k: z.number(),
    flat: z.number(),
    m: z.number(),
    n: z.number(),
  }),
  conditioning: z.array(z.string()),
  variables: z.array(variableSchema),
  observation_count: z.number(),
  epoch: z.number(),
});

export const observationSummarySchema = z.object({
  id: z.number(),
  covariates: z.record(z.string(), z.number()),
  thumbnail: z.string(),
  segmented_lesion_volume: z.number().nullable(),
});

export const observationsPageSchema = z.object({
  total: z.number(),
  page: z.number(),
  page_size: z.number(),
  records: z.array(observationSummarySchema),
});

export const counterfactualResponseSchema = z.object({
  schema_version: z.literal("v1"),
  covariates_before: z.record(z.string(), z.number()),
  covariates_after: z.record(z.string(), z.number()),
  interventions: z.record(z.string(), z.number()),
  image_original: z.string(),
  image_counterfactual: z.string(),
  image_diff: z.string().optional(),
  diff_max_abs: z.number().optional(),
  latency_ms: z.number(),
});

export type ModelInfo = z.infer<typeof modelInfoSchema>;
export type VariableInfo = z.infer<typeof variableSchema>;
export type ObservationSummary = z.infer<typeof observationSummarySchema>;
export type ObservationsPage = z.infer<typeof observationsPageSchema>;
export type CounterfactualResponse = z.infer<typeof counterfactualResponseSchema>;

export interface CounterfactualRequest {
  observation_id: number;
  interventions: Record<string, number>;
  options: { return_diff: boolean; deterministic: boolean };
}

// Error body the service sends with a 400 on a bad intervention.
export interface ApiErrorDetail {
  error: string;
  variable?: string | null;
}

export class ApiError extends Error {
  status: number;
  detail: ApiErrorDetail | null;

  constructor(status: number, detail: ApiErrorDetail | null, message?: string) {
    super(message ?? detail?.error ?? `request failed with ${status}`);
    this.status = status;
    this.detail = detail;
  }
}

export class SchemaError extends Error {
  constructor(endpoint: string, issue: string) {
    super(`response from ${endpoint} does not match schema v1: ${issue}`);
  }
}
